"""Spectral analysis of the per-mode linearized operators L_k.

Matrix eigensolves on the discretized operator, an Evans function built from
the continuum first-order eigenvalue ODE (compound-matrix variables), root
counting by the argument principle, crossing detection, eigenprojections
onto the critical modes, and symmetry diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import solve_ivp
from scipy.optimize import linear_sum_assignment

from .errors import (
    ContourTooCoarse,
    InvalidInput,
    MultiplicityAnomaly,
    NoCrossing,
    RootOnContour,
    SolverFailure,
    SplittingFailure,
    StiffnessFailure,
)
from .model_pde import (
    ChannelField,
    DiscretizationGrid,
    ModelSystem,
    ShockProfile,
    field_inner,
    linear_operator_parts,
    make_profile,
    mode_pairing,
    random_field,
    reflect_coeffs,
    rotate_coeffs,
)

# --------------------------------------------------------------------------
# operator assembly


@dataclass
class OperatorMatrix:
    """Discretized L_k = L0 + i k J - k^2 B22 on interior nodes (component-major)."""

    k: int
    eps: float
    matrix: object  # ndarray or scipy sparse matrix
    grid: DiscretizationGrid
    model: ModelSystem
    profile: ShockProfile

    @property
    def sparse(self) -> bool:
        return sp.issparse(self.matrix)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray() if self.sparse else np.asarray(self.matrix)

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v


def assemble_Lk(model: ModelSystem, profile: ShockProfile, k: int,
                grid: Optional[DiscretizationGrid] = None, sparse: bool = False) -> OperatorMatrix:
    if grid is not None and grid != profile.grid:
        raise InvalidInput("profile was computed on a different grid")
    L0, J, Bk = linear_operator_parts(model, profile, sparse=sparse)
    A = L0 + 1j * k * J - k ** 2 * Bk
    return OperatorMatrix(int(k), profile.eps, A, profile.grid, model, profile)


def interior(profile_array: np.ndarray) -> np.ndarray:
    """(n, N1) array -> flat interior vector."""
    return np.asarray(profile_array)[:, 1:-1].reshape(-1)


def full(vec: np.ndarray, n: int) -> np.ndarray:
    """Flat interior vector -> (n, N1) array with zero boundary nodes."""
    v = np.asarray(vec).reshape(n, -1)
    out = np.zeros((n, v.shape[1] + 2), dtype=complex)
    out[:, 1:-1] = v
    return out


# --------------------------------------------------------------------------
# eigensolves


@dataclass
class EigenPair:
    value: complex
    vector: np.ndarray  # flat interior vector, unit 2-norm
    residual: float

    def to_dict(self):
        return {"re": self.value.real, "im": self.value.imag, "residual": self.residual}


def _residual(A, lam, v) -> float:
    return float(np.linalg.norm(A @ v - lam * v) / np.linalg.norm(v))


def _polish(A, lam, v, tol, steps=3):
    """Shifted inverse iteration with Rayleigh quotient update."""
    n = A.shape[0]
    I = sp.identity(n, format="csc") if sp.issparse(A) else np.eye(n)
    for _ in range(steps):
        if _residual(A, lam, v) <= tol:
            break
        shift = lam + 1e-12 * max(1.0, abs(lam))
        M = (A - shift * I)
        try:
            w = spla.spsolve(M.tocsc(), v) if sp.issparse(M) else np.linalg.solve(M, v)
        except (np.linalg.LinAlgError, RuntimeError):
            break
        v = w / np.linalg.norm(w)
        lam = np.vdot(v, A @ v)
    return lam, v


def spectrum_in_region(op: OperatorMatrix, region: Sequence[float], tol: float = 1e-8,
                       method: str = "auto", nev: int = 12, sigma: Optional[complex] = None) -> List[EigenPair]:
    """Eigenpairs of ``op`` with re_min <= Re <= re_max and im_min <= Im <= im_max.

    ``method`` is 'dense', 'shift-invert' or 'auto' (dense below 4000 unknowns).
    """
    re0, re1, im0, im1 = map(float, region)
    if re0 > re1 or im0 > im1:
        return []
    if method == "auto":
        method = "dense" if op.size <= 4000 else "shift-invert"
    A = op.matrix
    inside = lambda z: re0 <= z.real <= re1 and im0 <= z.imag <= im1
    if method == "dense":
        Ad = op.dense()
        try:
            vals, vecs = sla.eig(Ad)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverFailure(f"dense eigensolve failed: {exc}") from exc
        cand = [(vals[i], vecs[:, i]) for i in range(len(vals)) if inside(vals[i])]
        A = Ad
    elif method == "shift-invert":
        As = op.matrix if op.sparse else sp.csc_matrix(op.matrix)
        centre = complex(0.5 * (re0 + re1), 0.5 * (im0 + im1)) if sigma is None else sigma
        m = nev
        while True:
            try:
                vals, vecs = spla.eigs(As.tocsc(), k=min(m, As.shape[0] - 2), sigma=centre, which="LM", tol=1e-13)
            except (spla.ArpackError, RuntimeError) as exc:
                raise SolverFailure(f"shift-invert eigensolve failed: {exc}") from exc
            cand = [(vals[i], vecs[:, i]) for i in range(len(vals)) if inside(vals[i])]
            # all returned values inside: there may be more further away
            if len(cand) < len(vals) or m >= 256:
                break
            m *= 2
        A = As
    else:
        raise InvalidInput(f"unknown eigensolver method {method!r}")
    out = []
    for lam, v in cand:
        v = v / np.linalg.norm(v)
        if _residual(A, lam, v) > tol:
            lam, v = _polish(A, lam, v, tol)
        res = _residual(A, lam, v)
        if res > tol:
            raise SolverFailure(f"eigenpair near {lam:.6g} has residual {res:.2e} > {tol:.0e}")
        if inside(lam):
            out.append(EigenPair(complex(lam), v, res))
    out.sort(key=lambda e: (-e.value.real, e.value.imag))
    return out


def eigenvalues(model: ModelSystem, profile: ShockProfile, k: int) -> np.ndarray:
    return np.linalg.eigvals(assemble_Lk(model, profile, k).dense())


def far_field_symbol(model: ModelSystem, eps: float, k: int, xi: float, side: int) -> np.ndarray:
    """Constant-coefficient symbol of L_k at x1 -> side * infinity."""
    um, up = model.endstates(eps)
    u = (um if side < 0 else up).reshape(-1, 1)
    x = np.array([side * 1e2])
    A1 = model.dflux1(eps, u)[:, :, 0]
    A2 = model.dflux2(eps, u)[:, :, 0]
    G = model.dsource(eps, x, u)[:, :, 0]
    return (-xi ** 2 * model.B11 - xi * k * (model.B12 + model.B21) - k ** 2 * model.B22
            - 1j * xi * A1 - 1j * k * A2 + G)


def essential_spectrum_bound(model: ModelSystem, eps: float, k: int, xi_max: float = 1e3,
                             n_xi: int = 4001) -> float:
    """Largest real part of the far-field dispersion curves over real xi."""
    t = np.linspace(-1, 1, n_xi)
    xis = np.sinh(t * np.arcsinh(xi_max))
    best = -np.inf
    for side in (-1, 1):
        for xi in xis:
            best = max(best, float(np.max(np.linalg.eigvals(far_field_symbol(model, eps, k, xi, side)).real)))
    return best


def match_spectra(a: np.ndarray, b: np.ndarray) -> float:
    """Largest distance in an optimal one-to-one matching of two eigenvalue lists."""
    if len(a) != len(b):
        return float("inf")
    a, b = np.asarray(a), np.asarray(b)
    cost = np.abs(a[:, None] - b[None, :])
    r, c = linear_sum_assignment(cost)
    return float(np.max(cost[r, c])) if len(a) else 0.0


def reflection_symmetry_residual(model: ModelSystem, profile: ShockProfile, k: int) -> float:
    return match_spectra(eigenvalues(model, profile, k), eigenvalues(model, profile, -k))


def translation_mode(model: ModelSystem, profile: ShockProfile) -> Tuple[complex, np.ndarray]:
    """Eigenvalue of L_0 closest to zero and its real eigenvector (n, N1), oriented like d/dx1 ubar."""
    A = assemble_Lk(model, profile, 0).dense()
    vals, vecs = np.linalg.eig(A)
    i = int(np.argmin(np.abs(vals)))
    v = full(vecs[:, i], model.n)
    v = v * np.exp(-1j * np.angle(v.reshape(-1)[np.argmax(np.abs(v))]))
    v = v.real
    d = profile.derivative()
    if np.sum(v * d) < 0:
        v = -v
    return complex(vals[i]), v / np.linalg.norm(v)


# --------------------------------------------------------------------------
# continuum profile for the Evans ODE


def continuum_profile(model: ModelSystem, eps: float, rtol: float = 1e-12) -> Callable[[float], np.ndarray]:
    """Profile u(x1) from the standing-wave ODE, integrated to high accuracy.

    The parabolic component solves b u_s' = F_s(u) - F_s(u-), the hyperbolic
    components follow from F_h(u) = F_h(u-) (linear in u); u_s(0) is the
    endstate midpoint.
    """
    um, up = model.endstates(eps)
    if model.shock_component is None:
        return lambda x: um.copy()
    if model.r != 1:
        raise InvalidInput("continuum profile supports a single parabolic component")
    n, s = model.n, model.shock_component
    hyp = list(range(n - 1))
    Fm = model.flux1(eps, um.reshape(n, 1))[:, 0]
    A = model.dflux1(eps, um.reshape(n, 1))[:, :, 0]
    F0 = model.flux1(eps, np.zeros((n, 1)))[:, 0]
    b = model.B11[s, s]

    def state(us):
        u = np.zeros(n)
        u[s] = us
        if hyp:
            rhs = Fm[hyp] - F0[hyp] - A[np.ix_(hyp, [s])][:, 0] * us
            u[hyp] = np.linalg.solve(A[np.ix_(hyp, hyp)], rhs)
        return u

    def ode(x, y):
        u = state(y[0])
        return [(model.flux1(eps, u.reshape(n, 1))[s, 0] - Fm[s]) / b]

    mid = 0.5 * (um[s] + up[s])
    span = 60.0 * b + 60.0
    right = solve_ivp(ode, (0.0, span), [mid], method="DOP853", rtol=rtol, atol=1e-14, dense_output=True)
    left = solve_ivp(ode, (0.0, -span), [mid], method="DOP853", rtol=rtol, atol=1e-14, dense_output=True)

    def profile(x):
        x = float(x)
        if x >= 0:
            us = right.sol(min(x, span))[0]
        else:
            us = left.sol(max(x, -span))[0]
        return state(us)

    return profile


# --------------------------------------------------------------------------
# compound matrices


@lru_cache(maxsize=None)
def _compound_tables(N: int, p: int):
    sets = list(combinations(range(N), p))
    index = {s: i for i, s in enumerate(sets)}
    C = len(sets)
    rows, cols, vals = [], [], []
    for J, Jset in enumerate(sets):
        for m, jm in enumerate(Jset):
            for i in range(N):
                if i != jm and i in Jset:
                    continue
                new = list(Jset)
                new[m] = i
                order = sorted(range(p), key=lambda t: new[t])
                sign = _parity(order)
                I = index[tuple(new[t] for t in order)]
                rows.append(I * C + J)
                cols.append(i * N + jm)
                vals.append(sign)
    T = sp.csr_matrix((vals, (rows, cols)), shape=(C * C, N * N))
    idx = np.array(sets, dtype=int).reshape(C, p)
    return T, idx, index


def _parity(order) -> int:
    inv = sum(1 for a in range(len(order)) for b in range(a + 1, len(order)) if order[a] > order[b])
    return -1 if inv % 2 else 1


def compound(A: np.ndarray, p: int) -> np.ndarray:
    """Additive p-th compound of A acting on Pluecker coordinates."""
    N = A.shape[0]
    T, idx, _ = _compound_tables(N, p)
    C = idx.shape[0]
    return (T @ A.reshape(-1)).reshape(C, C)


def pluecker(X: np.ndarray) -> np.ndarray:
    """Pluecker coordinates of the column span of X (N x p)."""
    N, p = X.shape
    _, idx, _ = _compound_tables(N, p)
    if p == 0:
        return np.ones(1, dtype=complex)
    return np.linalg.det(X[idx])


def pluecker_rows(Y: np.ndarray) -> np.ndarray:
    return pluecker(Y.T)


@lru_cache(maxsize=None)
def _wedge_tables(N: int, p: int):
    _, idx_a, _ = _compound_tables(N, p)
    _, _, index_b = _compound_tables(N, N - p)
    comp = []
    signs = []
    for I in idx_a:
        Ic = tuple(sorted(set(range(N)) - set(I.tolist())))
        comp.append(index_b[Ic])
        signs.append(_parity(list(I) + list(Ic)))
    return np.array(comp, dtype=int), np.array(signs, dtype=float)


def wedge(a: np.ndarray, b: np.ndarray, N: int, p: int) -> np.ndarray:
    """Top-degree wedge of a p-vector and an (N - p)-vector (columnwise for 2-D input)."""
    comp, signs = _wedge_tables(N, p)
    if a.ndim == 1:
        return np.sum(signs * a * b[comp])
    return np.sum(signs[:, None] * a * b[comp], axis=0)


# --------------------------------------------------------------------------
# Evans function


@dataclass
class EvansRecord:
    lam: complex
    k: int
    eps: float
    value: complex
    raw: complex
    log_scale: float

    def to_dict(self):
        return {"re": self.lam.real, "im": self.lam.imag, "k": self.k, "eps": self.eps,
                "abs": abs(self.value), "arg": float(np.angle(self.value))}


@dataclass
class _Track:
    lam: complex
    mu: np.ndarray
    sel: np.ndarray  # boolean mask


class EvansFunction:
    """Evans function D(lambda) of L_k at fixed eps.

    The eigenvalue problem (lambda - L_k) v = 0 is written as a first-order
    system in Y = (v_h, v_p, Z_p) with the parabolic flux
    Z = B11 v' + i k (B12 + B21) v - A1 v.  The unstable subspace at -L and
    the stable subspace at +L are carried in Pluecker coordinates, shifted
    by the sum of their far-field growth rates and renormalized chunk by
    chunk; the value is the wedge of both at x1 = 0.

    Initial data are the spectral projections of a fixed reference
    p-vector, so D is analytic in lambda.  With ``gap_lemma`` the far-field
    subspaces are continued analytically into the region where consistent
    splitting fails; otherwise eigenvalues near the imaginary axis raise
    SplittingFailure.
    """

    def __init__(self, model: ModelSystem, eps: float, k: int, L: float = 20.0,
                 profile: Optional[Callable[[float], np.ndarray]] = None,
                 rtol: float = 1e-10, atol: float = 1e-12, chunk: float = 2.0,
                 lam_ref: Optional[float] = None, split_tol: float = 1e-8,
                 max_step: Optional[float] = None):
        self.model, self.eps, self.k, self.L = model, float(eps), int(k), float(L)
        self.profile = profile or continuum_profile(model, eps)
        self.rtol, self.atol, self.chunk = rtol, atol, chunk
        self.split_tol = split_tol
        self.max_step = max_step
        n, r = model.n, model.r
        self.nh = n - r
        self.N = self.nh + 2 * r
        b = model.B11[self.nh:, self.nh:]
        if np.linalg.matrix_rank(b) < r:
            raise InvalidInput("parabolic block of B11 must be invertible")
        self._binv = np.linalg.inv(b)
        um, up = model.endstates(eps)
        self._far = {-1: (um, -1e2), 1: (up, 1e2)}
        self._Alam = self._coeff(um, -1e2, 1.0) - self._coeff(um, -1e2, 0.0)
        bound = essential_spectrum_bound(model, eps, k, n_xi=801)
        self.ess_bound = bound
        self.lam_ref = float(lam_ref) if lam_ref is not None else 1.0 + max(bound, 0.0)
        self._ref = {}
        for side in (-1, 1):
            mu, V, W = self._eig(side, self.lam_ref)
            sel = mu.real > 0 if side < 0 else mu.real < 0
            if np.min(np.abs(mu.real)) < split_tol:
                raise SplittingFailure("no consistent splitting at the reference point")
            X = V[:, sel]
            ref = pluecker(X)
            j = int(np.argmax(np.abs(ref)))
            ref = ref / np.linalg.norm(ref)
            ref = ref * np.exp(-1j * np.angle(ref[j]))
            self._ref[side] = (ref, _Track(complex(self.lam_ref), mu, sel))
        self.p = int(np.sum(self._ref[-1][1].sel))
        if self.p + int(np.sum(self._ref[1][1].sel)) != self.N:
            raise SplittingFailure("far-field subspace dimensions do not add up")
        T1, _, _ = _compound_tables(self.N, self.p)
        T2, _, _ = _compound_tables(self.N, self.N - self.p)
        self._Alam_c = {-1: compound(self._Alam, self.p), 1: compound(self._Alam, self.N - self.p)}
        self._norm = None

    # -- coefficient matrix

    def _coeff(self, u: np.ndarray, x: float, lam: complex) -> np.ndarray:
        model, k, eps = self.model, self.k, self.eps
        n, nh, N = model.n, self.nh, self.N
        r = n - nh
        h = slice(0, nh)
        p = slice(nh, n)
        uu = np.asarray(u, dtype=float).reshape(n, 1)
        xx = np.array([x])
        A1 = model.dflux1(eps, uu)[:, :, 0]
        A2 = model.dflux2(eps, uu)[:, :, 0]
        G = model.dsource(eps, xx, uu)[:, :, 0]
        Q = lam * np.eye(n) + k ** 2 * model.B22 + 1j * k * A2 - G
        Bt = (model.B12 + model.B21)[p, p]
        binv = self._binv
        Mvp = np.zeros((r, N), dtype=complex)
        Mvp[:, :nh] = binv @ A1[p, h]
        Mvp[:, nh:n] = binv @ (A1[p, p] - 1j * k * Bt)
        Mvp[:, n:] = binv
        MZ = np.zeros((r, N), dtype=complex)
        MZ[:, :nh] = Q[p, h]
        MZ[:, nh:n] = Q[p, p]
        out = np.zeros((N, N), dtype=complex)
        if nh:
            Qh = np.zeros((nh, N), dtype=complex)
            Qh[:, :nh] = Q[h, h]
            Qh[:, nh:n] = Q[h, p]
            out[:nh] = -np.linalg.solve(A1[h, h], Qh + A1[h, p] @ Mvp)
        out[nh:n] = Mvp
        out[n:] = MZ
        return out

    def coefficient_matrix(self, x: float, lam: complex) -> np.ndarray:
        return self._coeff(self.profile(x), x, lam)

    def far_matrix(self, side: int, lam: complex) -> np.ndarray:
        u, x = self._far[side]
        return self._coeff(u, x, lam)

    def _eig(self, side, lam):
        A = self.far_matrix(side, lam)
        mu, V = np.linalg.eig(A)
        W = np.linalg.inv(V)
        return mu, V, W

    # -- continuation of the far-field splitting

    def _continue(self, side: int, start: _Track, lam: complex) -> Tuple[_Track, np.ndarray, np.ndarray]:
        lam0 = start.lam
        mu_old, sel = start.mu, start.sel
        t, dt = 0.0, 1.0
        mu, V, W = None, None, None
        if lam == lam0:
            mu, V, W = self._eig(side, lam)
            cost = np.abs(mu_old[:, None] - mu[None, :])
            r, c = linear_sum_assignment(cost)
            perm = np.empty_like(c)
            perm[r] = c
            return _Track(lam, mu[perm], sel), V[:, perm], W[perm]
        while t < 1.0:
            step = min(dt, 1.0 - t)
            z = lam0 + (t + step) * (lam - lam0)
            mu_new, Vn, Wn = self._eig(side, z)
            cost = np.abs(mu_old[:, None] - mu_new[None, :])
            r, c = linear_sum_assignment(cost)
            moved = float(np.max(cost[r, c]))
            if len(mu_old) > 1:
                d = np.abs(mu_old[:, None] - mu_old[None, :])
                sep = float(np.min(d[~np.eye(len(mu_old), dtype=bool)]))
            else:
                sep = np.inf
            if moved < 0.3 * sep:
                perm = np.empty_like(c)
                perm[r] = c
                mu_old = mu_new[perm]
                V, W = Vn[:, perm], Wn[perm]
                t += step
                dt = min(2 * step, 1.0)
            else:
                dt = step / 2
                if dt < 1e-10:
                    raise SplittingFailure(f"far-field eigenvalues collide near lambda = {z:.6g}")
        return _Track(lam, mu_old, sel), V, W

    def _initial(self, side, lam, start: Optional[_Track], gap_lemma: bool):
        ref, ref_track = self._ref[side]
        track, V, W = self._continue(side, start or ref_track, lam)
        sel = track.sel
        mu = track.mu
        if not gap_lemma:
            if np.min(np.abs(mu.real)) < self.split_tol:
                raise SplittingFailure(f"far-field eigenvalue within {self.split_tol:.0e} of the imaginary axis")
            want = mu.real > 0 if side < 0 else mu.real < 0
            if not np.array_equal(want, sel):
                raise SplittingFailure("consistent splitting fails at this lambda")
        else:
            rest = mu[~sel]
            if rest.size and sel.any():
                gap = float(np.min(np.abs(mu[sel][:, None] - rest[None, :])))
                if gap < self.split_tol:
                    raise SplittingFailure("selected and complementary far-field eigenvalues collide")
        r = pluecker(V[:, sel])
        l = pluecker_rows(W[sel])
        w0 = r * (l @ ref) / (l @ r)
        return w0, complex(np.sum(mu[sel])), track

    # -- integration

    def _integrate(self, side: int, W0: np.ndarray, lam: np.ndarray, mu: np.ndarray):
        """Carry the columns of W0 (C x m) from side*L to 0; returns values and log scales."""
        p = self.p if side < 0 else self.N - self.p
        Alam = self._Alam_c[side]
        C, m = W0.shape
        T, _, _ = _compound_tables(self.N, p)

        def rhs(x, y):
            Y = y.reshape(C, m)
            A0 = (T @ self.coefficient_matrix(x, 0.0).reshape(-1)).reshape(C, C)
            return (A0 @ Y + (Alam @ Y) * lam[None, :] - Y * mu[None, :]).reshape(-1)

        nchunk = max(1, int(math.ceil(self.L / self.chunk)))
        edges = np.linspace(side * self.L, 0.0, nchunk + 1)
        Y = W0.astype(complex)
        logs = np.zeros(m)
        kw = {"max_step": self.max_step} if self.max_step else {}
        for a, b in zip(edges[:-1], edges[1:]):
            sol = solve_ivp(rhs, (a, b), Y.reshape(-1), method="DOP853", rtol=self.rtol, atol=self.atol, **kw)
            if not sol.success:
                raise StiffnessFailure(f"Evans integration failed: {sol.message}")
            Y = sol.y[:, -1].reshape(C, m)
            s = np.linalg.norm(Y, axis=0)
            if np.any(~np.isfinite(s)) or np.any(s == 0):
                raise StiffnessFailure("Evans integration produced a degenerate subspace")
            Y = Y / s
            logs += np.log(s)
        return Y, logs

    def raw(self, lams: Sequence[complex], gap_lemma: bool = False,
            starts: Optional[Dict[int, List[Optional[_Track]]]] = None):
        """Unnormalized values at ``lams`` (continued in list order) and the tracks used."""
        lams = np.asarray(lams, dtype=complex).reshape(-1)
        m = lams.size
        init = {}
        tracks = {}
        for side in (-1, 1):
            Ws, mus, trs = [], [], []
            prev = None
            for j, lam in enumerate(lams):
                start = starts[side][j] if starts is not None else prev
                w0, mu, tr = self._initial(side, lam, start, gap_lemma)
                Ws.append(w0)
                mus.append(mu)
                trs.append(tr)
                prev = tr
            init[side] = (np.array(Ws).T, np.array(mus))
            tracks[side] = trs
        Ym, lm = self._integrate(-1, init[-1][0], lams, init[-1][1])
        Yp, lp = self._integrate(1, init[1][0], lams, init[1][1])
        vals = wedge(Ym, Yp, self.N, self.p)
        return vals, lm + lp, tracks

    @property
    def normalization(self) -> float:
        if self._norm is None:
            v, logs, _ = self.raw([self.lam_ref])
            self._norm = float(abs(v[0]) * np.exp(logs[0]))
        return self._norm

    def __call__(self, lams, gap_lemma: bool = False, starts=None):
        vals, logs, tracks = self.raw(lams, gap_lemma, starts)
        out = vals * np.exp(logs) / self.normalization
        return out, tracks

    def record(self, lam: complex, gap_lemma: bool = False) -> EvansRecord:
        vals, logs, _ = self.raw([lam], gap_lemma)
        raw = complex(vals[0] * np.exp(logs[0]))
        return EvansRecord(complex(lam), self.k, self.eps, raw / self.normalization, raw, float(logs[0]))


def evans_evaluate(model: ModelSystem, profile: Optional[ShockProfile], lam: complex, k: int,
                   eps: Optional[float] = None, gap_lemma: bool = False, **kw) -> EvansRecord:
    eps = profile.eps if eps is None else eps
    if profile is not None and "L" not in kw:
        kw["L"] = profile.grid.L
    return EvansFunction(model, eps, k, **kw).record(lam, gap_lemma)


def cauchy_riemann_defect(D: EvansFunction, lam: complex, h: float = 1e-4, gap_lemma: bool = False) -> float:
    """Relative mismatch of the real and imaginary direction difference quotients."""
    pts = [lam + h, lam - h, lam + 1j * h, lam - 1j * h]
    v, _ = D(pts, gap_lemma)
    dr = (v[0] - v[1]) / (2 * h)
    di = (v[2] - v[3]) / (2j * h)
    return float(abs(dr - di) / max(abs(dr), abs(di), 1e-300))


# --------------------------------------------------------------------------
# contours and root counting


def circle(center: complex, radius: float, n: int = 64) -> np.ndarray:
    t = 2 * np.pi * np.arange(n) / n
    return center + radius * np.exp(1j * t)


def rectangle(re0: float, re1: float, im0: float, im1: float, n_edge: int = 16) -> np.ndarray:
    """Counter-clockwise rectangle starting at the lower-right corner."""
    corners = [complex(re1, im0), complex(re1, im1), complex(re0, im1), complex(re0, im0)]
    pts = []
    for a, b in zip(corners, corners[1:] + corners[:1]):
        pts.extend(a + (b - a) * np.arange(n_edge) / n_edge)
    return np.array(pts)


def winding_about(points: np.ndarray, z: complex) -> int:
    d = np.asarray(points) - z
    dphi = np.angle(np.roll(d, -1) / d)
    return int(round(np.sum(dphi) / (2 * np.pi)))


def count_inside(values: Sequence[complex], contour: np.ndarray) -> int:
    return sum(winding_about(contour, z) for z in values)


@dataclass
class WindingResult:
    count: int
    points: np.ndarray
    values: np.ndarray
    refinements: int
    min_abs: float

    def to_dict(self):
        return {"count": self.count, "points": len(self.points), "refinements": self.refinements,
                "min_abs": self.min_abs}


def evans_winding(D: EvansFunction, contour: Sequence[complex], gap_lemma: bool = False,
                  max_turn: float = np.pi / 4, max_points: int = 4096, root_tol: float = 1e-8) -> WindingResult:
    pts = [complex(z) for z in contour]
    if len(pts) < 3:
        raise InvalidInput("contour needs at least three vertices")
    vals, tracks = D(pts, gap_lemma)
    vals = list(vals)
    trk = {s: list(tracks[s]) for s in (-1, 1)}
    rounds = 0
    while True:
        mags = np.abs(vals)
        if float(np.min(mags)) < root_tol * float(np.max(mags)):
            # refinement cannot resolve a zero sitting on the contour
            raise RootOnContour(f"|D| = {float(np.min(mags)):.2e} on the contour")
        npts = len(pts)
        turns = [abs(np.angle(vals[(j + 1) % npts] / vals[j])) for j in range(npts)]
        bad = [j for j in range(npts) if turns[j] >= max_turn]
        if not bad:
            break
        if npts + len(bad) > max_points:
            raise ContourTooCoarse(f"argument still turning by {max(turns):.2f} rad per segment at {npts} points")
        mids = [0.5 * (pts[j] + pts[(j + 1) % npts]) for j in bad]
        starts = {s: [trk[s][j] for j in bad] for s in (-1, 1)}
        new_vals, new_tracks = D(mids, gap_lemma, starts)
        for offset, (j, z) in enumerate(zip(bad, mids)):
            pos = j + 1 + offset
            pts.insert(pos, z)
            vals.insert(pos, new_vals[offset])
            for s in (-1, 1):
                trk[s].insert(pos, new_tracks[s][offset])
        rounds += 1
    vals = np.array(vals)
    amax = float(np.max(np.abs(vals)))
    amin = float(np.min(np.abs(vals)))
    total = float(np.sum(np.angle(np.roll(vals, -1) / vals)))
    count = int(round(total / (2 * np.pi)))
    if abs(total / (2 * np.pi) - count) > 1e-3:
        raise ContourTooCoarse("argument increment is not an integer multiple of 2 pi")
    return WindingResult(count, np.array(pts), vals, rounds, amin / amax)


def evans_root_count(model: ModelSystem, profile: Optional[ShockProfile], contour: Sequence[complex], k: int,
                     eps: Optional[float] = None, gap_lemma: bool = False, **kw) -> int:
    eps = profile.eps if eps is None else eps
    if profile is not None and "L" not in kw:
        kw["L"] = profile.grid.L
    return evans_winding(EvansFunction(model, eps, k, **kw), contour, gap_lemma).count


def evans_roots_in_disk(D: EvansFunction, center: complex, radius: float, n: int = 64,
                        gap_lemma: bool = False) -> np.ndarray:
    """Zeros of D inside a disk from its Taylor coefficients on the boundary circle."""
    z = circle(center, radius, n)
    vals, _ = D(z, gap_lemma)
    c = np.fft.fft(vals) / n  # coefficients of D in powers of (lambda - center) / radius
    deg = int(np.max(np.nonzero(np.abs(c[: n // 2]) > 1e-13 * np.max(np.abs(c)))[0]))
    roots = np.roots(c[: deg + 1][::-1]) if deg > 0 else np.array([])
    roots = roots[np.abs(roots) < 0.9]
    return center + radius * roots


# --------------------------------------------------------------------------
# crossing detection and eigendata


def _leading(model, profile, k) -> Tuple[complex, np.ndarray, np.ndarray]:
    """Rightmost eigenvalue with Im >= 0, its eigenvector and the matrix."""
    A = assemble_Lk(model, profile, k).dense()
    vals, vecs = np.linalg.eig(A)
    top = np.max(vals.real)
    cand = [i for i in range(len(vals)) if vals[i].real > top - 1e-9 * max(1, abs(top))]
    i = max(cand, key=lambda j: vals[j].imag)
    return complex(vals[i]), vecs[:, i], A


def growth_rate(model: ModelSystem, grid: DiscretizationGrid, eps: float, k: int) -> float:
    return max(np.linalg.eigvals(assemble_Lk(model, make_profile(model, eps, grid), k).dense()).real)


@dataclass
class EigenBundle:
    eps0: float
    k_star: int
    lam_plus: complex
    omega0: float
    gamma0: float
    gamma_prime0: float
    w: np.ndarray
    Sw: np.ndarray
    w_adj: np.ndarray
    Sw_adj: np.ndarray
    grid: DiscretizationGrid
    model: ModelSystem
    profile: ShockProfile
    biorthogonality: Dict[str, float] = field(default_factory=dict)
    multiplicity: int = 0
    gram_singular_values: List[float] = field(default_factory=list)

    @property
    def T_star(self) -> float:
        return 2 * self.k_star * np.pi / self.omega0

    def to_dict(self) -> dict:
        return {
            "eps0": self.eps0,
            "k_star": self.k_star,
            "lambda_plus": [self.lam_plus.real, self.lam_plus.imag],
            "omega0": self.omega0,
            "gamma0": self.gamma0,
            "gamma_prime0": self.gamma_prime0,
            "T_star": self.T_star,
            "biorthogonality": self.biorthogonality,
            "multiplicity": self.multiplicity,
            "gram_singular_values": self.gram_singular_values,
        }


def _normalize_phase(v: np.ndarray) -> np.ndarray:
    j = int(np.argmax(np.abs(v)))
    return v * np.exp(-1j * np.angle(v.reshape(-1)[j]))


def crossing_multiplicity(model: ModelSystem, profile: ShockProfile, k: int, lam: complex,
                          tol: float = 1e-6, seed: int = 0) -> Tuple[int, List[float]]:
    """Dimension of the lam-eigenspace over the complex modes k and -k.

    Candidates are eigenvectors with eigenvalue within ``tol`` of lam from
    the dense solver plus inverse-iteration vectors from random starts,
    embedded as fields on the two modes; the dimension is the number of
    Gram singular values above 1e-6 times the largest.
    """
    rng = np.random.default_rng(seed)
    h = profile.grid.h
    m = assemble_Lk(model, profile, k).size
    cands = []
    for slot, kk in enumerate((k, -k)):
        A = assemble_Lk(model, profile, kk).dense()
        vals, vecs = np.linalg.eig(A)
        near = np.nonzero(np.abs(vals - lam) < tol * max(1.0, abs(lam)))[0]
        blocks = [vecs[:, i] for i in near]
        shift = lam + 1e-9
        lu = sla.lu_factor(A - shift * np.eye(m))
        for _ in range(2):
            v = rng.normal(size=m) + 1j * rng.normal(size=m)
            for _ in range(4):
                v = sla.lu_solve(lu, v)
                v /= np.linalg.norm(v)
            blocks.append(v)
        for v in blocks:
            e = np.zeros(2 * m, dtype=complex)
            e[slot * m:(slot + 1) * m] = v / np.linalg.norm(v)
            cands.append(e)
    X = np.array(cands).T * math.sqrt(2 * np.pi * h)
    G = X.conj().T @ X
    s = np.linalg.svd(G, compute_uv=False)
    dim = int(np.sum(s > 1e-6 * s[0]))
    return dim, [float(x) for x in s[:4]]


def _x2_pairing(f: np.ndarray, kf: int, g: np.ndarray, kg: int, h: float, N2: int) -> complex:
    """<f e^{i kf x2}, g e^{i kg x2}> by quadrature over the N2 collocation points in x2."""
    x2 = 2 * np.pi * np.arange(N2) / N2 - np.pi
    phase = np.sum(np.exp(1j * (kf - kg) * x2)) * (2 * np.pi / N2)
    return complex(h * np.vdot(g, f) * phase)


def eigendata(model: ModelSystem, grid: DiscretizationGrid, eps: float, k_star: int,
              eps0: Optional[float] = None, gamma_prime: Optional[float] = None) -> EigenBundle:
    """Critical eigenpair, adjoint and reflected companions of L_{k*} at ``eps``."""
    profile = make_profile(model, eps, grid)
    lam, v, A = _leading(model, profile, k_star)
    n, h = model.n, grid.h
    M = model.M
    w = _normalize_phase(full(v, n))
    w = w / math.sqrt(2 * np.pi * h * np.vdot(w, w).real)
    vals, vecs = np.linalg.eig(A.conj().T)
    i = int(np.argmin(np.abs(vals - np.conj(lam))))
    wa = full(vecs[:, i], n)
    # stored-mode biorthonormalization of {w, M conj w} against {wa, M conj wa}
    R = np.stack([w.reshape(-1), (M @ np.conj(w)).reshape(-1)], axis=1)
    Lft = np.stack([wa.reshape(-1), (M @ np.conj(wa)).reshape(-1)], axis=1)
    G = 2 * np.pi * h * (Lft.conj().T @ R)
    Lft = Lft @ np.linalg.inv(G).conj().T
    wa = Lft[:, 0].reshape(n, -1)
    partner_defect = float(np.max(np.abs(Lft[:, 1].reshape(n, -1) - M @ np.conj(wa))))
    Sw = M @ w
    Swa = M @ wa
    bio = {
        "w_wadj_minus_1": abs(mode_pairing(w, wa, h) - 1),
        "Sw_wadj": abs(_x2_pairing(Sw, -k_star, wa, k_star, h, grid.N2)),
        "w_Swadj": abs(_x2_pairing(w, k_star, Swa, -k_star, h, grid.N2)),
        "conj_partner_wadj": abs(mode_pairing(M @ np.conj(w), wa, h)),
        "adjoint_partner_defect": partner_defect,
        "adjoint_residual": float(np.linalg.norm(A.conj().T @ interior(wa) - np.conj(lam) * interior(wa))
                                  / np.linalg.norm(interior(wa))),
    }
    bundle = EigenBundle(
        eps0=float(eps if eps0 is None else eps0), k_star=int(k_star), lam_plus=lam,
        omega0=float(lam.imag), gamma0=float(lam.real),
        gamma_prime0=float(gamma_prime) if gamma_prime is not None else float("nan"),
        w=w, Sw=Sw, w_adj=wa, Sw_adj=Swa, grid=grid, model=model, profile=profile,
        biorthogonality=bio,
    )
    return bundle


def find_crossing(model: ModelSystem, grid: DiscretizationGrid, eps_interval: Tuple[float, float],
                  tol: float = 1e-10, d_eps: float = 1e-4, max_iter: int = 100) -> EigenBundle:
    lo, hi = map(float, eps_interval)
    if not lo < hi:
        raise InvalidInput("eps interval must have lo < hi")
    g_lo = {k: growth_rate(model, grid, lo, k) for k in range(1, grid.K + 1)}
    g_hi = {k: growth_rate(model, grid, hi, k) for k in range(1, grid.K + 1)}
    crossing = [k for k in g_lo if np.sign(g_lo[k]) != np.sign(g_hi[k])]
    if not crossing:
        raise NoCrossing(f"no mode in 1..{grid.K} changes stability on [{lo}, {hi}]")
    if len(crossing) > 1:
        raise MultiplicityAnomaly(f"several modes cross: {crossing}")
    k = crossing[0]
    f = lambda e: growth_rate(model, grid, e, k)
    # bracketed secant (Illinois variant)
    a, b, fa, fb = lo, hi, g_lo[k], g_hi[k]
    side = 0
    e0, f0 = a, fa
    for _ in range(max_iter):
        e0 = (a * fb - b * fa) / (fb - fa)
        f0 = f(e0)
        if abs(f0) <= tol:
            break
        if np.sign(f0) == np.sign(fb):
            b, fb = e0, f0
            if side == -1:
                fa /= 2
            side = -1
        else:
            a, fa = e0, f0
            if side == 1:
                fb /= 2
            side = 1
    if abs(f0) > tol:
        raise NoCrossing(f"secant did not reach |gamma| <= {tol:.0e} (got {f0:.2e})")
    gp = (f(e0 + d_eps) - f(e0 - d_eps)) / (2 * d_eps)
    bundle = eigendata(model, grid, e0, k, gamma_prime=gp)
    dim, sv = crossing_multiplicity(model, bundle.profile, k, bundle.lam_plus)
    bundle.multiplicity = dim
    bundle.gram_singular_values = sv
    return bundle


# --------------------------------------------------------------------------
# projections


ModeDict = Dict[int, np.ndarray]


class Projections:
    """Spectral projections onto the critical eigenspace.

    Complex fields are dicts {mode: (n, N1) profile}; real fields are
    ChannelFields.  Pi_+ u = <u, w~> w e^{i k x2} + <u, S w~> M w e^{-i k x2}
    and Pi_- is its complex conjugate.
    """

    def __init__(self, bundle: EigenBundle):
        self.bundle = bundle
        self.k = bundle.k_star
        self.h = bundle.grid.h
        self.M = bundle.model.M
        self.n = bundle.model.n

    # complex-field versions

    def plus(self, f: ModeDict) -> ModeDict:
        b, k, h = self.bundle, self.k, self.h
        z = np.zeros_like(b.w)
        a1 = mode_pairing(f.get(k, z), b.w_adj, h)
        a2 = mode_pairing(f.get(-k, z), b.Sw_adj, h)
        return {k: a1 * b.w, -k: a2 * b.Sw}

    def minus(self, f: ModeDict) -> ModeDict:
        fc = {-m: np.conj(v) for m, v in f.items()}
        return {-m: np.conj(v) for m, v in self.plus(fc).items()}

    # real-field versions

    def coords(self, u: ChannelField) -> Tuple[complex, complex]:
        b, k, h = self.bundle, self.k, self.h
        uk = u.coeffs[k]
        a1 = mode_pairing(uk, b.w_adj, h)
        a2 = mode_pairing(np.conj(uk), b.Sw_adj, h)
        return complex(a1), complex(a2)

    def embed(self, a1: complex, a2: complex, grid: Optional[DiscretizationGrid] = None) -> ChannelField:
        b = self.bundle
        grid = grid or b.grid
        f = ChannelField.zeros(grid, self.n)
        f.coeffs[self.k] = a1 * b.w + np.conj(a2) * (self.M @ np.conj(b.w))
        return f

    def center(self, u: ChannelField) -> ChannelField:
        return self.embed(*self.coords(u), grid=u.grid)

    def complement(self, u: ChannelField) -> ChannelField:
        return u - self.center(u)

    def complement_coeffs(self, c: np.ndarray) -> np.ndarray:
        """Complement projection on a raw coefficient array (K+1, n, N1)."""
        b, k, h = self.bundle, self.k, self.h
        out = c.copy()
        uk = c[k]
        a1 = mode_pairing(uk, b.w_adj, h)
        a2 = mode_pairing(np.conj(uk), b.Sw_adj, h)
        out[k] = uk - (a1 * b.w + np.conj(a2) * (self.M @ np.conj(b.w)))
        return out


def compute_projections(bundle: EigenBundle) -> Projections:
    return Projections(bundle)


def apply_L_modes(model: ModelSystem, profile: ShockProfile, f: ModeDict, parts=None) -> ModeDict:
    L0, J, Bk = parts or linear_operator_parts(model, profile)
    n = model.n
    return {k: full((L0 + 1j * k * J - k ** 2 * Bk) @ interior(v), n) for k, v in f.items()}


def apply_L(model: ModelSystem, profile: ShockProfile, u: ChannelField, parts=None) -> ChannelField:
    L0, J, Bk = parts or linear_operator_parts(model, profile)
    out = ChannelField.zeros(u.grid, u.n)
    for k in range(u.grid.K + 1):
        out.coeffs[k] = full((L0 + 1j * k * J - k ** 2 * Bk) @ interior(u.coeffs[k]), u.n)
    out.coeffs[0] = out.coeffs[0].real
    return out


def _dict_norm(f: ModeDict, h: float) -> float:
    return math.sqrt(sum(2 * np.pi * h * np.vdot(v, v).real for v in f.values()))


def _dict_sub(f: ModeDict, g: ModeDict) -> ModeDict:
    keys = set(f) | set(g)
    out = {}
    for k in keys:
        a = f.get(k)
        b = g.get(k)
        out[k] = (a if a is not None else 0) - (b if b is not None else 0)
    return out


def random_mode_dict(grid: DiscretizationGrid, n: int, modes: Sequence[int], rng) -> ModeDict:
    x = grid.x
    env = np.exp(-(x / 3.0) ** 2)
    out = {}
    for k in modes:
        v = (rng.normal(size=(n, 1)) + 1j * rng.normal(size=(n, 1))) * env * np.cos(rng.uniform(0.2, 1.0) * x + rng.uniform(0, 6))
        v[:, [0, -1]] = 0
        out[k] = v
    return out


def projection_diagnostics(bundle: EigenBundle, nfields: int = 20, seed: int = 0) -> Dict[str, float]:
    """Idempotency and commutation residuals of Pi_+ on random complex fields."""
    P = Projections(bundle)
    rng = np.random.default_rng(seed)
    k, h = bundle.k_star, bundle.grid.h
    parts = linear_operator_parts(bundle.model, bundle.profile)
    idem, comm, rep = 0.0, 0.0, 0.0
    for _ in range(nfields):
        f = random_mode_dict(bundle.grid, bundle.model.n, [k, -k, 0], rng)
        scale = _dict_norm(f, h)
        pf = P.plus(f)
        idem = max(idem, _dict_norm(_dict_sub(P.plus(pf), pf), h) / scale)
        lhs = P.plus(apply_L_modes(bundle.model, bundle.profile, f, parts))
        rhs = apply_L_modes(bundle.model, bundle.profile, pf, parts)
        comm = max(comm, _dict_norm(_dict_sub(lhs, rhs), h) / scale)
    eig = {k: bundle.w}
    rep = _dict_norm(_dict_sub(P.plus(eig), eig), h) / _dict_norm(eig, h)
    zero_mode = P.plus(random_mode_dict(bundle.grid, bundle.model.n, [0], rng))
    leak = max(float(np.max(np.abs(v))) for v in zero_mode.values())
    pm = P.minus({k: bundle.w, -k: bundle.Sw})
    minus_leak = _dict_norm(pm, h)
    return {"idempotency": idem, "commutation": comm, "eigenvector_reproduction": rep,
            "zero_mode_image": leak, "minus_on_plus": minus_leak}


# --------------------------------------------------------------------------
# symmetry checks


@dataclass
class EquivarianceReport:
    residuals: Dict[str, float]
    tol: float

    @property
    def failures(self) -> List[str]:
        return [k for k, v in self.residuals.items() if not v <= self.tol]

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self):
        return {"residuals": self.residuals, "tol": self.tol, "ok": self.ok, "failures": self.failures}


def _generator(u: ChannelField) -> ChannelField:
    k = np.arange(u.grid.K + 1)[:, None, None]
    return ChannelField(1j * k * u.coeffs, u.grid)


def verify_equivariance(model: ModelSystem, profile: ShockProfile, grid: Optional[DiscretizationGrid] = None,
                        theta: float = 1.234, bundle: Optional[EigenBundle] = None, nfields: int = 5,
                        seed: int = 0, tol: float = 1e-8) -> EquivarianceReport:
    grid = grid or profile.grid
    rng = np.random.default_rng(seed)
    parts = linear_operator_parts(model, profile)
    M = model.M
    res = {"L_R": 0.0, "L_S": 0.0, "generator_antisymmetry": 0.0, "GS_plus_SG": 0.0,
           "L_G": 0.0, "S_squared": 0.0, "RS_relation": 0.0}
    for _ in range(nfields):
        u = random_field(grid, model.n, rng)
        v = random_field(grid, model.n, rng)
        scale = u.norm()
        Lu = apply_L(model, profile, u, parts)
        lscale = max(Lu.norm(), scale)
        res["L_R"] = max(res["L_R"], (apply_L(model, profile, u.rotate(theta), parts) - Lu.rotate(theta)).norm() / lscale)
        res["L_S"] = max(res["L_S"], (apply_L(model, profile, u.reflect(M), parts) - Lu.reflect(M)).norm() / lscale)
        Gu, Gv = _generator(u), _generator(v)
        res["generator_antisymmetry"] = max(res["generator_antisymmetry"],
                                            abs(Gu.inner(v) + u.inner(Gv)) / (scale * v.norm()))
        res["GS_plus_SG"] = max(res["GS_plus_SG"], (_generator(u.reflect(M)) + Gu.reflect(M)).norm() / scale)
        res["L_G"] = max(res["L_G"], (apply_L(model, profile, Gu, parts) - _generator(Lu)).norm() / max(_generator(Lu).norm(), 1.0))
        res["S_squared"] = max(res["S_squared"], (u.reflect(M).reflect(M) - u).norm() / scale)
        res["RS_relation"] = max(res["RS_relation"], (u.reflect(M).rotate(theta) - u.rotate(-theta).reflect(M)).norm() / scale)
    if bundle is not None:
        P = Projections(bundle)
        f = P.embed(1.0, 0.0, grid)
        a1, a2 = P.coords(f.rotate(theta))
        res["phase_action"] = abs(a1 - np.exp(1j * bundle.k_star * theta)) + abs(a2)
    return EquivarianceReport(res, tol)
