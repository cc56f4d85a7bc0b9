"""Channel PDE engine on R x [-pi, pi]: model systems, profiles, time stepping.

Fields are stored as x2-Fourier coefficients v_k(x1) for 0 <= k <= K with the
reality convention v_{-k} = conj(v_k).  In x1 a uniform grid on [-L, L] with
homogeneous Dirichlet closure for perturbations is used; interior operators
act on the N1 - 2 inner nodes in component-major order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from .errors import BlowUp, InvalidInput, NoProfile, StepRejected, WeightOverflow

# --------------------------------------------------------------------------
# grid and fields


@dataclass(frozen=True)
class DiscretizationGrid:
    L: float
    N1: int
    K: int
    dt: float

    def __post_init__(self):
        if not (self.L > 0 and np.isfinite(self.L)):
            raise InvalidInput("L must be positive")
        if int(self.N1) != self.N1 or self.N1 < 64:
            raise InvalidInput("N1 must be an integer >= 64")
        if int(self.K) != self.K or self.K < 4:
            raise InvalidInput("K must be an integer >= 4")
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise InvalidInput("dt must be positive")
        object.__setattr__(self, "N1", int(self.N1))
        object.__setattr__(self, "K", int(self.K))

    @property
    def h(self) -> float:
        return 2 * self.L / (self.N1 - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.N1)

    @property
    def x_inner(self) -> np.ndarray:
        return self.x[1:-1]

    @property
    def N2(self) -> int:
        # enough x2 points that cubic products of modes <= K do not alias
        return 4 * self.K + 2

    @property
    def x2(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.N2) / self.N2 - np.pi

    @property
    def modes(self) -> np.ndarray:
        return np.arange(self.K + 1)

    def to_dict(self) -> dict:
        return {"L": self.L, "N1": self.N1, "K": self.K, "dt": self.dt}


def to_physical(coeffs: np.ndarray, N2: int) -> np.ndarray:
    """(K+1, n, N1) coefficients -> (n, N1, N2) real samples at x2 = -pi + 2 pi m / N2."""
    K = coeffs.shape[0] - 1
    half = np.zeros((N2 // 2 + 1,) + coeffs.shape[1:], dtype=complex)
    half[: K + 1] = coeffs
    # sample grid starts at -pi: shift phases by e^{-i k pi}
    half[: K + 1] *= ((-1.0) ** np.arange(K + 1))[:, None, None]
    u = np.fft.irfft(half, n=N2, axis=0, norm="forward")
    return np.moveaxis(u, 0, -1)


def to_fourier(u: np.ndarray, K: int) -> np.ndarray:
    N2 = u.shape[-1]
    c = np.fft.rfft(np.moveaxis(u, -1, 0), axis=0, norm="forward")[: K + 1]
    c *= ((-1.0) ** np.arange(K + 1))[:, None, None]
    c[0] = c[0].real
    return c


@dataclass
class ChannelField:
    """Real n-component field on the channel in x2-Fourier form."""

    coeffs: np.ndarray
    grid: DiscretizationGrid

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=complex)
        K1, n, N1 = self.coeffs.shape
        if K1 != self.grid.K + 1 or N1 != self.grid.N1:
            raise InvalidInput("coefficient array does not match the grid")

    @classmethod
    def zeros(cls, grid: DiscretizationGrid, n: int) -> "ChannelField":
        return cls(np.zeros((grid.K + 1, n, grid.N1), dtype=complex), grid)

    @classmethod
    def from_physical(cls, u: np.ndarray, grid: DiscretizationGrid) -> "ChannelField":
        return cls(to_fourier(np.asarray(u, dtype=float), grid.K), grid)

    @classmethod
    def from_mode(cls, grid: DiscretizationGrid, k: int, profile: np.ndarray) -> "ChannelField":
        """Real field profile(x1) e^{i k x2} + c.c. (just profile(x1) when k = 0)."""
        profile = np.atleast_2d(profile)
        f = cls.zeros(grid, profile.shape[0])
        f.coeffs[k] = profile if k else profile.real
        return f

    @property
    def n(self) -> int:
        return self.coeffs.shape[1]

    def to_physical(self) -> np.ndarray:
        return to_physical(self.coeffs, self.grid.N2)

    def copy(self) -> "ChannelField":
        return ChannelField(self.coeffs.copy(), self.grid)

    def __add__(self, other):
        return ChannelField(self.coeffs + other.coeffs, self.grid)

    def __sub__(self, other):
        return ChannelField(self.coeffs - other.coeffs, self.grid)

    def __mul__(self, s):
        return ChannelField(self.coeffs * s, self.grid)

    __rmul__ = __mul__

    def __neg__(self):
        return ChannelField(-self.coeffs, self.grid)

    def reality_defect(self) -> float:
        return float(np.max(np.abs(self.coeffs[0].imag), initial=0.0))

    def boundary_defect(self) -> float:
        return float(np.max(np.abs(self.coeffs[:, :, [0, -1]]), initial=0.0))

    def inner(self, other: "ChannelField") -> float:
        return field_inner(self.coeffs, other.coeffs, self.grid.h)

    def norm(self) -> float:
        return math.sqrt(max(self.inner(self), 0.0))

    def rotate(self, theta: float) -> "ChannelField":
        return ChannelField(rotate_coeffs(self.coeffs, theta), self.grid)

    def reflect(self, M: np.ndarray) -> "ChannelField":
        return ChannelField(reflect_coeffs(self.coeffs, M), self.grid)


def random_field(grid: DiscretizationGrid, n: int, rng: np.random.Generator,
                 amplitude: float = 1.0, kmax: Optional[int] = None, width: float = 3.0) -> ChannelField:
    """Smooth random real field: Gaussian-enveloped random combinations of
    a few sinusoids in x1 on modes 0..kmax, zero at the boundary nodes."""
    kmax = grid.K if kmax is None else min(kmax, grid.K)
    x = grid.x
    env = np.exp(-(x / width) ** 2)
    c = np.zeros((grid.K + 1, n, grid.N1), dtype=complex)
    for k in range(kmax + 1):
        a = rng.normal(size=(n, 3)) + 1j * rng.normal(size=(n, 3))
        if k == 0:
            a = a.real
        basis = np.stack([np.ones_like(x), np.sin(x), np.cos(0.7 * x)])
        c[k] = (a @ basis) * env / (1 + k) ** 2
    c[:, :, 0] = 0
    c[:, :, -1] = 0
    c *= amplitude / max(np.max(np.abs(c)), 1e-300)
    return ChannelField(c, grid)


def field_inner(u: np.ndarray, v: np.ndarray, h: float) -> float:
    """<u, v> = 2 pi h sum_j sum_{|k| <= K} u_k . conj(v_k) for real fields."""
    s = np.vdot(v[0], u[0]).real + 2.0 * np.vdot(v[1:], u[1:]).real
    return float(2 * np.pi * h * s)


def mode_pairing(f: np.ndarray, g: np.ndarray, h: float) -> complex:
    """Pairing of complex fields f e^{i k x2} and g e^{i k x2}: 2 pi h sum f . conj(g)."""
    return complex(2 * np.pi * h * np.vdot(g, f))


def rotate_coeffs(c: np.ndarray, theta: float) -> np.ndarray:
    """R(theta): v(x2) -> v(x2 + theta), i.e. mode k times e^{i k theta}."""
    k = np.arange(c.shape[0])
    return c * np.exp(1j * k * theta)[:, None, None]


def reflect_coeffs(c: np.ndarray, M: np.ndarray) -> np.ndarray:
    """S: v(x2) -> M v(-x2); stored mode k becomes M conj(v_k)."""
    return np.einsum("ab,kbj->kaj", M, np.conj(c))


# --------------------------------------------------------------------------
# models


class ModelSystem:
    """Hyperbolic-parabolic system u_t = sum d_j(B^{jk} d_k u) - sum d_j F^j(u) + g(x1, u).

    The viscosity matrices are constant and only their lower-right r x r
    block is nonzero; the first n - r components are hyperbolic.
    """

    id: str = "abstract"
    n: int = 0
    r: int = 0
    eps_range: Tuple[float, float] = (-1.0, 1.0)
    shock_component: Optional[int] = None

    # per-component x1 flux differencing: 0 central, +1 upwind from the left
    upwind: Tuple[int, ...] = ()

    B11: np.ndarray
    B12: np.ndarray
    B21: np.ndarray
    B22: np.ndarray
    M: np.ndarray
    A0: np.ndarray

    def flux1(self, eps, u):
        raise NotImplementedError

    def flux2(self, eps, u):
        return np.zeros_like(u)

    def dflux1(self, eps, u):
        raise NotImplementedError

    def dflux2(self, eps, u):
        return np.zeros((self.n, self.n) + u.shape[1:])

    def source(self, eps, x, u):
        return np.zeros_like(u)

    def dsource(self, eps, x, u):
        return np.zeros((self.n, self.n) + u.shape[1:])

    def endstates(self, eps) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def profile_width(self) -> float:
        return 1.0

    def is_linear(self) -> bool:
        return False

    def check_eps(self, eps):
        lo, hi = self.eps_range
        if not (lo < eps < hi):
            raise InvalidInput(f"eps={eps} outside the model range {self.eps_range}")

    def params(self) -> dict:
        return {}


@dataclass
class M1Params:
    c1: float = 1.0
    c2: float = 0.5
    c3: float = 0.4
    b: float = 1.0
    u1_minus: float = 0.0


class M1Model(ModelSystem):
    """Quasilinear transport testbed, n = 2, r = 1:

        u1_t = -d1 (c1 u1 + c2 u2)
        u2_t = b (d11 + d22) u2 - d1 (u2^2/2 + (c3 + eps) u1)

    With beta = c2 c3 / c1 the endstates u2 = beta -/+ 1 give a Lax shock
    whose parabolic component is beta - tanh(x1 / 2b) at eps = 0.
    """

    id = "M1_quasilinear_transport"
    n = 2
    r = 1
    eps_range = (-0.1, 0.1)
    shock_component = 1
    upwind = (1, 0)

    def __init__(self, params: Optional[M1Params] = None):
        self.p = params or M1Params()
        p = self.p
        if p.b <= 0 or p.c1 <= 0 or p.c2 <= 0 or p.c3 <= 0:
            raise InvalidInput("M1 needs positive c1, c2, c3 and b")
        z = np.zeros((2, 2))
        self.B11 = np.diag([0.0, p.b])
        self.B22 = np.diag([0.0, p.b])
        self.B12 = z.copy()
        self.B21 = z.copy()
        self.M = np.eye(2)
        self.A0 = np.diag([p.c3, p.c2])

    def params(self):
        return dict(vars(self.p))

    def c3(self, eps):
        return self.p.c3 + eps

    def beta(self, eps):
        return self.p.c2 * self.c3(eps) / self.p.c1

    def flux1(self, eps, u):
        p = self.p
        return np.stack([p.c1 * u[0] + p.c2 * u[1], 0.5 * u[1] ** 2 + self.c3(eps) * u[0]])

    def dflux1(self, eps, u):
        p = self.p
        one = np.ones_like(u[0])
        return np.array([[p.c1 * one, p.c2 * one], [self.c3(eps) * one, u[1]]])

    def endstates(self, eps):
        p = self.p
        beta = self.beta(eps)
        u2m, u2p = beta + 1.0, beta - 1.0
        u1m = p.u1_minus
        u1p = u1m + p.c2 * (u2m - u2p) / p.c1
        return np.array([u1m, u2m]), np.array([u1p, u2p])

    def profile_width(self):
        return 2 * self.p.b


@dataclass
class M0Params:
    d_p: float = 0.2
    d_q: float = 2.0
    a: float = 0.2
    beta: float = 2.0
    gamma: float = 1.5
    delta: float = 1.0
    delta_q: float = 1.0
    ell: float = 1.5
    nu: float = 1.0
    alpha: float = 0.9
    eta1: complex = 0.5 + 0.2j
    eta2: complex = 0.3 - 0.4j
    eta3: float = 0.6
    c: complex = 1.0 + 0.5j


class M0Model(ModelSystem):
    """Semilinear bifurcation testbed, n = r = 4, u = (Re p, Im p, Re q, Im q):

        p_t = d_p Lap p - a d1 p + [phi (alpha + eps) - (1 - phi) delta + i nu] p - phi beta q
              + phi (eta1 conj(p)^2 + eta2 p q - c |p|^2 p)
        q_t = d_q Lap q - a d1 q + phi gamma p + (i nu - delta_q) q + phi eta3 |p|^2

    with phi = sech^2(x1 / ell).  The linear part is a real operator plus
    i nu, so an activator gain alpha at which the real part of the leading
    k = 1 eigenvalue vanishes gives a crossing pair nu-rotating with
    frequency exactly nu.  The state u = 0 plays the role of the profile.
    """

    id = "M0_designed_semilinear"
    n = 4
    r = 4
    eps_range = (-0.5, 0.5)
    shock_component = None
    upwind = (0, 0, 0, 0)

    def __init__(self, params: Optional[M0Params] = None, linear: bool = False):
        self.p = params or M0Params()
        self.linear = linear
        p = self.p
        if p.d_p <= 0 or p.d_q <= 0 or p.ell <= 0:
            raise InvalidInput("M0 needs positive diffusivities and width")
        d = np.diag([p.d_p, p.d_p, p.d_q, p.d_q])
        self.B11 = d
        self.B22 = d.copy()
        self.B12 = np.zeros((4, 4))
        self.B21 = np.zeros((4, 4))
        self.M = np.eye(4)
        self.A0 = np.eye(4)

    def params(self):
        out = {}
        for k, v in vars(self.p).items():
            out[k] = [v.real, v.imag] if isinstance(v, complex) else v
        out["linear"] = self.linear
        return out

    def is_linear(self):
        return self.linear

    def phi(self, x):
        return 1.0 / np.cosh(x / self.p.ell) ** 2

    def flux1(self, eps, u):
        return self.p.a * u

    def dflux1(self, eps, u):
        return self.p.a * np.eye(4).reshape(4, 4, *([1] * (u.ndim - 1))) * np.ones_like(u[0])

    def _linear_coeffs(self, eps, x):
        p = self.p
        ph = self.phi(x)
        g_pp = ph * (p.alpha + eps) - (1 - ph) * p.delta
        return ph, g_pp

    def source(self, eps, x, u):
        p = self.p
        x = np.asarray(x).reshape(x.shape + (1,) * (u.ndim - 1 - np.ndim(x)))
        ph, gpp = self._linear_coeffs(eps, x)
        P = u[0] + 1j * u[1]
        Q = u[2] + 1j * u[3]
        fp = (gpp + 1j * p.nu) * P - ph * p.beta * Q
        fq = ph * p.gamma * P + (1j * p.nu - p.delta_q) * Q
        if not self.linear:
            fp = fp + ph * (p.eta1 * np.conj(P) ** 2 + p.eta2 * P * Q - p.c * np.abs(P) ** 2 * P)
            fq = fq + ph * p.eta3 * np.abs(P) ** 2
        return np.stack([fp.real, fp.imag, fq.real, fq.imag])

    def dsource(self, eps, x, u):
        p = self.p
        x = np.asarray(x).reshape(x.shape + (1,) * (u.ndim - 1 - np.ndim(x)))
        ph, gpp = self._linear_coeffs(eps, x)
        P = u[0] + 1j * u[1]
        Q = u[2] + 1j * u[3]
        zero = np.zeros_like(P)
        # Wirtinger derivatives (d/dP, d/dconj P) of each complex right-hand side
        fp_P = gpp + 1j * p.nu + zero
        fp_Pb = zero.copy()
        fp_Q = -ph * p.beta + zero
        fp_Qb = zero.copy()
        fq_P = ph * p.gamma + zero
        fq_Pb = zero.copy()
        fq_Q = 1j * p.nu - p.delta_q + zero
        fq_Qb = zero.copy()
        if not self.linear:
            fp_P = fp_P + ph * (p.eta2 * Q - 2 * p.c * np.abs(P) ** 2)
            fp_Pb = fp_Pb + ph * (2 * p.eta1 * np.conj(P) - p.c * P ** 2)
            fp_Q = fp_Q + ph * p.eta2 * P
            fq_P = fq_P + ph * p.eta3 * np.conj(P)
            fq_Pb = fq_Pb + ph * p.eta3 * P

        def real_block(dz, dzb):
            # columns d/d(Re z), d/d(Im z); rows Re f, Im f
            dre = dz + dzb
            dim = 1j * (dz - dzb)
            return np.array([[dre.real, dim.real], [dre.imag, dim.imag]])

        J = np.zeros((4, 4) + P.shape)
        J[0:2, 0:2] = real_block(fp_P, fp_Pb)
        J[0:2, 2:4] = real_block(fp_Q, fp_Qb)
        J[2:4, 0:2] = real_block(fq_P, fq_Pb)
        J[2:4, 2:4] = real_block(fq_Q, fq_Qb)
        return J

    def endstates(self, eps):
        z = np.zeros(4)
        return z, z.copy()


def build_model(model_id: str, params: Optional[dict] = None) -> ModelSystem:
    params = dict(params or {})
    if model_id in ("M1", M1Model.id):
        return M1Model(M1Params(**params))
    if model_id in ("M0", M0Model.id):
        linear = bool(params.pop("linear", False))
        for key in ("eta1", "eta2", "c"):
            if key in params and isinstance(params[key], (list, tuple)):
                params[key] = complex(*params[key])
        return M0Model(M0Params(**params), linear=linear)
    raise InvalidInput(f"unknown model id {model_id!r}")


# --------------------------------------------------------------------------
# structural checks


@dataclass
class StructureReport:
    block_form: bool
    hyperbolic_flux_linear: bool
    ellipticity_theta: float
    reflection_residual: float
    endstate_eigenvalues: List[List[float]]
    samples: int

    @property
    def ok(self) -> bool:
        return (self.block_form and self.hyperbolic_flux_linear and self.ellipticity_theta > 0
                and self.reflection_residual <= 1e-12)

    def to_dict(self):
        return {**vars(self), "ok": self.ok}


def structural_checks(model: ModelSystem, samples: int = 1000, seed: int = 0,
                      eps: float = 0.0) -> StructureReport:
    rng = np.random.default_rng(seed)
    n, r = model.n, model.r
    h = n - r
    Bs = [model.B11, model.B12, model.B21, model.B22]
    block = all(np.all(B[:h, :] == 0) and np.all(B[:, :h] == 0) for B in Bs)

    u = rng.normal(size=(n, samples))
    du = rng.normal(size=(n, samples))
    step = 1e-2
    lin = True
    for F in (model.flux1, model.flux2):
        second = F(eps, u + step * du) - 2 * F(eps, u) + F(eps, u - step * du)
        if h and np.max(np.abs(second[:h])) > 1e-12 * (1 + np.max(np.abs(F(eps, u)[:h]))):
            lin = False

    # ellipticity of sum_jk v_j . A0_22 b^{jk} v_k over random direction pairs
    a0 = model.A0[h:, h:]
    big = np.block([[a0 @ model.B11[h:, h:], a0 @ model.B12[h:, h:]],
                    [a0 @ model.B21[h:, h:], a0 @ model.B22[h:, h:]]])
    v = rng.normal(size=(2 * r, samples))
    quad = np.einsum("is,ij,js->s", v, big, v) / np.einsum("is,is->s", v, v)
    theta = float(min(np.min(quad), np.linalg.eigvalsh(0.5 * (big + big.T)).min()))

    x = rng.uniform(-5, 5, samples)
    M = model.M
    Mu = M @ u
    res = max(
        np.max(np.abs(model.flux2(eps, Mu) + M @ model.flux2(eps, u))),
        np.max(np.abs(model.flux1(eps, Mu) - M @ model.flux1(eps, u))),
        np.max(np.abs(model.source(eps, x, Mu) - M @ model.source(eps, x, u))),
    )
    eigs = []
    for state in model.endstates(eps):
        A = model.dflux1(eps, state.reshape(n, 1))[:, :, 0]
        eigs.append(sorted(np.linalg.eigvals(A).real.tolist()))
    return StructureReport(bool(block), bool(lin), theta, float(res), eigs, samples)


# --------------------------------------------------------------------------
# discrete operators


def _difference_matrices(N1: int, h: float):
    m = N1 - 2
    e = np.ones(m)
    D1 = sp.diags([-e[:-1], e[:-1]], [-1, 1], format="csr") / (2 * h)
    D2 = sp.diags([e[:-1], -2 * e, e[:-1]], [-1, 0, 1], format="csr") / h ** 2
    Dup = sp.diags([3 * e, -4 * e[:-1], e[:-2]], [0, -1, -2], format="csr") / (2 * h)
    return D1, D2, Dup


def _flux_divergence(F: np.ndarray, upwind: Sequence[int], h: float) -> np.ndarray:
    """x1 divergence of node fluxes F (n, N1, ...) at interior nodes."""
    out = np.empty((F.shape[0], F.shape[1] - 2) + F.shape[2:])
    for c in range(F.shape[0]):
        f = F[c]
        if upwind[c] == 1:
            ghost = np.concatenate([f[:1], f[:-3]], axis=0)  # F_{j-2} with F_{-1} := F_0
            out[c] = (3 * f[1:-1] - 4 * f[:-2] + ghost) / (2 * h)
        elif upwind[c] == -1:
            ghost = np.concatenate([f[3:], f[-1:]], axis=0)
            out[c] = -(3 * f[1:-1] - 4 * f[2:] + ghost) / (2 * h)
        else:
            out[c] = (f[2:] - f[:-2]) / (2 * h)
    return out


@dataclass
class ShockProfile:
    model: ModelSystem
    eps: float
    grid: DiscretizationGrid
    samples: np.ndarray
    u_minus: np.ndarray
    u_plus: np.ndarray
    residual: float
    ode_residual: float
    endstate_gap: float

    @property
    def x(self):
        return self.grid.x

    def derivative(self) -> np.ndarray:
        """Central-difference d/dx1 of the profile with zero boundary rows."""
        d = np.zeros_like(self.samples)
        d[:, 1:-1] = (self.samples[:, 2:] - self.samples[:, :-2]) / (2 * self.grid.h)
        return d

    def to_dict(self):
        return {
            "model": self.model.id,
            "eps": self.eps,
            "grid": self.grid.to_dict(),
            "u_minus": self.u_minus.tolist(),
            "u_plus": self.u_plus.tolist(),
            "residual": self.residual,
            "ode_residual": self.ode_residual,
            "endstate_gap": self.endstate_gap,
        }


def full_rhs(model: ModelSystem, eps: float, grid: DiscretizationGrid, U: np.ndarray) -> np.ndarray:
    """Discrete right-hand side of the full system for Fourier state U (K+1, n, N1).

    Boundary nodes carry the Dirichlet data; the output is zero there.
    """
    h = grid.h
    K = U.shape[0] - 1
    k = np.arange(K + 1)
    out = np.zeros_like(U)
    D1 = lambda f: (f[..., 2:] - f[..., :-2]) / (2 * h)
    D2 = lambda f: (f[..., 2:] - 2 * f[..., 1:-1] + f[..., :-2]) / h ** 2
    visc = np.einsum("ab,kbj->kaj", model.B11, D2(U))
    visc += 1j * k[:, None, None] * np.einsum("ab,kbj->kaj", model.B12 + model.B21, D1(U))
    visc -= (k ** 2)[:, None, None] * np.einsum("ab,kbj->kaj", model.B22, U[..., 1:-1])
    u = to_physical(U, grid.N2)
    x = grid.x[:, None]
    phys = -_flux_divergence(model.flux1(eps, u), model.upwind, h) + model.source(eps, x, u)[:, 1:-1]
    F2 = to_fourier(model.flux2(eps, u), K)
    out[..., 1:-1] = visc + to_fourier(phys, K) - 1j * k[:, None, None] * F2[..., 1:-1]
    return out


def evaluate_rhs(model: ModelSystem, state, eps: float = 0.0, profile: Optional[ShockProfile] = None) -> ChannelField:
    """Right-hand side at a full state (ChannelField), or at profile + perturbation
    when ``profile`` is given."""
    U = state.coeffs.copy()
    if profile is not None:
        U[0] += profile.samples
        eps = profile.eps
    return ChannelField(full_rhs(model, eps, state.grid, U), state.grid)


def linear_operator_parts(model: ModelSystem, profile: ShockProfile, sparse: bool = False):
    """Interior matrices (L0, J, B22 block) with L_k = L0 + i k J - k^2 B22."""
    grid, eps = profile.grid, profile.eps
    n, m = model.n, grid.N1 - 2
    D1, D2, Dup = _difference_matrices(grid.N1, grid.h)
    ub = profile.samples[:, 1:-1]
    xi = grid.x_inner
    A1 = model.dflux1(eps, ub)
    A2 = model.dflux2(eps, ub)
    G = model.dsource(eps, xi, ub)
    I = sp.identity(m, format="csr")
    L0 = [[None] * n for _ in range(n)]
    J = [[None] * n for _ in range(n)]
    Bk = [[None] * n for _ in range(n)]
    for a in range(n):
        if model.upwind[a] == 1:
            Dflux = Dup
        elif model.upwind[a] == -1:
            Dflux = -Dup[::-1, ::-1]
        else:
            Dflux = D1
        for b in range(n):
            L0[a][b] = model.B11[a, b] * D2 - Dflux @ sp.diags(A1[a, b]) + sp.diags(G[a, b])
            J[a][b] = (model.B12[a, b] + model.B21[a, b]) * D1 - sp.diags(A2[a, b])
            Bk[a][b] = model.B22[a, b] * I
    out = [sp.bmat(M, format="csr") for M in (L0, J, Bk)]
    if sparse:
        return tuple(out)
    return tuple(M.toarray() for M in out)


def linear_operator(model: ModelSystem, profile: ShockProfile, k: int, sparse: bool = False):
    L0, J, Bk = linear_operator_parts(model, profile, sparse=sparse)
    return L0 + 1j * k * J - k ** 2 * Bk


# --------------------------------------------------------------------------
# profiles


def trivial_profile(model: ModelSystem, eps: float, grid: DiscretizationGrid,
                    state: Optional[np.ndarray] = None) -> ShockProfile:
    """Constant state as base solution (M0, or a shock-free reference)."""
    um, up = model.endstates(eps)
    state = um if state is None else np.asarray(state, dtype=float)
    samples = np.repeat(state[:, None], grid.N1, axis=1)
    prof = ShockProfile(model, eps, grid, samples, state.copy(), state.copy(), 0.0, 0.0, 0.0)
    U = np.zeros((grid.K + 1, model.n, grid.N1), dtype=complex)
    U[0] = samples
    prof.residual = float(np.max(np.abs(full_rhs(model, eps, grid, U)[0])))
    return prof


def solve_profile(model: ModelSystem, eps: float, grid: DiscretizationGrid,
                  tol: float = 1e-10, endstate_tol: float = 1e-8, max_iter: int = 50) -> ShockProfile:
    """Discrete standing profile of the k = 0 equations.

    Unknowns are all node values.  Parabolic rows impose the integrated
    equation G_{j+1/2} = G(u-) with G = B11 (u_{j+1} - u_j)/h - (F_j + F_{j+1})/2,
    hyperbolic rows impose F(u_j) = F(u-), and the shocked component equals
    the endstate midpoint at x1 = 0.  The result is an exact steady state of
    the discrete right-hand side.
    """
    model.check_eps(eps)
    if model.shock_component is None:
        return trivial_profile(model, eps, grid)
    if model.r != 1:
        raise InvalidInput("profile solver supports a single parabolic component")
    if grid.N1 % 2 == 0:
        raise InvalidInput("profile solver needs odd N1 so that x1 = 0 is a node")
    n, N, h = model.n, grid.N1, grid.h
    x = grid.x
    um, up = model.endstates(eps)
    s = model.shock_component
    hyp = list(range(n - model.r))
    par = list(range(n - model.r, n))
    mid = 0.5 * (um[s] + up[s])
    centre = N // 2
    Fm = model.flux1(eps, um.reshape(n, 1))[:, 0]

    w = 0.5 * (1 + np.tanh(x / model.profile_width()))
    U = um[:, None] * (1 - w) + up[:, None] * w

    def residual(U):
        F = model.flux1(eps, U)
        rows = []
        for c in hyp:
            rows.append(F[c] - Fm[c])
        for c in par:
            G = (model.B11[c] @ (U[:, 1:] - U[:, :-1])) / h - 0.5 * (F[c, 1:] + F[c, :-1])
            rows.append(G + Fm[c])
        rows.append(np.array([U[s, centre] - mid]))
        return np.concatenate(rows)

    def jacobian(U):
        A = model.dflux1(eps, U)  # (n, n, N)
        Jm = np.zeros((n * N, n * N))
        row = 0
        for c in hyp:
            for b in range(n):
                Jm[row + np.arange(N), b * N + np.arange(N)] = A[c, b]
            row += N
        for c in par:
            idx = np.arange(N - 1)
            for b in range(n):
                Jm[row + idx, b * N + idx + 1] += model.B11[c, b] / h - 0.5 * A[c, b, 1:]
                Jm[row + idx, b * N + idx] += -model.B11[c, b] / h - 0.5 * A[c, b, :-1]
            row += N - 1
        Jm[row, s * N + centre] = 1.0
        return Jm

    res = np.inf
    for _ in range(max_iter):
        r = residual(U)
        res = float(np.max(np.abs(r)))
        if res <= 0.1 * tol:
            break
        try:
            dx = np.linalg.solve(jacobian(U), -r)
        except np.linalg.LinAlgError as exc:
            raise NoProfile(f"profile Jacobian is singular: {exc}") from exc
        U = U + dx.reshape(n, N)
        if not np.all(np.isfinite(U)):
            raise NoProfile("profile iteration diverged")
    if res > tol:
        raise NoProfile(f"profile solver stalled with residual {res:.3e}")
    gap = float(max(np.max(np.abs(U[:, 0] - um)), np.max(np.abs(U[:, -1] - up))))
    if gap > endstate_tol:
        raise NoProfile(f"endstates not reached at |x1| = L (gap {gap:.3e}); enlarge L")
    prof = ShockProfile(model, eps, grid, U, um, up, 0.0, res, gap)
    Ufull = np.zeros((grid.K + 1, n, N), dtype=complex)
    Ufull[0] = U
    prof.residual = float(np.max(np.abs(full_rhs(model, eps, grid, Ufull)[0])))
    return prof


def make_profile(model: ModelSystem, eps: float, grid: DiscretizationGrid, **kw) -> ShockProfile:
    return solve_profile(model, eps, grid, **kw)


# --------------------------------------------------------------------------
# tuning of the designed crossing


def leading_eigenvalue(model: ModelSystem, profile: ShockProfile, k: int) -> complex:
    ev = np.linalg.eigvals(linear_operator(model, profile, k))
    return ev[np.argmax(ev.real)]


def tune_m0(params: Optional[M0Params], grid: DiscretizationGrid, k_star: int = 1,
            bracket: Tuple[float, float] = (0.3, 1.6), xtol: float = 1e-14) -> M0Model:
    """Return an M0 model whose activator gain puts Re lambda = 0 at k_star and eps = 0
    on this grid."""
    base = params or M0Params()

    def growth(alpha):
        m = M0Model(M0Params(**{**vars(base), "alpha": alpha}))
        return leading_eigenvalue(m, trivial_profile(m, 0.0, grid), k_star).real

    alpha0 = brentq(growth, *bracket, xtol=xtol, rtol=4 * np.finfo(float).eps)
    return M0Model(M0Params(**{**vars(base), "alpha": alpha0}))


# --------------------------------------------------------------------------
# time stepping


@dataclass
class Trajectory:
    final: ChannelField
    times: np.ndarray
    snapshots: List[ChannelField] = field(default_factory=list)
    nsteps: int = 0
    dt: float = 0.0


class Stepper:
    """Strang-split IMEX stepper for the perturbation equation v_t = L v + N(v).

    All linear terms of each Fourier mode go into a Crank-Nicolson half step
    (a rational function of L_k, so discrete eigenvectors and projections
    commute with it); the nonlinear remainder N is advanced by Heun in
    physical space.
    """

    def __init__(self, model: ModelSystem, profile: ShockProfile, amplitude_bound: float = 1.0,
                 blowup: float = 1e6):
        self.model = model
        self.profile = profile
        self.grid = profile.grid
        self.eps = profile.eps
        self.amplitude_bound = amplitude_bound
        self.blowup = blowup
        self.L0, self.J, self.Bk = linear_operator_parts(model, profile)
        self._cache: Dict[float, np.ndarray] = {}
        self._prop_cache: Dict[tuple, np.ndarray] = {}
        g = self.grid
        self.m = g.N1 - 2
        ub = profile.samples
        self._ubar = ub
        self._F1bar = model.flux1(self.eps, ub)[..., None]
        self._F2bar = model.flux2(self.eps, ub)[..., None]
        self._gbar = model.source(self.eps, g.x, ub)[..., None]
        self._A1 = model.dflux1(self.eps, ub)
        self._A2 = model.dflux2(self.eps, ub)
        self._G = model.dsource(self.eps, g.x, ub)

    @cached_property
    def Lk(self) -> List[np.ndarray]:
        return [self.L0 + 1j * k * self.J - k ** 2 * self.Bk for k in range(self.grid.K + 1)]

    def cfl(self) -> dict:
        ub = self._ubar
        speeds = [np.max(np.abs(np.linalg.eigvals(self._A1[:, :, j]))) for j in range(ub.shape[1])]
        smax = float(max(speeds))
        limit = self.grid.h / smax if smax > 0 else float("inf")
        return {"max_speed": smax, "dt_limit": limit, "dt": self.grid.dt, "satisfied": self.grid.dt <= limit}

    def half_step_matrices(self, dt: float) -> List[np.ndarray]:
        key = float(dt)
        if key not in self._cache:
            mats = []
            I = np.eye(self.Lk[0].shape[0])
            for L in self.Lk:
                A = I - 0.25 * dt * L
                B = I + 0.25 * dt * L
                try:
                    C = np.linalg.solve(A, B)
                except np.linalg.LinAlgError as exc:
                    raise StepRejected(f"implicit solve failed: {exc}") from exc
                if not np.all(np.isfinite(C)):
                    raise StepRejected("implicit solve produced non-finite values")
                mats.append(C)
            if len(self._cache) >= 8:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = np.asarray(mats)
        return self._cache[key]


    # -- helpers on interior vectors

    def _flat(self, c: np.ndarray) -> np.ndarray:
        return c[:, :, 1:-1].reshape(c.shape[0], -1)

    def _unflat(self, f: np.ndarray) -> np.ndarray:
        n = self.model.n
        out = np.zeros((f.shape[0], n, self.grid.N1), dtype=complex)
        out[:, :, 1:-1] = f.reshape(f.shape[0], n, self.m)
        out[0] = out[0].real
        return out

    def _apply(self, mats, f):
        return np.matmul(mats, f[:, :, None])[:, :, 0]

    def nonlinear(self, f: np.ndarray) -> np.ndarray:
        """N(v) = F(ubar + v) - F(ubar) - L v at interior nodes, flat per mode."""
        model, g, eps = self.model, self.grid, self.eps
        c = self._unflat(f)
        v = to_physical(c, g.N2)
        u = self._ubar[..., None] + v
        Av = np.einsum("abj,bjm->ajm", self._A1, v)
        dF1 = model.flux1(eps, u) - self._F1bar - Av
        phys = -_flux_divergence(dF1, model.upwind, g.h)
        x = g.x[:, None]
        dg = model.source(eps, x, u) - self._gbar - np.einsum("abj,bjm->ajm", self._G, v)
        phys = phys + dg[:, 1:-1]
        out = to_fourier(phys, g.K)
        dF2 = model.flux2(eps, u) - self._F2bar - np.einsum("abj,bjm->ajm", self._A2, v)
        if np.any(dF2):
            k = np.arange(g.K + 1)
            out = out - 1j * k[:, None, None] * to_fourier(dF2, g.K)[..., 1:-1]
        out[0] = out[0].real
        return out.reshape(g.K + 1, -1)

    def _heun(self, f, dt):
        if self.model.is_linear():
            return f
        n0 = self.nonlinear(f)
        n1 = self.nonlinear(f + dt * n0)
        return f + 0.5 * dt * (n0 + n1)

    def steps_for(self, T: float) -> int:
        n = max(4, int(math.ceil(T / self.grid.dt - 1e-9)))
        return 4 * int(math.ceil(n / 4))

    def evolve(self, v0: ChannelField, T: float, nsteps: Optional[int] = None,
               snapshots: bool = False, every: int = 1) -> Trajectory:
        if T < 0:
            raise InvalidInput("T must be non-negative")
        if v0.n != self.model.n:
            raise InvalidInput("field has the wrong number of components")
        amp = float(np.max(np.abs(v0.coeffs)))
        if amp > self.amplitude_bound:
            raise InvalidInput(f"initial amplitude {amp:.3e} exceeds the configured bound")
        if T == 0:
            return Trajectory(v0.copy(), np.array([0.0]), [v0.copy()] if snapshots else [], 0, 0.0)
        nsteps = nsteps or self.steps_for(T)
        dt = T / nsteps
        C = self.half_step_matrices(dt)
        C2 = np.matmul(C, C)
        f = self._flat(v0.coeffs)
        snaps, times = [], [0.0]
        if snapshots:
            snaps.append(v0.copy())
        for step in range(nsteps):
            if snapshots:
                f = self._apply(C, self._heun(self._apply(C, f), dt))
            else:
                # consecutive half steps are merged
                if step == 0:
                    f = self._apply(C, f)
                f = self._heun(f, dt)
                f = self._apply(C if step == nsteps - 1 else C2, f)
            if not np.all(np.isfinite(f)):
                raise StepRejected(f"non-finite state at step {step + 1}")
            if np.max(np.abs(f)) > self.blowup:
                raise BlowUp(f"amplitude exceeded {self.blowup:.1e} at t = {(step + 1) * dt:.4g}")
            if snapshots and ((step + 1) % every == 0 or step == nsteps - 1):
                snaps.append(ChannelField(self._unflat(f), self.grid))
                times.append((step + 1) * dt)
        final = ChannelField(self._unflat(f), self.grid)
        return Trajectory(final, np.array(times), snaps, nsteps, dt)

    def linear_propagators(self, T: float, nsteps: Optional[int] = None) -> np.ndarray:
        nsteps = nsteps or self.steps_for(T)
        key = (float(T), int(nsteps))
        if key not in self._prop_cache:
            C = self.half_step_matrices(T / nsteps)
            if len(self._prop_cache) >= 8:
                self._prop_cache.pop(next(iter(self._prop_cache)))
            self._prop_cache[key] = np.array([np.linalg.matrix_power(c, 2 * nsteps) for c in C])
        return self._prop_cache[key]

    def evolve_linearized(self, v0: ChannelField, T: float, nsteps: Optional[int] = None) -> ChannelField:
        if T == 0:
            return v0.copy()
        E = self.linear_propagators(T, nsteps)
        out = self._apply(E, self._flat(v0.coeffs))
        if not np.all(np.isfinite(out)) or np.max(np.abs(out)) > self.blowup:
            raise BlowUp("linearized evolution blew up")
        return ChannelField(self._unflat(out), self.grid)

    def richardson(self, v0: ChannelField, T: float, nsteps: Optional[int] = None) -> dict:
        """Step-halving check: difference between n and 2n step solutions and the
        observed order from n, 2n, 4n."""
        nsteps = nsteps or self.steps_for(T)
        a = self.evolve(v0, T, nsteps).final
        b = self.evolve(v0, T, 2 * nsteps).final
        c = self.evolve(v0, T, 4 * nsteps).final
        e1, e2 = (a - b).norm(), (b - c).norm()
        order = math.log2(e1 / e2) if e1 > 0 and e2 > 0 else float("nan")
        return {"diff": e2, "order": order}


def evolve(model: ModelSystem, profile: ShockProfile, v0: ChannelField, T: float,
           grid: Optional[DiscretizationGrid] = None, snapshots: bool = False, **kw) -> Trajectory:
    return Stepper(model, profile).evolve(v0, T, snapshots=snapshots, **kw)


def evolve_linearized(model: ModelSystem, profile: ShockProfile, v0: ChannelField, T: float,
                      grid: Optional[DiscretizationGrid] = None, **kw) -> ChannelField:
    return Stepper(model, profile).evolve_linearized(v0, T, **kw)


# --------------------------------------------------------------------------
# norms and energies


def _derivatives(c: np.ndarray, h: float, s: int):
    """All D^alpha c with |alpha| <= s, forward differences in x1, i k in x2."""
    k = np.arange(c.shape[0])[:, None, None]
    out = []
    for a1 in range(s + 1):
        for a2 in range(s + 1 - a1):
            d = c
            for _ in range(a1):
                d = (d[..., 1:] - d[..., :-1]) / h
            d = d * (1j * k) ** a2
            out.append(d)
    return out


def _quad(d: np.ndarray, A: np.ndarray, h: float) -> float:
    Ad = np.einsum("ab,kbj->kaj", A, d)
    return field_inner(Ad, d, h)


def hs_norm(v: ChannelField, s: int = 0, components: Optional[Sequence[int]] = None) -> float:
    c = v.coeffs if components is None else v.coeffs[:, list(components)]
    I = np.eye(c.shape[1])
    return math.sqrt(max(sum(_quad(d, I, v.grid.h) for d in _derivatives(c, v.grid.h, s)), 0.0))


def energy_bounds(A0: np.ndarray) -> Tuple[float, float]:
    ev = np.linalg.eigvalsh(0.5 * (A0 + A0.T))
    return 0.5 * float(ev.min()), 0.5 * float(ev.max())


def energy_functional(profile: ShockProfile, v: ChannelField, s: int = 0) -> float:
    """E(v) = 1/2 sum_{|alpha| <= s} <D^alpha v, A0 D^alpha v>."""
    if s not in (0, 1, 2):
        raise InvalidInput("s must be 0, 1 or 2")
    A0 = profile.model.A0
    return 0.5 * sum(_quad(d, A0, v.grid.h) for d in _derivatives(v.coeffs, v.grid.h, s))


def weighted_norm(v, eta: float, s: int = 0, grid: Optional[DiscretizationGrid] = None,
                  x: Optional[np.ndarray] = None, max_weight: float = 1e8) -> float:
    """Discrete H^s norm of e^{eta <x1>} v with <x1> = sqrt(1 + x1^2).

    ``v`` is a ChannelField or a 1-D array of samples on ``x`` (uniform).
    """
    if eta < 0:
        raise InvalidInput("eta must be non-negative")
    if isinstance(v, ChannelField):
        x = v.grid.x
        h = v.grid.h
        c = v.coeffs
    else:
        if x is None:
            if grid is None:
                raise InvalidInput("need x samples or a grid for a 1-D function")
            x = grid.x
        x = np.asarray(x, dtype=float)
        h = float(x[1] - x[0])
        c = np.asarray(v, dtype=complex).reshape(1, 1, -1)
    wmax = math.exp(eta * math.sqrt(1 + float(np.max(np.abs(x))) ** 2))
    if wmax > max_weight:
        raise WeightOverflow(f"weight {wmax:.3e} at the boundary exceeds {max_weight:.1e}")
    w = np.exp(eta * np.sqrt(1 + x ** 2))
    cw = c * w[None, None, :]
    I = np.eye(cw.shape[1])
    total = sum(_quad(d, I, h) for d in _derivatives(cw, h, s))
    if not isinstance(v, ChannelField):
        total /= 2 * np.pi  # plain 1-D norm without the channel circumference
    return math.sqrt(max(total, 0.0))


@dataclass
class LinearizationError:
    err: float
    en_bound_ratio: float
    amplitude: float

    def to_dict(self):
        return vars(self).copy()


def linearization_error(model: ModelSystem, profile: ShockProfile, v0: ChannelField, T: float,
                        grid: Optional[DiscretizationGrid] = None, s: int = 0,
                        stepper: Optional[Stepper] = None, nsteps: Optional[int] = None) -> LinearizationError:
    st = stepper or Stepper(model, profile)
    nl = st.evolve(v0, T, nsteps=nsteps).final
    lin = st.evolve_linearized(v0, T, nsteps=nsteps)
    err = hs_norm(nl - lin, s)
    n0 = hs_norm(v0, s)
    ratio = err / n0 ** 2 if n0 > 0 else 0.0
    return LinearizationError(err, ratio, n0)


@dataclass
class EnergyHistory:
    times: np.ndarray
    energy: np.ndarray
    dissipation: np.ndarray  # cumulative integral of |v_par|_{H^{s+1}}^2

    @property
    def max_ratio(self) -> float:
        return float(np.max(self.energy / self.energy[0]))


def energy_history(stepper: Stepper, v0: ChannelField, T: float, s: int = 1,
                   nsteps: Optional[int] = None) -> EnergyHistory:
    tr = stepper.evolve(v0, T, nsteps=nsteps, snapshots=True)
    model = stepper.model
    par = list(range(model.n - model.r, model.n))
    E = np.array([energy_functional(stepper.profile, f, s) for f in tr.snapshots])
    D = np.array([hs_norm(f, s + 1, components=par) ** 2 for f in tr.snapshots])
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (D[1:] + D[:-1]) * np.diff(tr.times))])
    return EnergyHistory(tr.times, E, cum)


# --------------------------------------------------------------------------
# checkpoints

_HEADER = struct.Struct("<4sIIIIdd")
_MAGIC = b"O2HF"


def save_checkpoint(path, v: ChannelField) -> None:
    g = v.grid
    payload = np.stack([v.coeffs.real, v.coeffs.imag], axis=-1)  # (k, component, x1, 2)
    payload = np.ascontiguousarray(np.transpose(payload, (0, 2, 1, 3)), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, v.n, g.N1, g.K, g.L, g.dt))
        fh.write(payload.tobytes())


def load_checkpoint(path) -> ChannelField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise InvalidInput("checkpoint is truncated")
    magic, version, n, N1, K, L, dt = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != 1:
        raise InvalidInput("not an O2HF version 1 checkpoint")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if data.size != (K + 1) * N1 * n * 2:
        raise InvalidInput("checkpoint payload has the wrong size")
    data = data.reshape(K + 1, N1, n, 2).transpose(0, 2, 1, 3)
    grid = DiscretizationGrid(L, N1, K, dt)
    return ChannelField(data[..., 0] + 1j * data[..., 1], grid)
