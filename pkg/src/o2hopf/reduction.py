"""Lyapunov-Schmidt reduction of the time-T map.

A periodic orbit of the perturbation equation is a zero of the
displacement v(0) -> v(T) - v(0).  Writing v(0) = center part (a1, a2) plus
a complement part, the complement equation is solved by a Picard iteration
with a right inverse of I - e^{T L} on the complement, and what remains is
the pair of reduced maps (N1, N2) of (a1, a2, mu) with T = T*(1 + mu).

The machinery talks to the evolution problem through ``ReductionSystem``;
``ChannelSystem`` wraps the discretized channel PDE and
``o2hopf.synthetic.SyntheticSystem`` a six-dimensional ODE with known
cubic coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq, minimize_scalar

from .errors import (
    FitDegenerate,
    GenericityViolation,
    IllConditioned,
    InvalidInput,
    KernelDimensionMismatch,
    NoContraction,
    NoConvergence,
    ProjectionLeak,
    SingularJacobian,
)
from .model_pde import (
    ChannelField,
    DiscretizationGrid,
    ModelSystem,
    Stepper,
    make_profile,
    reflect_coeffs,
    rotate_coeffs,
    field_inner,
)
from .reduced_o2 import (
    BranchKind,
    CubicCoefficients,
    ReducedPoint,
    branch_amplitude,
    check_genericity,
    newton_refine,
    pin_for_kind,
    solve_cubic_equilibria,
)
from .spectral import EigenBundle, Projections, eigendata


# --------------------------------------------------------------------------
# evolution problems


@dataclass
class Run:
    final: np.ndarray
    times: np.ndarray
    states: List[np.ndarray]
    dt: float


class ReductionSystem:
    """What the reduction needs from an evolution problem.

    States are numpy arrays of a fixed shape.  ``lam_plus`` is the critical
    eigenvalue at the current eps, ``omega0`` and ``gamma_prime`` describe
    the crossing (eps = 0) and are used only for kappa.  Linear algebra on
    the complement is organized in independent blocks (x2-modes for the
    channel); ``structural`` gives the number of exactly-zero singular
    values per block produced by the center projection.
    """

    k_star: int = 1
    eps: float = 0.0
    lam_plus: Optional[complex] = None
    omega0: float = float("nan")
    gamma_prime: float = float("nan")

    def steps(self, T: float) -> int:
        raise NotImplementedError

    def zeros(self) -> np.ndarray:
        raise NotImplementedError

    def evolve(self, v: np.ndarray, T: float, record: bool = False) -> Run:
        raise NotImplementedError

    def linear(self, v: np.ndarray, T: float) -> np.ndarray:
        raise NotImplementedError

    def nonlinear(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def coords(self, v: np.ndarray) -> Tuple[complex, complex]:
        raise NotImplementedError

    def embed(self, a1: complex, a2: complex) -> np.ndarray:
        raise NotImplementedError

    def complement(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        raise NotImplementedError

    def norm(self, v: np.ndarray) -> float:
        return math.sqrt(max(self.inner(v, v), 0.0))

    def rotate(self, v: np.ndarray, theta: float) -> np.ndarray:
        raise NotImplementedError

    def reflect(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reality_defect(self, v: np.ndarray) -> float:
        raise NotImplementedError

    def phase(self, T: float) -> float:
        """Unwrapped argument of the discrete center multiplier over time T."""
        raise NotImplementedError

    def multiplier(self, T: float) -> complex:
        raise NotImplementedError

    def blocks(self, T: float) -> List[np.ndarray]:
        raise NotImplementedError

    def structural(self) -> List[int]:
        raise NotImplementedError

    def pack(self, v: np.ndarray) -> List[np.ndarray]:
        raise NotImplementedError

    def unpack(self, parts: List[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def kernel_seed(self) -> Optional[np.ndarray]:
        return None

    def discrete_duhamel(self, run: Run, a: Tuple[complex, complex]) -> Tuple[complex, complex]:
        raise InvalidInput("this system has no exact discrete Duhamel form")


class ChannelSystem(ReductionSystem):
    """The discretized channel PDE around the profile at ``eps``.

    ``k_star`` selects the critical mode; without it there is no center
    part (the projection is the identity), which is the setting for kernel
    computations on shock models.  ``crossing`` supplies gamma'(0) and
    omega(0).  ``nsteps`` fixes the number of time steps for every T so
    the time-T map is smooth in T.
    """

    def __init__(self, model: ModelSystem, grid: DiscretizationGrid, eps: float,
                 k_star: Optional[int] = None, crossing: Optional[EigenBundle] = None,
                 nsteps: Optional[int] = None, amplitude_bound: float = 1.0):
        self.model = model
        self.grid = grid
        self.eps = float(eps)
        self.bundle: Optional[EigenBundle] = None
        self.projections: Optional[Projections] = None
        if k_star is not None:
            self.bundle = eigendata(model, grid, eps, k_star)
            self.projections = Projections(self.bundle)
            self.profile = self.bundle.profile
            self.k_star = int(k_star)
            self.lam_plus = self.bundle.lam_plus
        else:
            self.profile = make_profile(model, eps, grid)
            self.k_star = 0
            self.lam_plus = None
        if crossing is not None:
            self.omega0 = crossing.omega0
            self.gamma_prime = crossing.gamma_prime0
        elif self.bundle is not None:
            self.omega0 = self.bundle.omega0
        self.stepper = Stepper(model, self.profile, amplitude_bound=amplitude_bound)
        if nsteps is None and self.lam_plus is not None:
            nsteps = self.stepper.steps_for(2 * np.pi * self.k_star / self.lam_plus.imag)
        self.nsteps = nsteps
        self._blocks: Dict[float, List[np.ndarray]] = {}

    # state helpers

    def steps(self, T: float) -> int:
        return self.nsteps or self.stepper.steps_for(T)

    def zeros(self) -> np.ndarray:
        return np.zeros((self.grid.K + 1, self.model.n, self.grid.N1), dtype=complex)

    def as_field(self, v: np.ndarray) -> ChannelField:
        return ChannelField(v, self.grid)

    def evolve(self, v, T, record=False) -> Run:
        tr = self.stepper.evolve(self.as_field(v), T, nsteps=self.steps(T), snapshots=record)
        return Run(tr.final.coeffs, tr.times, [s.coeffs for s in tr.snapshots], tr.dt)

    def linear(self, v, T):
        if T == 0:
            return v.copy()
        st = self.stepper
        E = st.linear_propagators(T, self.steps(T))
        return st._unflat(st._apply(E, st._flat(v)))

    def nonlinear(self, v):
        st = self.stepper
        return st._unflat(st.nonlinear(st._flat(v)))

    def coords(self, v):
        if self.projections is None:
            return 0j, 0j
        return self.projections.coords(self.as_field(v))

    def embed(self, a1, a2):
        if self.projections is None:
            return self.zeros()
        return self.projections.embed(a1, a2, self.grid).coeffs

    def complement(self, v):
        if self.projections is None:
            return v.copy()
        return self.projections.complement_coeffs(v)

    def inner(self, u, v):
        return field_inner(u, v, self.grid.h)

    def rotate(self, v, theta):
        return rotate_coeffs(v, theta)

    def reflect(self, v):
        return reflect_coeffs(v, self.model.M)

    def reality_defect(self, v):
        return float(np.max(np.abs(v[0].imag), initial=0.0))

    # center multiplier of the Crank-Nicolson propagator: r(z)^{2n}

    def _r(self, T):
        n = self.steps(T)
        z = self.lam_plus * T / n
        return (1 + z / 4) / (1 - z / 4), n

    def phase(self, T):
        r, n = self._r(T)
        return 2 * n * float(np.angle(r))

    def multiplier(self, T):
        r, n = self._r(T)
        return complex(r ** (2 * n))

    # complement linear algebra, one block per x2-mode

    def _center_projector(self) -> np.ndarray:
        b, h, M = self.bundle, self.grid.h, self.model.M
        w = b.w[:, 1:-1].reshape(-1)
        wa = b.w_adj[:, 1:-1].reshape(-1)
        w2 = (M @ np.conj(b.w))[:, 1:-1].reshape(-1)
        wa2 = (M @ np.conj(b.w_adj))[:, 1:-1].reshape(-1)
        return np.eye(w.size) - 2 * np.pi * h * (np.outer(w, wa.conj()) + np.outer(w2, wa2.conj()))

    def blocks(self, T):
        key = float(T)
        if key not in self._blocks:
            E = self.stepper.linear_propagators(T, self.steps(T))
            I = np.eye(E.shape[1])
            out = []
            for k in range(self.grid.K + 1):
                B = I - E[k]
                if k == 0:
                    B = B.real
                if self.projections is not None and k == self.k_star:
                    P = self._center_projector()
                    B = P @ B @ P
                out.append(B)
            if len(self._blocks) >= 4:
                self._blocks.pop(next(iter(self._blocks)))
            self._blocks[key] = out
        return self._blocks[key]

    def structural(self):
        s = [0] * (self.grid.K + 1)
        if self.projections is not None:
            s[self.k_star] = 2
        return s

    def pack(self, v):
        f = self.stepper._flat(v)
        return [f[0].real] + [f[k] for k in range(1, f.shape[0])]

    def unpack(self, parts):
        return self.stepper._unflat(np.array([np.asarray(p, dtype=complex) for p in parts]))

    def kernel_seed(self):
        if self.model.shock_component is None:
            return None
        v = self.zeros()
        v[0] = self.profile.derivative()
        return v

    def discrete_duhamel(self, run, a):
        """Center coordinates at time T from the exact step recursion.

        One step is C o Heun o C with C the Crank-Nicolson half step, so the
        coordinate obeys a <- r^2 a + r dt/2 [Phi(f1) + Phi(f1 + dt N(f1))]
        with f1 = C v and r the half-step multiplier.
        """
        st = self.stepper
        dt = run.dt
        C = st.half_step_matrices(dt)
        z = self.lam_plus * dt
        r = (1 + z / 4) / (1 - z / 4)
        acc = np.array(a, dtype=complex)
        for v in run.states[:-1]:
            f1 = st._apply(C, st._flat(v))
            n0 = st.nonlinear(f1)
            n1 = st.nonlinear(f1 + dt * n0)
            phi = np.array(self.coords(st._unflat(n0 + n1)))
            acc = r * r * acc + r * 0.5 * dt * phi
        return complex(acc[0]), complex(acc[1])


# --------------------------------------------------------------------------
# setup


@dataclass
class ReductionSetup:
    """Everything the reduction needs at one value of eps.

    ``T_star`` is chosen so that the discrete center multiplier has
    argument exactly 2 k* pi, and ``omega`` = 2 k* pi / T_star is the
    corresponding rotation frequency of the time-stepped linear flow.
    """

    system: ReductionSystem
    eps: float
    T_star: float
    omega: float
    kernel: Optional[np.ndarray] = None
    picard_tol: float = 1e-10
    picard_max: int = 100
    null_tol: float = 1e-4
    cond_max: float = 1e10
    smallness: float = 0.5
    _inverse: Dict[float, "_BlockInverse"] = field(default_factory=dict, repr=False)

    @property
    def k_star(self) -> int:
        return self.system.k_star

    @property
    def bundle(self) -> Optional[EigenBundle]:
        return getattr(self.system, "bundle", None)

    @property
    def projections(self):
        return getattr(self.system, "projections", None)

    def period(self, mu: float) -> float:
        return self.T_star * (1.0 + mu)

    def to_dict(self) -> dict:
        lam = self.system.lam_plus
        return {
            "eps": self.eps,
            "T_star": self.T_star,
            "omega": self.omega,
            "k_star": self.k_star,
            "lambda_plus": None if lam is None else [lam.real, lam.imag],
            "has_kernel": self.kernel is not None,
        }


def discrete_period(system: ReductionSystem) -> float:
    """T with phase(T) = 2 k* pi, bracketed around 2 k* pi / Im lambda_+."""
    if system.lam_plus is None:
        raise InvalidInput("system has no critical eigenvalue")
    target = 2 * np.pi * system.k_star
    T0 = target / system.lam_plus.imag
    return brentq(lambda T: system.phase(T) - target, 0.9 * T0, 1.1 * T0, xtol=1e-15, rtol=1e-15)


def make_setup(system: ReductionSystem, T: Optional[float] = None, with_kernel: Optional[bool] = None,
               **tolerances) -> ReductionSetup:
    """Build a ReductionSetup.  Without a critical eigenvalue T must be given."""
    if system.lam_plus is not None:
        T_star = discrete_period(system)
    elif T is not None:
        T_star = float(T)
    else:
        raise InvalidInput("a period is required when the system has no center part")
    omega = 2 * np.pi * system.k_star / T_star if system.lam_plus is not None else float("nan")
    setup = ReductionSetup(system, system.eps, T_star, omega, **tolerances)
    want = system.kernel_seed() is not None if with_kernel is None else with_kernel
    if want:
        setup.kernel = kernel_basis(setup)
    return setup


def channel_setup(model: ModelSystem, grid: DiscretizationGrid, eps: float, crossing: Optional[EigenBundle] = None,
                  k_star: Optional[int] = None, T: Optional[float] = None, nsteps: Optional[int] = None,
                  with_kernel: Optional[bool] = None, **tolerances) -> ReductionSetup:
    if k_star is None and crossing is not None:
        k_star = crossing.k_star
    system = ChannelSystem(model, grid, eps, k_star=k_star, crossing=crossing, nsteps=nsteps)
    return make_setup(system, T=T, with_kernel=with_kernel, **tolerances)


# --------------------------------------------------------------------------
# right inverse on the complement


class _BlockInverse:
    """SVD of each block; singular values below null_tol * (largest overall)
    are deflated, which removes both the center directions and the kernel."""

    def __init__(self, blocks: List[np.ndarray], structural: List[int], null_tol: float):
        self.svd = [np.linalg.svd(B) for B in blocks]
        self.smax = max(float(s[0]) for _, s, _ in self.svd)
        self.cut = null_tol * self.smax
        self.structural = structural
        kept = [s[s >= self.cut] for _, s, _ in self.svd]
        smin = min((float(k[-1]) for k in kept if k.size), default=float("nan"))
        self.condition = self.smax / smin if smin > 0 else float("inf")

    def near_null(self) -> List[Tuple[int, float]]:
        """Near-null singular values beyond the structural ones, per block."""
        out = []
        for b, ((_, s, _), nstruct) in enumerate(zip(self.svd, self.structural)):
            small = np.sort(s[s < self.cut])
            out.extend((b, float(x)) for x in small[nstruct:])
        return out

    def solve(self, parts: List[np.ndarray]) -> List[np.ndarray]:
        out = []
        for (U, s, Vh), y in zip(self.svd, parts):
            keep = s >= self.cut
            c = (U[:, keep].conj().T @ y) / s[keep]
            out.append(Vh[keep].conj().T @ c)
        return out


def _inverse(setup: ReductionSetup, T: float) -> _BlockInverse:
    key = float(T)
    if key not in setup._inverse:
        sys = setup.system
        if len(setup._inverse) >= 4:
            setup._inverse.pop(next(iter(setup._inverse)))
        setup._inverse[key] = _BlockInverse(sys.blocks(T), sys.structural(), setup.null_tol)
    return setup._inverse[key]


def _apply_complement_operator(setup: ReductionSetup, x: np.ndarray, T: float) -> np.ndarray:
    sys = setup.system
    return x - sys.complement(sys.linear(x, T))


def _check_complement(setup: ReductionSetup, y: np.ndarray, what: str, tol: float = 1e-8):
    sys = setup.system
    a1, a2 = sys.coords(y)
    scale = max(1.0, sys.norm(y))
    if max(abs(a1), abs(a2)) > tol * scale:
        raise ProjectionLeak(f"{what} has a center component ({max(abs(a1), abs(a2)):.2e})")


@dataclass
class RightInverseResult:
    x: np.ndarray
    residual: float
    condition: float
    in_range: bool


def right_inverse(setup: ReductionSetup, y: np.ndarray, T: Optional[float] = None) -> RightInverseResult:
    """Minimum-norm solution of (I - Pi e^{TL} Pi) x = y on the complement, with
    the verification residual computed through the linear propagator."""
    T = setup.T_star if T is None else T
    _check_complement(setup, y, "right-hand side")
    inv = _inverse(setup, T)
    if inv.condition > setup.cond_max:
        raise IllConditioned(f"deflated condition number {inv.condition:.2e} exceeds {setup.cond_max:.0e}")
    sys = setup.system
    x = sys.unpack(inv.solve(sys.pack(y)))
    x = sys.complement(x)
    res = sys.norm(_apply_complement_operator(setup, x, T) - y)
    ok = res <= 1e-8 * sys.norm(y) + 1e-10
    return RightInverseResult(x, float(res), inv.condition, bool(ok))


def right_inverse_apply(setup: ReductionSetup, y: np.ndarray, T: Optional[float] = None) -> np.ndarray:
    return right_inverse(setup, y, T).x


def kernel_basis(setup: ReductionSetup, T: Optional[float] = None, allow_empty: bool = False,
                 iterations: int = 4) -> Optional[np.ndarray]:
    """Unit vector spanning ker(I - e^{TL}) on the complement.

    The translation direction d/dx1 of the profile seeds an inverse
    iteration on the mode-0 block.  Returns None when there is no kernel and
    ``allow_empty`` is set.
    """
    T = setup.T_star if T is None else T
    sys = setup.system
    inv = _inverse(setup, T)
    near = inv.near_null()
    seed = sys.kernel_seed()
    if len(near) > 1:
        raise KernelDimensionMismatch(f"{len(near)} near-null singular values: {near}")
    if seed is None or not near:
        if seed is None and not near and allow_empty:
            return None
        raise KernelDimensionMismatch(
            f"expected a one-dimensional kernel, found {len(near)} near-null directions"
            + ("" if seed is not None else " and no translation direction"))
    block, _ = near[0]
    parts = sys.pack(sys.complement(seed))
    B = sys.blocks(T)[block]
    shift = 1e-10 * inv.smax
    lu = sla.lu_factor(B + shift * np.eye(B.shape[0]))
    x = parts[block]
    for _ in range(iterations):
        x = sla.lu_solve(lu, x)
        x = x / np.linalg.norm(x)
    parts = [np.zeros_like(p) for p in parts]
    parts[block] = x
    h = sys.unpack(parts)
    if sys.inner(h, seed) < 0:
        h = -h
    h = h / sys.norm(h)
    res = sys.norm(_apply_complement_operator(setup, h, T))
    if res > 1e-6:
        raise KernelDimensionMismatch(f"kernel residual {res:.2e} above 1e-6")
    return h


# --------------------------------------------------------------------------
# time-T map and displacement


def time_T_map(setup: ReductionSetup, v0: np.ndarray, T: float, record: bool = False) -> Run:
    """Evolve the perturbation v0 over time T; ``record`` keeps every step."""
    if T == 0:
        return Run(v0.copy(), np.array([0.0]), [v0.copy()] if record else [], 0.0)
    return setup.system.evolve(v0, T, record=record)


@dataclass
class DisplacementValue:
    D1: complex
    D2: complex
    D3: np.ndarray
    norms: Dict[str, float]
    duhamel: Optional[Dict[str, object]] = None

    def to_dict(self) -> dict:
        out = {
            "D1": [self.D1.real, self.D1.imag],
            "D2": [self.D2.real, self.D2.imag],
            "norms": dict(self.norms),
        }
        if self.duhamel is not None:
            out["duhamel"] = {k: ([v.real, v.imag] if isinstance(v, complex) else v)
                              for k, v in self.duhamel.items()}
        return out


def _trapezoid_duhamel(setup: ReductionSetup, run: Run, a: Tuple[complex, complex], T: float,
                       stride: int = 1) -> np.ndarray:
    sys = setup.system
    # effective rate of the discrete propagator, so the linear part is exact
    m = sys.multiplier(T)
    lam = complex(np.log(abs(m)), sys.phase(T)) / T
    times = run.times[::stride]
    states = run.states[::stride]
    phi = np.array([sys.coords(sys.nonlinear(v)) for v in states])
    weights = np.exp((T - times) * lam)[:, None] * phi
    integral = np.trapezoid(weights, times, axis=0) if hasattr(np, "trapezoid") else np.trapz(weights, times, axis=0)
    return (np.exp(T * lam) - 1) * np.array(a) + integral


def displacement(setup: ReductionSetup, a1: complex, a2: complex, v_perp0: Optional[np.ndarray] = None,
                 T: Optional[float] = None, quadrature: Optional[str] = None) -> DisplacementValue:
    """Coordinates of v(T) - v(0) for v(0) = center(a1, a2) + v_perp0.

    ``quadrature`` adds the Duhamel form of D1, D2: 'trapezoid' integrates
    the projected nonlinearity over the stored snapshots with a
    half-resolution Richardson estimate; 'discrete' uses the exact step
    recursion of the time stepper.
    """
    sys = setup.system
    T = setup.T_star if T is None else T
    if v_perp0 is None:
        v_perp0 = sys.zeros()
    if sys.reality_defect(v_perp0) > 1e-10:
        raise ProjectionLeak("complement field is not real")
    _check_complement(setup, v_perp0, "complement field")
    v0 = sys.embed(a1, a2) + v_perp0
    if sys.reality_defect(v0) > 1e-10:
        raise ProjectionLeak("reconstructed field is not real")
    record = quadrature is not None
    run = time_T_map(setup, v0, T, record=record)
    dv = run.final - v0
    D1, D2 = sys.coords(dv)
    D3 = sys.complement(dv)
    norms = {"D3": sys.norm(D3), "v0": sys.norm(v0)}
    duhamel = None
    if quadrature is not None:
        a = (complex(a1), complex(a2))
        if quadrature == "trapezoid":
            full = _trapezoid_duhamel(setup, run, a, T)
            half = _trapezoid_duhamel(setup, run, a, T, stride=2) if (len(run.states) - 1) % 2 == 0 else full
            duhamel = {"method": "trapezoid", "D1": complex(full[0]), "D2": complex(full[1]),
                       "richardson": float(np.max(np.abs(full - half)) / 3)}
        elif quadrature == "discrete":
            b1, b2 = sys.discrete_duhamel(run, a)
            duhamel = {"method": "discrete", "D1": b1 - a[0], "D2": b2 - a[1]}
        else:
            raise InvalidInput(f"unknown quadrature {quadrature!r}")
        duhamel["direct_mismatch"] = float(max(abs(duhamel["D1"] - D1), abs(duhamel["D2"] - D2)))
    return DisplacementValue(complex(D1), complex(D2), D3, norms, duhamel)


# --------------------------------------------------------------------------
# transverse fixed point


@dataclass
class TransverseSolution:
    field: np.ndarray
    iterations: int
    contraction: float
    history: List[float]


def solve_transverse(setup: ReductionSetup, a1: complex, a2: complex, T: Optional[float] = None,
                     b: float = 0.0, tol: Optional[float] = None, guess: Optional[np.ndarray] = None,
                     max_iter: Optional[int] = None) -> TransverseSolution:
    """Picard iteration v <- R(Pi(Phi_T(c + v) - e^{TL}(c + v))) + b h with c the center part."""
    sys = setup.system
    T = setup.T_star if T is None else T
    tol = setup.picard_tol if tol is None else tol
    max_iter = setup.picard_max if max_iter is None else max_iter
    if max(abs(a1), abs(a2), abs(b)) > setup.smallness:
        raise InvalidInput(f"amplitudes exceed the smallness radius {setup.smallness}")
    if b != 0.0 and setup.kernel is None:
        raise InvalidInput("b is only meaningful with a kernel direction")
    shift = b * setup.kernel if b != 0.0 else sys.zeros()
    if a1 == 0 and a2 == 0 and b == 0.0:
        return TransverseSolution(sys.zeros(), 0, 0.0, [])
    c = sys.embed(a1, a2)
    v = guess.copy() if guess is not None else shift.copy()
    inv = _inverse(setup, T)
    if inv.condition > setup.cond_max:
        raise IllConditioned(f"deflated condition number {inv.condition:.2e} exceeds {setup.cond_max:.0e}")
    history: List[float] = []
    slow = 0
    ratio = 0.0
    for it in range(1, max_iter + 1):
        v0 = c + v
        vT = sys.evolve(v0, T).final
        N3 = sys.complement(vT - sys.linear(v0, T))
        new = sys.complement(sys.unpack(inv.solve(sys.pack(N3)))) + shift
        upd = sys.norm(new - v)
        v = new
        if history:
            ratio = upd / history[-1] if history[-1] > 0 else 0.0
            slow = slow + 1 if ratio >= 0.9 else 0
            if slow >= 3:
                raise NoContraction(f"contraction factor {ratio:.3f} for 3 consecutive iterations")
        history.append(upd)
        if upd < tol:
            return TransverseSolution(v, it, ratio, history)
    raise NoConvergence(f"Picard iteration stalled at update {history[-1]:.2e}", partial=v)


def reduced_maps(setup: ReductionSetup, a1: complex, a2: complex, mu: float, b: float = 0.0,
                 guess: Optional[np.ndarray] = None, tol: Optional[float] = None,
                 full: bool = False):
    """(N1, N2) at the transverse fixed point with T = T*(1 + mu).

    With ``full`` the transverse solution is returned as well.
    """
    T = setup.period(mu)
    sol = solve_transverse(setup, a1, a2, T, b, tol=tol, guess=guess)
    if a1 == 0 and a2 == 0 and b == 0.0:
        out = (0j, 0j)
    else:
        d = displacement(setup, a1, a2, sol.field, T)
        out = (d.D1, d.D2)
    return (out, sol) if full else out


class ReducedEvaluator:
    """Reduced maps as a plain residual (a1, a2, mu) -> (N1, N2) with warm
    starts for the Picard iteration and an optional scale."""

    def __init__(self, setup: ReductionSetup, scale: float = 1.0, tol: Optional[float] = None, b: float = 0.0):
        self.setup = setup
        self.scale = scale
        self.tol = tol
        self.b = b
        self.last: Optional[np.ndarray] = None
        self.evaluations = 0

    def __call__(self, a1, a2, mu):
        (n1, n2), sol = reduced_maps(self.setup, a1, a2, mu, self.b, guess=self.last, tol=self.tol, full=True)
        if sol.iterations:
            self.last = sol.field
        self.evaluations += 1
        return n1 / self.scale, n2 / self.scale


# --------------------------------------------------------------------------
# cubic coefficients


# The first five directions leave Gamma entangled with one combination of
# the spurious terms (rank 5 of 6); the relative phase pi/4 separates it.
FIT_DIRECTIONS: Tuple[Tuple[complex, complex], ...] = (
    (1, 0), (0, 1), (1, 1), (1, 1j), (1, -1), (1, complex(np.cos(np.pi / 4), np.sin(np.pi / 4))))
SPURIOUS = ("Upsilon1", "Lambda2", "Upsilon2", "Gamma2")


def _monomials(a1: complex, a2: complex) -> np.ndarray:
    """Rotation-equivariant cubic monomials of the first reduced map, in the
    order Lambda, Gamma, Upsilon1, Lambda2, Upsilon2, Gamma2."""
    c1, c2 = np.conj(a1), np.conj(a2)
    return np.array([a1 * abs(a1) ** 2, a1 * abs(a2) ** 2, a1 * a1 * a2,
                     c2 * abs(a1) ** 2, c1 * c2 * c2, c2 * abs(a2) ** 2])


def regression_matrix(directions: Sequence[Tuple[complex, complex]] = FIT_DIRECTIONS) -> np.ndarray:
    """Rows (N1 then N2 for each direction); N2 is N1 with the arguments swapped."""
    rows = []
    for d1, d2 in directions:
        rows.append(_monomials(d1, d2))
        rows.append(_monomials(d2, d1))
    return np.array(rows)


@dataclass
class CoefficientFit:
    kappa: float
    chi: float
    Lambda: complex
    Gamma: complex
    residual: float
    spurious: Dict[str, float]
    sample_radius: float
    threshold: float
    condition: float
    quintic_ratio: float
    linear_terms: List[float] = field(default_factory=list)
    evaluations: int = 0

    def coefficients(self) -> CubicCoefficients:
        return CubicCoefficients(self.kappa, self.chi, self.Lambda, self.Gamma)

    @property
    def spurious_bound(self) -> float:
        return self.threshold * max(abs(self.Lambda), abs(self.Gamma))

    @property
    def spurious_ok(self) -> bool:
        return all(v <= self.spurious_bound for v in self.spurious.values())

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "chi": self.chi,
            "Lambda": [self.Lambda.real, self.Lambda.imag],
            "Gamma": [self.Gamma.real, self.Gamma.imag],
            "residual": self.residual,
            "spurious": dict(self.spurious),
            "spurious_ok": self.spurious_ok,
            "sample_radius": self.sample_radius,
            "threshold": self.threshold,
            "condition": self.condition,
            "quintic_ratio": self.quintic_ratio,
            "max_linear_term": max(self.linear_terms, default=0.0),
            "evaluations": self.evaluations,
        }


def kappa_chi(system: ReductionSystem) -> Tuple[float, float]:
    """kappa = 2 k* pi gamma'(0) / omega(0) and chi = 2 k* pi."""
    chi = 2 * np.pi * system.k_star
    return chi * system.gamma_prime / system.omega0, chi


def fit_coefficients(setup: ReductionSetup, sample_radius: float = 0.05, n_samples: int = 4,
                     threshold: float = 1e-3, picard_tol: float = 1e-13, max_halvings: int = 4,
                     quintic_limit: float = 0.1) -> CoefficientFit:
    """Least-squares fit of the cubic coefficients of the reduced maps at mu = 0.

    Along each direction d the maps are odd in t (rotation by pi/k*), so
    N(t d) = c1 t + c3 t^3 + c5 t^5 is fitted over t_j = radius j / n; the
    cubic parts c3(d) of both maps are then regressed on the six
    equivariant monomials.  The radius is halved while the quintic part
    exceeds ``quintic_limit`` of the cubic one at the largest sample.
    """
    if n_samples < 2:
        raise InvalidInput("need at least two radii per direction")
    kappa, chi = kappa_chi(setup.system)
    if not (np.isfinite(kappa) and kappa != 0):
        raise InvalidInput("kappa needs gamma'(0) and omega(0) from the crossing")
    A = regression_matrix()
    cond = float(np.linalg.cond(A))
    if cond > 1e8:
        raise FitDegenerate(f"regression matrix condition {cond:.2e} exceeds 1e8")
    radius = float(sample_radius)
    evaluations = 0
    for _ in range(max_halvings + 1):
        ts = radius * np.arange(1, n_samples + 1) / n_samples
        powers = [1, 3, 5] if n_samples >= 3 else [1, 3]
        V = np.array([[t ** p for p in powers] for t in ts])
        c3, c1, quint = [], [], 0.0
        for d1, d2 in FIT_DIRECTIONS:
            ev = ReducedEvaluator(setup, tol=picard_tol)
            vals = np.array([ev(t * d1, t * d2, 0.0) for t in ts])
            evaluations += ev.evaluations
            coef, *_ = np.linalg.lstsq(V, vals, rcond=None)
            c1.extend(np.abs(coef[0]).tolist())
            c3.extend(coef[1].tolist())
            if len(powers) == 3:
                q = np.abs(coef[2]) * ts[-1] ** 2 / np.maximum(np.abs(coef[1]), 1e-300)
                # only meaningful where the cubic signal is present
                sig = np.abs(coef[1]) > 1e-3 * max(np.max(np.abs(coef[1])), 1e-300)
                quint = max(quint, float(np.max(np.where(sig, q, 0.0))))
        if quint <= quintic_limit:
            break
        radius /= 2
    c3 = np.array(c3)
    X, *_ = np.linalg.lstsq(A, c3, rcond=None)
    misfit = float(np.linalg.norm(A @ X - c3) / max(np.linalg.norm(c3), 1e-300))
    spurious = {name: float(abs(x)) for name, x in zip(SPURIOUS, X[2:])}
    return CoefficientFit(kappa, chi, complex(X[0]), complex(X[1]), misfit, spurious, radius,
                          threshold, cond, quint, c1, evaluations)


# --------------------------------------------------------------------------
# periodic orbits


@dataclass
class OrbitCheck:
    return_residual: float
    traveling_speed: Optional[float] = None
    shift_residual: Optional[float] = None
    unshifted_residual: Optional[float] = None
    shifts: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "return_residual": self.return_residual,
            "traveling_speed": self.traveling_speed,
            "shift_residual": self.shift_residual,
            "unshifted_residual": self.unshifted_residual,
            "shifts": list(self.shifts),
        }


def _best_shift(sys: ReductionSystem, target: np.ndarray, v0: np.ndarray, n_grid: int = 256) -> Tuple[float, float]:
    thetas = 2 * np.pi * np.arange(n_grid) / n_grid
    f = lambda th: sys.norm(target - sys.rotate(v0, th))
    vals = [f(th) for th in thetas]
    j = int(np.argmin(vals))
    step = 2 * np.pi / n_grid
    res = minimize_scalar(f, bounds=(thetas[j] - step, thetas[j] + step), method="bounded",
                          options={"xatol": 1e-12})
    theta = float(res.x) if res.fun <= vals[j] else float(thetas[j])
    theta = (theta + np.pi) % (2 * np.pi) - np.pi
    return theta, float(min(res.fun, vals[j]))


def verify_orbit(setup: ReductionSetup, v0: np.ndarray, T: float, kind: Optional[BranchKind] = None) -> OrbitCheck:
    """Return residual of the orbit and, for nontrivial candidates, the best
    x2-shift match at T/4, T/2 and 3T/4.

    With v(t) = R(theta(t)) v0 for a wave moving in x2, the speed is
    d = theta / t (positive for the first traveling kind).
    """
    sys = setup.system
    n0 = sys.norm(v0)
    if n0 == 0.0:
        return OrbitCheck(0.0)
    run = time_T_map(setup, v0, T, record=True)
    ret = sys.norm(run.final - v0) / n0
    if kind is None or kind == BranchKind.TRIVIAL:
        return OrbitCheck(float(ret))
    nsteps = len(run.states) - 1
    idx = [nsteps // 4, nsteps // 2, 3 * nsteps // 4]
    times = [run.times[i] for i in idx]
    thetas, shifted, plain = [], [], []
    for i in idx:
        th, r = _best_shift(sys, run.states[i], v0)
        thetas.append(th)
        shifted.append(r / n0)
        plain.append(sys.norm(run.states[i] - v0) / n0)
    # unwrap towards multiples of the first shift
    unwrapped = [thetas[0]]
    for j, th in enumerate(thetas[1:], start=2):
        guess = j * thetas[0]
        unwrapped.append(th + 2 * np.pi * round((guess - th) / (2 * np.pi)))
    t = np.array(times)
    d = float(np.dot(unwrapped, t) / np.dot(t, t))
    speed = d if kind in (BranchKind.TRAVELING1, BranchKind.TRAVELING2) else None
    return OrbitCheck(float(ret), speed, float(max(shifted)), float(max(plain)), [float(x) for x in unwrapped])


@dataclass
class OrbitRecord:
    eps: float
    kind: BranchKind
    amplitude: float
    a1: complex
    a2: complex
    mu: float
    T: float
    converged: bool
    check: Optional[OrbitCheck] = None
    iterations: int = 0
    message: str = ""
    coefficients: Optional[dict] = None
    omega: float = float("nan")
    v0: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = {
            "eps": self.eps,
            "kind": self.kind.value,
            "amplitude": self.amplitude,
            "a1": [self.a1.real, self.a1.imag],
            "a2": [self.a2.real, self.a2.imag],
            "mu": self.mu,
            "T": self.T,
            "omega": self.omega,
            "converged": self.converged,
            "iterations": self.iterations,
            "message": self.message,
            "coefficients": self.coefficients,
        }
        if self.check is not None:
            out.update(self.check.to_dict())
        return out


_KIND_ORDER = {BranchKind.TRIVIAL: 0, BranchKind.TRAVELING1: 1, BranchKind.TRAVELING2: 2, BranchKind.STANDING: 3}


def locate_periodic_orbits(setup_family: Callable[[float], ReductionSetup], eps_list: Sequence[float],
                           coeffs: CubicCoefficients, newton_tol: float = 1e-8, max_iter: int = 20,
                           picard_tol: float = 1e-13, kinds: Optional[Sequence[BranchKind]] = None,
                           verify: bool = True, fd_step: float = 1e-6) -> List[OrbitRecord]:
    """Periodic orbits of the full time-T map near each eps.

    The cubic system predicts (a~, mu~); after a = sqrt|eps| a~ and
    mu = eps mu~ the prediction is corrected by phase-pinned Newton on the
    reduced maps divided by |eps|^{3/2}.  Failures are recorded, not raised.
    """
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise InvalidInput("eps list is empty")
    if any(e == 0.0 for e in eps_list):
        raise InvalidInput("eps must be non-zero")
    report = check_genericity(coeffs)
    if not report.generic:
        raise GenericityViolation(f"nondegeneracy fails: {', '.join(report.failures())}")
    records: List[OrbitRecord] = []
    for eps in eps_list:
        sign = 1 if eps > 0 else -1
        branches = solve_cubic_equilibria(coeffs, sign)
        setup = setup_family(eps)
        sys = setup.system
        root = math.sqrt(abs(eps))
        for br in branches:
            if kinds is not None and br.kind not in kinds and br.kind != BranchKind.TRIVIAL:
                continue
            if br.kind == BranchKind.TRIVIAL:
                rec = OrbitRecord(eps, br.kind, 0.0, 0j, 0j, 0.0, setup.T_star, True,
                                  OrbitCheck(0.0) if verify else None, coefficients=coeffs.to_dict(),
                                  omega=setup.omega, v0=sys.zeros())
                records.append(rec)
                continue
            p = br.point()
            seed = ReducedPoint(p.a1 * root, p.a2 * root, p.mu_tilde * eps, sign, root)
            ev = ReducedEvaluator(setup, scale=abs(eps) ** 1.5, tol=picard_tol)
            try:
                point, cert = newton_refine(ev, seed, tol=newton_tol, max_iter=max_iter,
                                            pin=pin_for_kind(br.kind), fd_step=fd_step)
            except (NoConvergence, SingularJacobian, NoContraction) as exc:
                records.append(OrbitRecord(eps, br.kind, float("nan"), seed.a1, seed.a2, seed.mu_tilde,
                                           setup.period(seed.mu_tilde), False, message=str(exc),
                                           coefficients=coeffs.to_dict(), omega=setup.omega))
                continue
            T = setup.period(point.mu_tilde)
            sol = solve_transverse(setup, point.a1, point.a2, T, tol=picard_tol, guess=ev.last)
            v0 = sys.embed(point.a1, point.a2) + sol.field
            check = verify_orbit(setup, v0, T, br.kind) if verify else None
            records.append(OrbitRecord(eps, br.kind, branch_amplitude(br.kind, point.a1, point.a2),
                                       point.a1, point.a2, point.mu_tilde, T, True, check,
                                       cert.iterations, coefficients=coeffs.to_dict(), omega=setup.omega,
                                       v0=v0))
    records.sort(key=lambda r: (r.eps, _KIND_ORDER[r.kind]))
    return records
