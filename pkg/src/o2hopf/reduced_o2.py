"""Analysis of the reduced four-dimensional O(2) bifurcation system.

The truncated system in rescaled variables reads

    F1 = a1 (kappa*s + i*chi*mu + Lambda |a1|^2 + Gamma |a2|^2)
    F2 = a2 (kappa*s + i*chi*mu + Lambda |a2|^2 + Gamma |a1|^2)

with s = sgn(eps).  This module provides its closed-form equilibria, the
nondegeneracy report, determinants of the real Jacobians at each branch,
a phase-pinned Newton corrector usable on any residual with the same
signature, and a simple natural-parameter continuation in eps.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    BranchMismatch,
    GenericityViolation,
    InvalidInput,
    NoConvergence,
    SingularJacobian,
)

Residual = Callable[[complex, complex, float], Tuple[complex, complex]]


@dataclass(frozen=True)
class CubicCoefficients:
    kappa: float
    chi: float
    Lambda: complex
    Gamma: complex

    def __post_init__(self):
        for name in ("kappa", "chi"):
            value = getattr(self, name)
            if not np.isfinite(value) or value == 0.0:
                raise InvalidInput(f"{name} must be a finite non-zero real, got {value!r}")
        for name in ("Lambda", "Gamma"):
            if not np.isfinite(complex(getattr(self, name))):
                raise InvalidInput(f"{name} must be finite")
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "chi", float(self.chi))
        object.__setattr__(self, "Lambda", complex(self.Lambda))
        object.__setattr__(self, "Gamma", complex(self.Gamma))

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "chi": self.chi,
            "Lambda": [self.Lambda.real, self.Lambda.imag],
            "Gamma": [self.Gamma.real, self.Gamma.imag],
        }


@dataclass(frozen=True)
class ReducedPoint:
    a1: complex
    a2: complex
    mu_tilde: float
    sign_eps: int = 1
    sqrt_eps: float = 0.0

    def __post_init__(self):
        if self.sign_eps not in (-1, 1):
            raise InvalidInput("sign_eps must be -1 or +1")
        if not self.sqrt_eps >= 0.0:
            raise InvalidInput("sqrt_eps must be non-negative")
        object.__setattr__(self, "a1", complex(self.a1))
        object.__setattr__(self, "a2", complex(self.a2))
        object.__setattr__(self, "mu_tilde", float(self.mu_tilde))

    def to_dict(self) -> dict:
        return {
            "a1": [self.a1.real, self.a1.imag],
            "a2": [self.a2.real, self.a2.imag],
            "mu_tilde": self.mu_tilde,
            "sign_eps": self.sign_eps,
            "sqrt_eps": self.sqrt_eps,
        }


class BranchKind(str, enum.Enum):
    TRIVIAL = "Trivial"
    TRAVELING1 = "Traveling1"
    TRAVELING2 = "Traveling2"
    STANDING = "Standing"


class Criticality(str, enum.Enum):
    SUPERCRITICAL = "Supercritical"
    SUBCRITICAL = "Subcritical"


@dataclass(frozen=True)
class EquilibriumBranch:
    """One equilibrium family of the truncated system.

    ``criticality`` is None for the trivial branch, which exists on both
    sides of the crossing.  Standing branches are stored at theta = 0;
    the whole family is (a, e^{i theta} a).
    """

    kind: BranchKind
    amplitude: float
    mu_star: float
    criticality: Optional[Criticality]
    sign_eps: int = 1
    theta: float = 0.0

    def __post_init__(self):
        if self.kind == BranchKind.TRIVIAL and self.amplitude != 0.0:
            raise InvalidInput("trivial branch must have zero amplitude")
        if self.kind != BranchKind.TRIVIAL and not self.amplitude > 0.0:
            raise InvalidInput("nontrivial branch must have positive amplitude")

    def point(self) -> ReducedPoint:
        a = self.amplitude
        if self.kind == BranchKind.TRAVELING1:
            a1, a2 = a, 0.0
        elif self.kind == BranchKind.TRAVELING2:
            a1, a2 = 0.0, a
        elif self.kind == BranchKind.STANDING:
            a1, a2 = a, a * np.exp(1j * self.theta)
        else:
            a1, a2 = 0.0, 0.0
        return ReducedPoint(a1, a2, self.mu_star, self.sign_eps, 0.0)

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind.value,
            "amplitude": self.amplitude,
            "mu_star": self.mu_star,
            "criticality": None if self.criticality is None else self.criticality.value,
            "sign_eps": self.sign_eps,
        }
        if self.kind == BranchKind.STANDING:
            out["theta"] = self.theta
            out["orbit"] = "a2 = exp(i*theta)*a1 for all theta"
        return out


# --------------------------------------------------------------------------
# evaluation


def evaluate_truncated(coeffs: CubicCoefficients, p: ReducedPoint) -> Tuple[complex, complex]:
    return truncated_residual(coeffs, p.sign_eps)(p.a1, p.a2, p.mu_tilde)


def truncated_residual(coeffs: CubicCoefficients, sign_eps: int) -> Residual:
    """Residual callback (a1, a2, mu_tilde) -> (F1, F2) of the truncated system."""
    k, chi, lam, gam = coeffs.kappa, coeffs.chi, coeffs.Lambda, coeffs.Gamma
    s = float(sign_eps)

    def residual(a1, a2, mu):
        m1 = abs(a1) ** 2
        m2 = abs(a2) ** 2
        base = k * s + 1j * chi * mu
        return a1 * (base + lam * m1 + gam * m2), a2 * (base + lam * m2 + gam * m1)

    return residual


def truncated_family(coeffs: CubicCoefficients) -> Callable[[float], Residual]:
    """Unrescaled truncated system a1 (kappa eps + i chi mu + ...), indexed by eps."""
    k, chi, lam, gam = coeffs.kappa, coeffs.chi, coeffs.Lambda, coeffs.Gamma

    def at(eps):
        def residual(a1, a2, mu):
            m1 = abs(a1) ** 2
            m2 = abs(a2) ** 2
            base = k * eps + 1j * chi * mu
            return a1 * (base + lam * m1 + gam * m2), a2 * (base + lam * m2 + gam * m1)

        return residual

    return at


def _real_jacobian(coeffs: CubicCoefficients, sign_eps: int, a1: complex, a2: complex, mu: float):
    """Exact derivative of (Re F1, Im F1, Re F2, Im F2) with respect to
    (Re a1, Im a1, Re a2, Im a2, mu)."""
    k, chi, lam, gam = coeffs.kappa, coeffs.chi, coeffs.Lambda, coeffs.Gamma
    base = k * sign_eps + 1j * chi * mu
    m1, m2 = abs(a1) ** 2, abs(a2) ** 2
    b1 = base + lam * m1 + gam * m2
    b2 = base + lam * m2 + gam * m1
    x1, y1, x2, y2 = a1.real, a1.imag, a2.real, a2.imag
    dF1 = [
        b1 + a1 * lam * 2 * x1,
        1j * b1 + a1 * lam * 2 * y1,
        a1 * gam * 2 * x2,
        a1 * gam * 2 * y2,
        a1 * 1j * chi,
    ]
    dF2 = [
        a2 * gam * 2 * x1,
        a2 * gam * 2 * y1,
        b2 + a2 * lam * 2 * x2,
        1j * b2 + a2 * lam * 2 * y2,
        a2 * 1j * chi,
    ]
    jac = np.empty((4, 5))
    jac[0] = [d.real for d in dF1]
    jac[1] = [d.imag for d in dF1]
    jac[2] = [d.real for d in dF2]
    jac[3] = [d.imag for d in dF2]
    return jac


# --------------------------------------------------------------------------
# genericity and equilibria


@dataclass(frozen=True)
class ConditionCheck:
    holds: bool
    margin: float


@dataclass(frozen=True)
class GenericityReport:
    lambda_ne_gamma: ConditionCheck
    re_sum_nonzero: ConditionCheck
    re_lambda_nonzero: ConditionCheck
    tolerance: float

    @property
    def generic(self) -> bool:
        return self.lambda_ne_gamma.holds and self.re_sum_nonzero.holds and self.re_lambda_nonzero.holds

    def failures(self) -> List[str]:
        return [
            name
            for name in ("lambda_ne_gamma", "re_sum_nonzero", "re_lambda_nonzero")
            if not getattr(self, name).holds
        ]

    def to_dict(self) -> dict:
        out = {}
        for name in ("lambda_ne_gamma", "re_sum_nonzero", "re_lambda_nonzero"):
            c = getattr(self, name)
            out[name] = {"holds": c.holds, "margin": c.margin}
        out["tolerance"] = self.tolerance
        return out


def check_genericity(coeffs: CubicCoefficients, tol: float = 1e-10) -> GenericityReport:
    lam, gam = coeffs.Lambda, coeffs.Gamma
    margins = (abs(lam - gam), abs((lam + gam).real), abs(lam.real))
    checks = [ConditionCheck(bool(m > tol), float(m)) for m in margins]
    return GenericityReport(checks[0], checks[1], checks[2], tol)


def _criticality(coeffs: CubicCoefficients, m1: float, m2: float) -> Criticality:
    sgn = -(coeffs.Lambda.real * m1 + coeffs.Gamma.real * m2) / coeffs.kappa
    return Criticality.SUPERCRITICAL if sgn > 0 else Criticality.SUBCRITICAL


def solve_cubic_equilibria(
    coeffs: CubicCoefficients, sign_eps: int, tol: float = 1e-10
) -> List[EquilibriumBranch]:
    if sign_eps not in (-1, 1):
        raise InvalidInput("sign_eps must be -1 or +1")
    report = check_genericity(coeffs, tol)
    if not report.generic:
        raise GenericityViolation(f"nondegeneracy fails: {', '.join(report.failures())}")
    k, chi, lam, gam = coeffs.kappa, coeffs.chi, coeffs.Lambda, coeffs.Gamma
    branches = [EquilibriumBranch(BranchKind.TRIVIAL, 0.0, 0.0, None, sign_eps)]

    sq_trav = -k * sign_eps / lam.real
    if sq_trav > 0:
        mu_t = -lam.imag * sq_trav / chi
        crit = _criticality(coeffs, sq_trav, 0.0)
        amp = math.sqrt(sq_trav)
        branches.append(EquilibriumBranch(BranchKind.TRAVELING1, amp, mu_t, crit, sign_eps))
        branches.append(EquilibriumBranch(BranchKind.TRAVELING2, amp, mu_t, crit, sign_eps))

    total = lam + gam
    sq_stand = -k * sign_eps / total.real
    if sq_stand > 0:
        mu_s = -total.imag * sq_stand / chi
        crit = _criticality(coeffs, sq_stand, sq_stand)
        branches.append(
            EquilibriumBranch(BranchKind.STANDING, math.sqrt(sq_stand), mu_s, crit, sign_eps)
        )
    return branches


# --------------------------------------------------------------------------
# Jacobian determinants


@dataclass(frozen=True)
class JacobianRecord:
    kind: BranchKind
    numeric_det: float
    closed_form: float
    extra: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "numeric_det": self.numeric_det,
                "closed_form": self.closed_form, **self.extra}


# column indices in the real Jacobian
_COL = {"a1r": 0, "a1i": 1, "a2r": 2, "a2i": 3, "mu": 4}


def jacobian_at(
    coeffs: CubicCoefficients,
    branch: EquilibriumBranch,
    sign_eps: Optional[int] = None,
    tol: float = 1e-10,
) -> JacobianRecord:
    """Determinants of the real Jacobian in the coordinates used for each branch.

    Trivial: all four amplitude components.  Traveling: (a, mu, Re h, Im h)
    with the moving amplitude real.  Standing: the two three-row systems in
    (a1, mu, Re a2) with a1 = a2 real; the larger one is reported as
    ``numeric_det``.  The traveling closed form uses |Lambda - Gamma|^2.
    """
    s = branch.sign_eps if sign_eps is None else sign_eps
    p = branch.point()
    r1, r2 = truncated_residual(coeffs, s)(p.a1, p.a2, p.mu_tilde)
    scale = max(1.0, abs(coeffs.kappa), branch.amplitude ** 3 * (abs(coeffs.Lambda) + abs(coeffs.Gamma)))
    if max(abs(r1), abs(r2)) > tol * scale:
        raise BranchMismatch(f"point is not an equilibrium: residual {max(abs(r1), abs(r2)):.3e}")

    jac = _real_jacobian(coeffs, s, p.a1, p.a2, p.mu_tilde)
    chi, lam, gam = coeffs.chi, coeffs.Lambda, coeffs.Gamma

    if branch.kind == BranchKind.TRIVIAL:
        sub = jac[:, [0, 1, 2, 3]]
        closed = (coeffs.kappa ** 2 + chi ** 2 * p.mu_tilde ** 2) ** 2
        return JacobianRecord(branch.kind, float(np.linalg.det(sub)), float(closed))

    a = branch.amplitude
    if branch.kind in (BranchKind.TRAVELING1, BranchKind.TRAVELING2):
        if branch.kind == BranchKind.TRAVELING1:
            rows, cols = [0, 1, 2, 3], [0, 4, 2, 3]
        else:
            rows, cols = [2, 3, 0, 1], [2, 4, 0, 1]
        sub = jac[np.ix_(rows, cols)]
        closed = 2 * chi * lam.real * abs(lam - gam) ** 2 * a ** 7
        return JacobianRecord(
            branch.kind,
            float(np.linalg.det(sub)),
            float(closed),
            {"closed_form_complex_reading": [(2 * chi * lam.real * (lam - gam) * a ** 7).real,
                                             (2 * chi * lam.real * (lam - gam) * a ** 7).imag]},
        )

    cols = [0, 4, 2]
    j2 = float(np.linalg.det(jac[np.ix_([0, 1, 2], cols)]))
    j3 = float(np.linalg.det(jac[np.ix_([0, 1, 3], cols)]))
    c2 = 4 * chi * (lam.real + gam.real) * (lam.real - gam.real) * a ** 5
    c3 = 4 * chi * (lam.real + gam.real) * (lam.imag - gam.imag) * a ** 5
    if abs(j2) >= abs(j3):
        sel, num, closed = "J2", j2, c2
    else:
        sel, num, closed = "J3", j3, c3
    return JacobianRecord(
        branch.kind,
        num,
        float(closed),
        {"selected": sel, "numeric_j2": j2, "numeric_j3": j3, "closed_j2": float(c2), "closed_j3": float(c3)},
    )


# --------------------------------------------------------------------------
# Newton corrector


@dataclass(frozen=True)
class PinSpec:
    """Which real unknowns move and which residual rows are solved.

    Rows are (Re F1, Im F1, Re F2, Im F2); unknown names are a1r, a1i,
    a2r, a2i and mu.  Unknowns not listed stay at their seed values.
    """

    free: Tuple[str, ...]
    rows: Tuple[int, ...]


PIN_TRIVIAL = PinSpec(("a1r", "a1i", "a2r", "a2i"), (0, 1, 2, 3))
PIN_TRAVELING1 = PinSpec(("a1r", "a2r", "a2i", "mu"), (0, 1, 2, 3))
PIN_TRAVELING2 = PinSpec(("a1r", "a1i", "a2r", "mu"), (0, 1, 2, 3))
PIN_STANDING_J2 = PinSpec(("a1r", "mu", "a2r"), (0, 1, 2))
PIN_STANDING_J3 = PinSpec(("a1r", "mu", "a2r"), (0, 1, 3))


@dataclass
class NewtonCertificate:
    iterations: int
    residual: float
    full_residual: float
    history: List[float]
    quadratic_ratio: Optional[float]
    pin: PinSpec
    condition: float

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "residual": self.residual,
            "full_residual": self.full_residual,
            "history": list(self.history),
            "quadratic_ratio": self.quadratic_ratio,
            "free": list(self.pin.free),
            "rows": list(self.pin.rows),
            "condition": self.condition,
        }


def _unpack(x_full):
    return complex(x_full[0], x_full[1]), complex(x_full[2], x_full[3]), float(x_full[4])


def _rows(system: Residual, x_full) -> np.ndarray:
    f1, f2 = system(*_unpack(x_full))
    return np.array([f1.real, f1.imag, f2.real, f2.imag])


def _fd_jacobian(system, x_full, free_idx, base, steps, central):
    cols = []
    for i, h in zip(free_idx, steps):
        xp = x_full.copy()
        xp[i] += h
        fp = _rows(system, xp)
        if central:
            xm = x_full.copy()
            xm[i] -= h
            cols.append((fp - _rows(system, xm)) / (2 * h))
        else:
            cols.append((fp - base) / h)
    return np.array(cols).T


def default_pin(seed: ReducedPoint) -> PinSpec:
    small1 = abs(seed.a1) == 0.0
    small2 = abs(seed.a2) == 0.0
    if small1 and small2:
        return PIN_TRIVIAL
    if small2:
        return PIN_TRAVELING1
    if small1:
        return PIN_TRAVELING2
    return PIN_STANDING_J2


def newton_refine(
    system: Residual,
    seed: ReducedPoint,
    tol: float = 1e-12,
    max_iter: int = 50,
    pin: Optional[PinSpec] = None,
    cond_max: float = 1e12,
    fd_step: float = 1e-7,
    central: bool = True,
    slow_factor: float = 0.1,
    max_slow_steps: int = 4,
) -> Tuple[ReducedPoint, NewtonCertificate]:
    """Phase-pinned Newton iteration on a residual (a1, a2, mu) -> (F1, F2).

    The pinned phase is Im a1 = 0 (Im a2 = 0 for the second traveling kind,
    both for standing).  For standing seeds the three-row system with the
    larger Jacobian determinant at the seed is used unless ``pin`` is given.

    The iteration is a corrector: it raises NoConvergence when the residual
    does not drop below ``tol`` within ``max_iter`` steps, and also when it
    shrinks by less than ``slow_factor`` per step for ``max_slow_steps``
    consecutive steps (the seed is then outside the quadratic basin).
    """
    x = np.array([seed.a1.real, seed.a1.imag, seed.a2.real, seed.a2.imag, seed.mu_tilde])
    if pin is None:
        pin = default_pin(seed)
        if pin is PIN_STANDING_J2:
            x = _pin_phase(x, pin)
            pin = _pick_standing_rows(system, x, fd_step)
    x = _pin_phase(x, pin)
    free_idx = [_COL[n] for n in pin.free]
    rows = list(pin.rows)

    history: List[float] = []
    slow = 0
    cond = float("nan")
    for it in range(max_iter + 1):
        full = _rows(system, x)
        if not np.all(np.isfinite(full)):
            raise NoConvergence("residual is not finite", partial=x.copy())
        r = float(np.linalg.norm(full[rows]))
        history.append(r)
        if r <= tol:
            qr = None
            if len(history) >= 3 and history[-2] > 0 and history[-3] > 0:
                qr = history[-2] / history[-3] ** 2
            point = ReducedPoint(complex(x[0], x[1]), complex(x[2], x[3]), float(x[4]),
                                 seed.sign_eps, seed.sqrt_eps)
            return point, NewtonCertificate(it, r, float(np.linalg.norm(full)), history, qr, pin, cond)
        if it == max_iter:
            break
        if len(history) >= 2 and history[-1] > slow_factor * history[-2]:
            slow += 1
            if slow >= max_slow_steps:
                raise NoConvergence(
                    f"no superlinear convergence after {it} steps (residual {r:.3e})", partial=x.copy()
                )
        else:
            slow = 0
        steps = [fd_step * max(1.0, abs(x[i])) for i in free_idx]
        jac = _fd_jacobian(system, x, free_idx, full, steps, central)[rows]
        cond = float(np.linalg.cond(jac))
        if not np.isfinite(cond) or cond > cond_max:
            raise SingularJacobian(f"pinned Jacobian condition number {cond:.3e} exceeds {cond_max:.1e}")
        dx = np.linalg.solve(jac, -full[rows])
        x[free_idx] += dx
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e12:
            raise NoConvergence("iterate diverged", partial=x.copy())
    raise NoConvergence(f"no convergence in {max_iter} iterations (residual {history[-1]:.3e})",
                        partial=x.copy())


def _pin_phase(x, pin):
    """Rotate the seed onto the pinned slice Im a1 = 0 (Im a2 = 0 for the
    second traveling kind; both for standing, the theta = 0 representative)."""
    a1, a2 = complex(x[0], x[1]), complex(x[2], x[3])
    if pin in (PIN_TRAVELING1, PIN_STANDING_J2, PIN_STANDING_J3):
        theta = -np.angle(a1) if a1 != 0 else 0.0
        a1, a2 = a1 * np.exp(1j * theta), a2 * np.exp(-1j * theta)
        if pin is not PIN_TRAVELING1:
            a2 = complex(abs(a2), 0.0)
        a1 = complex(a1.real, 0.0)
    elif pin is PIN_TRAVELING2:
        theta = np.angle(a2) if a2 != 0 else 0.0
        a1, a2 = a1 * np.exp(1j * theta), a2 * np.exp(-1j * theta)
        a2 = complex(a2.real, 0.0)
    return np.array([a1.real, a1.imag, a2.real, a2.imag, x[4]])


def _pick_standing_rows(system, x, fd_step):
    free_idx = [_COL[n] for n in PIN_STANDING_J2.free]
    base = _rows(system, x)
    steps = [fd_step * max(1.0, abs(x[i])) for i in free_idx]
    jac = _fd_jacobian(system, x, free_idx, base, steps, True)
    d2 = abs(np.linalg.det(jac[[0, 1, 2]]))
    d3 = abs(np.linalg.det(jac[[0, 1, 3]]))
    return PIN_STANDING_J2 if d2 >= d3 else PIN_STANDING_J3


def pin_for_kind(kind: BranchKind) -> Optional[PinSpec]:
    return {
        BranchKind.TRIVIAL: PIN_TRIVIAL,
        BranchKind.TRAVELING1: PIN_TRAVELING1,
        BranchKind.TRAVELING2: PIN_TRAVELING2,
        BranchKind.STANDING: None,
    }[kind]


# --------------------------------------------------------------------------
# continuation


@dataclass
class BranchSample:
    eps: float
    amplitude: float
    mu: float
    a1: complex
    a2: complex
    converged: bool
    iterations: int = 0
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "amplitude": self.amplitude,
            "mu": self.mu,
            "a1": [self.a1.real, self.a1.imag],
            "a2": [self.a2.real, self.a2.imag],
            "converged": self.converged,
            "iterations": self.iterations,
            "message": self.message,
        }


@dataclass
class BifurcationBranch:
    kind: BranchKind
    criticality: Optional[Criticality]
    samples: List[BranchSample]
    exponent: Optional[float]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "criticality": None if self.criticality is None else self.criticality.value,
            "exponent": self.exponent,
            "samples": [s.to_dict() for s in self.samples],
        }


def branch_amplitude(kind: BranchKind, a1: complex, a2: complex) -> float:
    if kind == BranchKind.TRAVELING2:
        return abs(a2)
    return abs(a1)


def fit_exponent(eps: Sequence[float], amplitude: Sequence[float]) -> Optional[float]:
    e = np.abs(np.asarray(eps, dtype=float))
    a = np.asarray(amplitude, dtype=float)
    if len(e) < 2:
        return None
    slope, _ = np.polyfit(np.log(e), np.log(a), 1)
    return float(slope)


def continue_branch(
    system_family: Callable[[float], Residual],
    eps_grid: Sequence[float],
    kind: BranchKind,
    coeffs: CubicCoefficients,
    tol: float = 1e-12,
    max_iter: int = 50,
) -> BifurcationBranch:
    """Follow one branch over ``eps_grid`` with the cubic closed form as predictor.

    ``system_family(eps)`` returns a residual in unrescaled variables
    (a1, a2, mu).  The Newton tolerance is applied to the residual divided
    by |eps|^{3/2}, the natural scale of the cubic terms.  Grid points that
    fail are kept with ``converged=False``; the exponent is fitted from the
    converged ones.
    """
    eps_grid = [float(e) for e in eps_grid]
    if not eps_grid:
        raise InvalidInput("eps_grid is empty")
    signs = {int(np.sign(e)) for e in eps_grid}
    if 0 in signs or len(signs) != 1:
        raise InvalidInput("eps_grid must be non-zero and of one sign")
    if any(abs(b) < abs(a) for a, b in zip(eps_grid, eps_grid[1:])):
        raise InvalidInput("eps_grid must be sorted by magnitude")
    sign = signs.pop()
    branches = {b.kind: b for b in solve_cubic_equilibria(coeffs, sign)}
    if kind not in branches:
        raise InvalidInput(f"{kind.value} branch does not exist for sign(eps) = {sign}")
    pred = branches[kind]
    samples: List[BranchSample] = []
    for eps in eps_grid:
        root = math.sqrt(abs(eps))
        p = pred.point()
        seed = ReducedPoint(p.a1 * root, p.a2 * root, p.mu_tilde * eps, sign, root)
        scale = abs(eps) ** 1.5
        residual = system_family(eps)

        def scaled(a1, a2, mu, _r=residual, _s=scale):
            f1, f2 = _r(a1, a2, mu)
            return f1 / _s, f2 / _s

        try:
            point, cert = newton_refine(scaled, seed, tol=tol, max_iter=max_iter, pin=pin_for_kind(kind))
            samples.append(BranchSample(eps, branch_amplitude(kind, point.a1, point.a2), point.mu_tilde,
                                        point.a1, point.a2, True, cert.iterations))
        except (NoConvergence, SingularJacobian) as exc:
            samples.append(BranchSample(eps, float("nan"), float("nan"), seed.a1, seed.a2, False, 0, str(exc)))
    good = [s for s in samples if s.converged]
    exponent = fit_exponent([s.eps for s in good], [s.amplitude for s in good])
    return BifurcationBranch(kind, pred.criticality, samples, exponent)
