"""A six-dimensional ODE whose time-T map has prescribed cubic coefficients.

State (z1, z2, y1, y2) with z complex and y real, stored as the real
vector (Re z1, Im z1, Re z2, Im z2, y1, y2):

    z1' = lam z1 + c1 z1|z1|^2 + c2 z1|z2|^2 + alpha1 z1 y1 + alpha2 z1 y2
    z2' = lam z2 + c1 z2|z2|^2 + c2 z2|z1|^2 + alpha1 z2 y1 + alpha2 z2 y2
    y1' = -d1 y1 + beta1 (|z1|^2 + |z2|^2)
    y2' = -d2 y2 + beta2 Re(z1 z2)

with lam = gamma' eps + i omega.  The system commutes with
(z1, z2) -> (e^{i theta} z1, e^{-i theta} z2) and with the swap z1 <-> z2.
On the periodic orbit of the damped modes y1 = beta1 (|z1|^2 + |z2|^2)/d1,
while the y2 terms only produce non-resonant cubic terms, so over one
period T0 = 2 pi / omega the displacement of z1 has cubic part
T0 (c1 + alpha1 beta1 / d1) z1|z1|^2 + T0 (c2 + alpha1 beta1 / d1) z1|z2|^2.
The constructor solves these relations for c1, c2 given Lambda, Gamma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import InvalidInput, BlowUp
from .reduction import ReductionSetup, ReductionSystem, Run, make_setup


@dataclass(frozen=True)
class SyntheticParams:
    Lambda: complex = -1.0 + 0.3j
    Gamma: complex = -2.0 - 0.1j
    omega: float = 1.0
    gamma_prime: float = 1.0 / (2 * np.pi)
    d1: float = 3.0
    d2: float = 4.0
    beta1: float = 1.0
    beta2: float = 1.0
    alpha1: float = 0.5
    alpha2: float = 0.8
    steps_per_period: int = 400

    def __post_init__(self):
        if self.d1 <= 0 or self.d2 <= 0:
            raise InvalidInput("damping rates must be positive")
        if self.omega <= 0:
            raise InvalidInput("omega must be positive")
        if self.steps_per_period < 4 or self.steps_per_period % 4:
            raise InvalidInput("steps_per_period must be a positive multiple of 4")

    @property
    def T0(self) -> float:
        return 2 * np.pi / self.omega

    @property
    def kappa(self) -> float:
        return self.gamma_prime * self.T0

    @property
    def chi(self) -> float:
        return 2 * np.pi

    def cubic_rates(self) -> Tuple[complex, complex]:
        shift = self.alpha1 * self.beta1 / self.d1
        return complex(self.Lambda) / self.T0 - shift, complex(self.Gamma) / self.T0 - shift

    def to_dict(self) -> Dict[str, object]:
        out = {}
        for k, v in vars(self).items():
            out[k] = [v.real, v.imag] if isinstance(v, complex) else v
        return out


def _rk4_poly(z):
    return 1 + z + z * z / 2 + z ** 3 / 6 + z ** 4 / 24


class SyntheticSystem(ReductionSystem):
    """The ODE above at parameter ``eps``, integrated with classical RK4."""

    k_star = 1

    def __init__(self, params: Optional[SyntheticParams] = None, eps: float = 0.0, linear: bool = False):
        self.params = p = params or SyntheticParams()
        self.eps = float(eps)
        self.linear_only = linear
        self.lam_plus = complex(p.gamma_prime * eps, p.omega)
        self.omega0 = p.omega
        self.gamma_prime = p.gamma_prime
        self.c1, self.c2 = (0j, 0j) if linear else p.cubic_rates()
        lam = self.lam_plus
        L = np.zeros((6, 6))
        for i in (0, 2):
            L[i:i + 2, i:i + 2] = [[lam.real, -lam.imag], [lam.imag, lam.real]]
        L[4, 4] = -p.d1
        L[5, 5] = -p.d2
        self.L = L
        self._prop: Dict[Tuple[float, int], np.ndarray] = {}

    def steps(self, T):
        p = self.params
        n = max(4, int(math.ceil(p.steps_per_period * T / p.T0 - 1e-9)))
        return 4 * int(math.ceil(n / 4))

    def zeros(self):
        return np.zeros(6)

    # right-hand side with scalar complex arithmetic

    def _rhs(self, x):
        z1 = complex(x[0], x[1])
        z2 = complex(x[2], x[3])
        y1, y2 = x[4], x[5]
        s1 = z1.real * z1.real + z1.imag * z1.imag
        s2 = z2.real * z2.real + z2.imag * z2.imag
        lam = self.lam_plus
        q = self.params
        if self.linear_only:
            f1, f2 = lam * z1, lam * z2
            g1, g2 = -q.d1 * y1, -q.d2 * y2
        else:
            mod = q.alpha1 * y1 + q.alpha2 * y2
            f1 = z1 * (lam + self.c1 * s1 + self.c2 * s2 + mod)
            f2 = z2 * (lam + self.c1 * s2 + self.c2 * s1 + mod)
            g1 = -q.d1 * y1 + q.beta1 * (s1 + s2)
            g2 = -q.d2 * y2 + q.beta2 * (z1 * z2).real
        return np.array([f1.real, f1.imag, f2.real, f2.imag, g1, g2])

    def evolve(self, v, T, record=False):
        v = np.asarray(v, dtype=float)
        if T == 0:
            return Run(v.copy(), np.array([0.0]), [v.copy()] if record else [], 0.0)
        n = self.steps(T)
        dt = T / n
        x = v.copy()
        states = [x.copy()] if record else []
        f = self._rhs
        for _ in range(n):
            k1 = f(x)
            k2 = f(x + 0.5 * dt * k1)
            k3 = f(x + 0.5 * dt * k2)
            k4 = f(x + dt * k3)
            x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if record:
                states.append(x.copy())
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e6:
            raise BlowUp("synthetic trajectory blew up")
        times = np.linspace(0.0, T, n + 1) if record else np.array([0.0, T])
        return Run(x, times, states, dt)

    def propagator(self, T) -> np.ndarray:
        n = self.steps(T)
        key = (float(T), n)
        if key not in self._prop:
            Z = self.L * (T / n)
            R = np.eye(6) + Z + Z @ Z / 2 + Z @ Z @ Z / 6 + Z @ Z @ Z @ Z / 24
            self._prop = {key: np.linalg.matrix_power(R, n)}
        return self._prop[key]

    def linear(self, v, T):
        if T == 0:
            return np.array(v, dtype=float)
        return self.propagator(T) @ v

    def nonlinear(self, v):
        return self._rhs(v) - self.L @ v

    def coords(self, v):
        return complex(v[0], v[1]), complex(v[2], v[3])

    def embed(self, a1, a2):
        a1, a2 = complex(a1), complex(a2)
        return np.array([a1.real, a1.imag, a2.real, a2.imag, 0.0, 0.0])

    def complement(self, v):
        out = np.array(v, dtype=float).copy()
        out[:4] = 0.0
        return out

    def inner(self, u, v):
        return float(np.dot(u, v))

    def rotate(self, v, theta):
        z1, z2 = self.coords(v)
        out = np.array(v, dtype=float).copy()
        out[:4] = self.embed(z1 * np.exp(1j * theta), z2 * np.exp(-1j * theta))[:4]
        return out

    def reflect(self, v):
        return np.array([v[2], v[3], v[0], v[1], v[4], v[5]], dtype=float)

    def reality_defect(self, v):
        return float(np.max(np.abs(np.imag(v)), initial=0.0))

    def phase(self, T):
        n = self.steps(T)
        return n * float(np.angle(_rk4_poly(self.lam_plus * T / n)))

    def multiplier(self, T):
        n = self.steps(T)
        return complex(_rk4_poly(self.lam_plus * T / n) ** n)

    def blocks(self, T):
        P = np.diag([0.0, 0, 0, 0, 1, 1])
        return [P @ (np.eye(6) - self.propagator(T)) @ P]

    def structural(self):
        return [4]

    def pack(self, v):
        return [np.asarray(v, dtype=float)]

    def unpack(self, parts):
        return np.real(parts[0]).astype(float)


def synthetic_setup(params: Optional[SyntheticParams] = None, eps: float = 0.0, linear: bool = False,
                    **tolerances) -> ReductionSetup:
    return make_setup(SyntheticSystem(params, eps, linear), with_kernel=False, **tolerances)
