"""Control parameter lambda, its (Omega, kappa) map, and drive ramps.

Two frequency conventions appear here. ``josephson_frequency`` is the bare
harmonic formula 2 sqrt(kappa Omega) for H = Omega/2 phi^2 + 2 kappa n^2.
For the two-mode Hamiltonian -Omega Jx + 2 kappa Jz^2 the phase
representation has Jx ~ (N/2 - n^2/N) cos(phi), so the oscillator
parameters are (N Omega / 2, kappa + Omega / (2N)) and the small-oscillation
frequency is ``plasma_frequency`` = sqrt(Omega^2 + 2 N kappa Omega).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .bloch import squeezing_factors
from .errors import CalibrationError
from .two_mode import build_hamiltonian, ground_state


def josephson_frequency(omega: float, kappa: float) -> float:
    if omega < 0 or kappa < 0:
        raise ValueError("Omega and kappa must be non-negative")
    return 2.0 * math.sqrt(kappa * omega)


def phase_representation(omega: float, kappa: float, N: int) -> tuple[float, float]:
    """(tunneling, charging) coefficients of the harmonic phase/number model."""
    return N * omega / 2.0, kappa + omega / (2.0 * N)


def plasma_frequency(omega: float, kappa: float, N: int) -> float:
    """Josephson (plasma) frequency of -Omega Jx + 2 kappa Jz^2 in rad/ms."""
    return josephson_frequency(*phase_representation(omega, kappa, N))


def effective_oscillator_params(omega: float, kappa: float) -> tuple[float, float]:
    """(mass, spring) of H = Omega/2 phi^2 + 2 kappa n^2 with n as position."""
    if omega == 0:
        raise ValueError("Omega = 0 gives an infinite oscillator mass")
    if omega < 0 or kappa < 0:
        raise ValueError("Omega and kappa must be non-negative")
    return 1.0 / omega, 4.0 * kappa


@dataclass(frozen=True)
class SurrogateMap:
    """Omega(lam) = omega_ref exp(-decay (lam - lambda_ref) / lambda_ref), kappa fixed."""

    omega_ref: float
    kappa_ref: float
    lambda_ref: float
    decay: float = 10.0
    support: tuple[float, float] = (0.35, 1.4)
    kind: str = field(default="exponential-surrogate", init=False)

    def __post_init__(self):
        if not (self.omega_ref > 0 and self.kappa_ref > 0):
            raise ValueError("surrogate map needs positive Omega and kappa")
        if not self.decay > 0:
            raise ValueError("decay constant must be positive")
        lo, hi = self.support
        if not lo < self.lambda_ref < hi:
            raise ValueError("lambda_ref must lie inside the support")

    def contains(self, lam) -> bool:
        lam = np.asarray(lam)
        lo, hi = self.support
        return bool(np.all((lam >= lo - 1e-12) & (lam <= hi + 1e-12)))

    def omega(self, lam):
        return self.omega_ref * np.exp(-self.decay * (np.asarray(lam) - self.lambda_ref)
                                       / self.lambda_ref)

    def kappa(self, lam):
        return np.full(np.shape(lam), self.kappa_ref) if np.ndim(lam) else self.kappa_ref

    def d_omega(self, lam):
        return -self.decay / self.lambda_ref * self.omega(lam)

    def d_kappa(self, lam):
        return np.zeros(np.shape(lam)) if np.ndim(lam) else 0.0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "omega_ref": self.omega_ref,
                "kappa_ref": self.kappa_ref, "lambda_ref": self.lambda_ref,
                "decay": self.decay, "support": list(self.support)}


class TabulatedMap:
    """Monotone-cubic interpolation of sampled (lambda, Omega, kappa) data."""

    kind = "tabulated"

    def __init__(self, lam, omega, kappa):
        lam, omega, kappa = (np.asarray(a, dtype=float) for a in (lam, omega, kappa))
        if lam.ndim != 1 or lam.size < 2 or not (lam.shape == omega.shape == kappa.shape):
            raise ValueError("table needs at least two rows of (lambda, Omega, kappa)")
        if np.any(np.diff(lam) <= 0):
            raise ValueError("lambda column must be strictly increasing")
        if np.any(omega <= 0) or np.any(np.diff(omega) >= 0):
            raise ValueError("Omega must be positive and strictly decreasing in lambda")
        if np.any(kappa <= 0):
            raise ValueError("kappa must be positive")
        self.lam, self.omega_table, self.kappa_table = lam, omega, kappa
        self.support = (float(lam[0]), float(lam[-1]))
        self._om = PchipInterpolator(lam, omega, extrapolate=False)
        self._ka = PchipInterpolator(lam, kappa, extrapolate=False)
        self._dom = self._om.derivative()
        self._dka = self._ka.derivative()

    def contains(self, lam) -> bool:
        lam = np.asarray(lam)
        lo, hi = self.support
        return bool(np.all((lam >= lo - 1e-12) & (lam <= hi + 1e-12)))

    def _eval(self, fn, lam):
        lam = np.clip(lam, *self.support)
        out = fn(lam)
        return out if np.ndim(out) else float(out)

    def omega(self, lam):
        return self._eval(self._om, lam)

    def kappa(self, lam):
        return self._eval(self._ka, lam)

    def d_omega(self, lam):
        return self._eval(self._dom, lam)

    def d_kappa(self, lam):
        return self._eval(self._dka, lam)

    @classmethod
    def from_csv(cls, path) -> "TabulatedMap":
        data = np.genfromtxt(path, delimiter=",", names=True)
        names = [n.lower() for n in data.dtype.names]
        if len(names) < 3:
            raise ValueError("map CSV needs columns lambda, Omega, kappa")
        cols = [data[data.dtype.names[i]] for i in range(3)]
        return cls(*cols)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "omega", "kappa"])
            for row in zip(self.lam, self.omega_table, self.kappa_table):
                w.writerow([repr(float(v)) for v in row])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lambda": self.lam.tolist(),
                "omega": self.omega_table.tolist(), "kappa": self.kappa_table.tolist()}


def map_from_dict(d: dict):
    if d["kind"] == "tabulated":
        return TabulatedMap(d["lambda"], d["omega"], d["kappa"])
    return SurrogateMap(d["omega_ref"], d["kappa_ref"], d["lambda_ref"],
                        d.get("decay", 10.0), tuple(d.get("support", (0.35, 1.4))))


def ground_state_xi_s(ratio: float, N: int) -> float:
    """Coherent spin squeezing of the ground state at Lambda = N kappa / Omega."""
    state, _ = ground_state(build_hamiltonian(1.0, ratio / N, N))
    return squeezing_factors(state).xi_s


def solve_ratio(N: int, target_xi_s: float, max_ratio: float = 1e6) -> float:
    """Lambda = N kappa / Omega whose ground state has the requested xi_S."""
    if not 0 < target_xi_s < 1:
        raise CalibrationError(
            f"target xi_S = {target_xi_s} unreachable: the kappa -> 0 ground state "
            "already has xi_S = 1 and only kappa > 0 squeezes")
    lo, f_lo = 0.0, 1.0
    hi = 1.0
    f_hi = ground_state_xi_s(hi, N)
    while f_hi > target_xi_s:
        if f_hi >= f_lo or hi > max_ratio:
            raise CalibrationError(
                f"ground-state xi_S never drops to {target_xi_s} for N={N}")
        lo, f_lo = hi, f_hi
        hi *= 2.0
        f_hi = ground_state_xi_s(hi, N)
    return brentq(lambda r: ground_state_xi_s(r, N) - target_xi_s, lo, hi,
                  xtol=1e-14, rtol=1e-13)


def calibrate_map(N: int, target_fj_khz: float, target_xi_s: float,
                  lambda_ref: float, decay: float = 10.0,
                  support: tuple[float, float] = (0.35, 1.4)) -> SurrogateMap:
    """Surrogate map whose ground state at lambda_ref hits both targets.

    The ground-state xi_S fixes the ratio N kappa / Omega; the plasma
    frequency then fixes the overall scale.
    """
    if N < 2:
        raise CalibrationError("calibration needs N >= 2")
    if not target_fj_khz > 0:
        raise CalibrationError("target Josephson frequency must be positive")
    ratio = solve_ratio(N, target_xi_s)
    omega = 2 * math.pi * target_fj_khz / math.sqrt(1.0 + 2.0 * ratio)
    kappa = ratio * omega / N
    lmap = SurrogateMap(omega, kappa, lambda_ref, decay, tuple(support))
    state, _ = ground_state(build_hamiltonian(omega, kappa, N))
    xi = squeezing_factors(state).xi_s
    fj = plasma_frequency(omega, kappa, N) / (2 * math.pi)
    if abs(xi - target_xi_s) > 1e-6 * target_xi_s or abs(fj - target_fj_khz) > 1e-6 * target_fj_khz:
        raise CalibrationError(f"calibration residual too large (xi_S={xi}, f_J={fj})")
    return lmap


@dataclass(frozen=True)
class ControlRamp:
    """Control samples lambda_j at t0 + j dt_ctrl, linearly interpolated."""

    t0: float
    dt_ctrl: float
    samples: np.ndarray

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim != 1 or s.size < 2:
            raise ValueError("a ramp needs at least two samples")
        if not np.all(np.isfinite(s)):
            raise ValueError("ramp samples must be finite")
        if not self.dt_ctrl > 0:
            raise ValueError("dt_ctrl must be positive")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def T(self) -> float:
        return self.t0 + (self.samples.size - 1) * self.dt_ctrl

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.size) * self.dt_ctrl

    def __call__(self, t):
        return np.interp(t, self.times, self.samples)

    def with_samples(self, samples) -> "ControlRamp":
        return ControlRamp(self.t0, self.dt_ctrl, samples)

    def check_support(self, lambda_map) -> None:
        if not lambda_map.contains(self.samples):
            lo, hi = lambda_map.support
            raise ValueError(
                f"ramp leaves the map support [{lo}, {hi}]: "
                f"range [{self.samples.min()}, {self.samples.max()}]")

    def schedules(self, lambda_map):
        """(Omega(t), kappa(t)) callables for ``two_mode.evolve``."""
        return (lambda t: lambda_map.omega(self(t)),
                lambda t: lambda_map.kappa(self(t)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "lambda"])
            for t, lam in zip(self.times, self.samples):
                w.writerow([repr(float(t)), repr(float(lam))])

    @classmethod
    def from_csv(cls, path) -> "ControlRamp":
        data = np.genfromtxt(path, delimiter=",", names=True)
        t, lam = data["t"], data["lambda"]
        steps = np.diff(t)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
            raise ValueError("ramp CSV must be uniformly sampled")
        return cls(float(t[0]), float(steps[0]), lam)

    def to_dict(self) -> dict:
        return {"t0": self.t0, "dt_ctrl": self.dt_ctrl,
                "samples": [float(v) for v in self.samples]}

    @classmethod
    def from_dict(cls, d) -> "ControlRamp":
        return cls(float(d["t0"]), float(d["dt_ctrl"]), d["samples"])


def _grid(t_span, dt_ctrl) -> np.ndarray:
    t0, t1 = map(float, t_span)
    if not t1 > t0:
        raise ValueError("t_span must have positive length")
    n = max(int(round((t1 - t0) / dt_ctrl)), 1)
    return np.linspace(t0, t1, n + 1)


def parametric_drive(lambda0: float, amplitude: float, omega_drive: float,
                     t_span, dt_ctrl: float = 1e-3, lambda_map=None) -> ControlRamp:
    """lambda(t) = lambda0 (1 + amplitude sin(omega_drive t)), t from 0 at t_span[0]."""
    if amplitude < 0:
        raise ValueError("modulation amplitude must be non-negative")
    t = _grid(t_span, dt_ctrl)
    lam = lambda0 * (1.0 + amplitude * np.sin(omega_drive * (t - t[0])))
    ramp = ControlRamp(float(t[0]), float(t[1] - t[0]), lam)
    if lambda_map is not None:
        ramp.check_support(lambda_map)
    return ramp


def linear_ramp(lambda_start: float, lambda_end: float, t_span,
                dt_ctrl: float = 0.01) -> ControlRamp:
    t = _grid(t_span, dt_ctrl)
    return ControlRamp(float(t[0]), float(t[1] - t[0]),
                       np.linspace(lambda_start, lambda_end, t.size))
