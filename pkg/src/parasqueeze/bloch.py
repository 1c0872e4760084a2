"""Squeezing/coherence diagnostics and Bloch-sphere Husimi distributions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import gammaln, xlogy

from .errors import UndefinedPhaseError
from .two_mode import ManyBodyState, build_spin_operator, imbalance

ALPHA_FLOOR = 1e-12


def _amps(state) -> np.ndarray:
    if isinstance(state, ManyBodyState):
        return state.amplitudes
    return np.asarray(state, dtype=complex)


def spin_moments(states) -> dict:
    """First and second moments of Jx, Jy, Jz for one state or a stack of them.

    Works on arrays of shape (N+1,) or (T, N+1); each value in the returned
    dict has the leading shape of the input.
    """
    psi = _amps(states)
    N = psi.shape[-1] - 1
    n = imbalance(N)
    prob = np.abs(psi) ** 2
    jx_psi = build_spin_operator("Jx", N).apply(psi)
    jy_psi = build_spin_operator("Jy", N).apply(psi)
    jx = np.sum(psi.conj() * jx_psi, axis=-1).real
    jy = np.sum(psi.conj() * jy_psi, axis=-1).real
    jz = prob @ n
    jz2 = prob @ n**2
    jx2 = np.sum(np.abs(jx_psi) ** 2, axis=-1)
    jy2 = np.sum(np.abs(jy_psi) ** 2, axis=-1)
    jxy = 2 * np.sum(jx_psi.conj() * jy_psi, axis=-1).real
    return {
        "N": N, "jx": jx, "jy": jy, "jz": jz, "jz2": jz2, "jx2": jx2,
        "jy2": jy2, "jxy": jxy,
        "var_jz": np.maximum(jz2 - jz**2, 0.0),
        "var_jy": np.maximum(jy2 - jy**2, 0.0),
    }


def number_fluctuation(state) -> float:
    m = spin_moments(state)
    return float(np.sqrt(m["var_jz"]))


def coherence(state) -> float:
    m = spin_moments(state)
    return float(2.0 / m["N"] * math.hypot(m["jx"], m["jy"]))


def _phase_width(m):
    # Spread of the equatorial spin component perpendicular to the mean spin,
    # divided by the mean spin length; equals dJy/|<Jx>| when <Jy> = 0.
    length = np.hypot(m["jx"], m["jy"])
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(length > 0, m["jx"] / length, 1.0)
        s = np.where(length > 0, m["jy"] / length, 0.0)
        perp2 = s**2 * m["jx2"] + c**2 * m["jy2"] - s * c * m["jxy"]
        var_perp = np.maximum(perp2 - (c * m["jy"] - s * m["jx"]) ** 2, 0.0)
        return np.sqrt(var_perp) / length


def phase_fluctuation(state) -> float:
    """Linearized phase width; raises when the mean equatorial spin vanishes."""
    m = spin_moments(state)
    if 2.0 / m["N"] * math.hypot(m["jx"], m["jy"]) < ALPHA_FLOOR:
        raise UndefinedPhaseError("coherence is zero; relative phase undefined")
    return float(_phase_width(m))


def to_db(xi) -> np.ndarray | float:
    """Squeezing factor xi expressed as 10 log10(xi^2)."""
    return 10.0 * np.log10(np.square(xi))


@dataclass
class SqueezingReport:
    """Squeezing diagnostics for one state (floats) or a series (arrays)."""

    t: np.ndarray | float
    delta_n: np.ndarray | float
    delta_phi: np.ndarray | float
    xi_n: np.ndarray | float
    xi_phi: np.ndarray | float
    xi_s: np.ndarray | float
    alpha: np.ndarray | float
    energy: np.ndarray | float
    mean_jx: np.ndarray | float
    delta_jy: np.ndarray | float
    undefined_phase: np.ndarray | bool

    def robertson_margin(self):
        """dJz dJy - |<Jx>|/2; non-negative for every physical state."""
        return self.delta_n * self.delta_jy - 0.5 * np.abs(self.mean_jx)

    def xi_s_db(self):
        return to_db(self.xi_s)

    def to_csv(self, path) -> None:
        names = [f.name for f in fields(self)]
        cols = [np.atleast_1d(getattr(self, n)) for n in names]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            for row in zip(*cols):
                writer.writerow([repr(bool(v)) if isinstance(v, (bool, np.bool_))
                                 else repr(float(v)) for v in row])


def _report_from_moments(m, t, energy) -> SqueezingReport:
    N = m["N"]
    delta_n = np.sqrt(m["var_jz"])
    alpha = 2.0 / N * np.hypot(m["jx"], m["jy"])
    bad = alpha < ALPHA_FLOOR
    dphi = np.where(bad, np.nan, _phase_width(m))
    xi_n = delta_n / (math.sqrt(N) / 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi_s = np.where(bad, np.inf, xi_n / np.where(bad, 1.0, alpha))
    return SqueezingReport(
        t=t, delta_n=delta_n, delta_phi=dphi, xi_n=xi_n,
        xi_phi=dphi * math.sqrt(N), xi_s=xi_s, alpha=alpha, energy=energy,
        mean_jx=m["jx"], delta_jy=np.sqrt(m["var_jy"]), undefined_phase=bad)


def squeezing_factors(state, energy: float = float("nan")) -> SqueezingReport:
    """Scalar report for a single state."""
    t = state.time if isinstance(state, ManyBodyState) else 0.0
    rep = _report_from_moments(spin_moments(state), t, energy)
    for f in fields(rep):
        v = getattr(rep, f.name)
        if isinstance(v, np.ndarray):
            setattr(rep, f.name, v.item())
    rep.undefined_phase = bool(rep.undefined_phase)
    return rep


def squeezing_series(trajectory) -> SqueezingReport:
    """Report with one entry per stored sample of a ``Trajectory``."""
    return _report_from_moments(spin_moments(trajectory.states),
                                np.asarray(trajectory.times),
                                trajectory.energies())


@dataclass
class HusimiGrid:
    theta: np.ndarray
    phi: np.ndarray
    q: np.ndarray  # shape (len(theta), len(phi)), max normalized to 1

    def argmax(self) -> tuple[float, float]:
        i, j = np.unravel_index(np.argmax(self.q), self.q.shape)
        return float(self.theta[i]), float(self.phi[j])

    def integral(self) -> float:
        """Integral of Q over the sphere with the sin(theta) measure."""
        inner = trapezoid(self.q, self.phi, axis=1) if self.phi.size > 1 else self.q[:, 0]
        if self.theta.size < 2:
            return float(inner[0])
        return float(trapezoid(inner * np.sin(self.theta), self.theta))

    def save(self, path) -> None:
        """Plain-text matrix: rows theta, columns phi, with a header line."""
        header = (f"Husimi Q on the Bloch sphere; rows theta ({self.theta.size} "
                  f"values in [{self.theta[0]:.6g}, {self.theta[-1]:.6g}]), "
                  f"columns phi ({self.phi.size} values in "
                  f"[{self.phi[0]:.6g}, {self.phi[-1]:.6g}])")
        np.savetxt(path, self.q, header=header)


def coherent_amplitudes(N: int, theta: float, phi: float) -> np.ndarray:
    """Spin-coherent state pointing along (theta, phi); theta = 0 is all-left."""
    if not 0 <= theta <= math.pi:
        raise ValueError("theta must lie in [0, pi]")
    k = np.arange(N + 1)
    logb = 0.5 * (gammaln(N + 1) - gammaln(k + 1) - gammaln(N - k + 1))
    mag = np.exp(logb + xlogy(k, math.cos(theta / 2))
                 + xlogy(N - k, math.sin(theta / 2)))
    return mag * np.exp(-1j * imbalance(N) * phi)


def default_grid(n_theta: int = 181, n_phi: int = 361):
    return np.linspace(0, np.pi, n_theta), np.linspace(-np.pi, np.pi, n_phi)


def husimi(state, theta_grid=None, phi_grid=None) -> HusimiGrid:
    """Q(theta, phi) = |<theta, phi|psi>|^2 normalized to unit maximum."""
    if theta_grid is None and phi_grid is None:
        theta_grid, phi_grid = default_grid()
    theta = np.atleast_1d(np.asarray(theta_grid, dtype=float))
    phi = np.atleast_1d(np.asarray(phi_grid, dtype=float))
    if theta.size == 0 or phi.size == 0:
        raise ValueError("Husimi grid must be non-empty")
    psi = _amps(state)
    N = psi.size - 1
    k = np.arange(N + 1)
    logb = 0.5 * (gammaln(N + 1) - gammaln(k + 1) - gammaln(N - k + 1))
    c = np.cos(theta / 2)[:, None]
    s = np.sin(theta / 2)[:, None]
    # theta in [0, pi] keeps both half-angle factors non-negative
    mag = np.exp(logb + xlogy(k, np.abs(c)) + xlogy(N - k, np.abs(s)))
    phases = np.exp(1j * np.outer(imbalance(N), phi)) * psi[:, None]
    q = np.abs(mag @ phases) ** 2
    peak = q.max()
    if not peak > 0:
        raise ValueError("Husimi distribution vanishes on the whole grid")
    return HusimiGrid(theta, phi, q / peak)
