"""Two-mode (bosonic Josephson junction) model in the imbalance Fock basis.

Basis index ``k = 0..N`` corresponds to the imbalance ``n = k - N/2`` with
``n = (n_l - n_r) / 2``; ``k = N`` is the state with all atoms in the left
well. Units: hbar = 1, energies in rad/ms, times in ms.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from scipy.linalg import eigh_tridiagonal

from . import _kernels

logger = logging.getLogger(__name__)

# the guard trips on nearly every call at realistic N; log it loudly once
_guard_logged = False

KINDS = ("Jx", "Jy", "Jz", "Jz2")

Schedule = Union[float, Callable[[np.ndarray], np.ndarray]]


def _check_n(N) -> int:
    if isinstance(N, bool) or int(N) != N or N < 1:
        raise ValueError(f"atom number must be a positive integer, got {N!r}")
    return int(N)


def imbalance(N: int) -> np.ndarray:
    """Eigenvalues of Jz, ordered -N/2 .. N/2."""
    return np.arange(N + 1) - N / 2


def ladder(N: int) -> np.ndarray:
    """<m+1|J+|m> for m = -N/2 .. N/2 - 1."""
    j = N / 2
    m = imbalance(N)[:-1]
    return np.sqrt(j * (j + 1) - m * (m + 1))


def hz_to_rad(f_khz: float) -> float:
    """Convert a frequency in kHz to an angular frequency in rad/ms."""
    return 2 * math.pi * f_khz


def rad_to_khz(omega: float) -> float:
    return omega / (2 * math.pi)


def _tridiag_apply(diag, sub, psi):
    psi = np.asarray(psi)
    out = diag * psi
    if sub.size:
        out[..., 1:] += sub * psi[..., :-1]
        out[..., :-1] += np.conj(sub) * psi[..., 1:]
    return out


def _tridiag_dense(diag, sub):
    m = np.diag(diag.astype(complex))
    if sub.size:
        m += np.diag(sub, -1) + np.diag(np.conj(sub), 1)
    return m


@dataclass(frozen=True)
class SpinOperator:
    """Pseudo-spin operator stored as a Hermitian tridiagonal matrix.

    ``sub[k]`` is the matrix element ``<k+1|A|k>``; the super-diagonal is its
    complex conjugate.
    """

    kind: str
    N: int
    diag: np.ndarray
    sub: np.ndarray

    @property
    def dim(self) -> int:
        return self.N + 1

    def apply(self, psi):
        return _tridiag_apply(self.diag, self.sub, psi)

    def dense(self) -> np.ndarray:
        return _tridiag_dense(self.diag, self.sub)


def build_spin_operator(kind: str, N: int) -> SpinOperator:
    """Build Jx, Jy, Jz or Jz^2 (``kind="Jz2"``) for N atoms.

    Jy follows the standard convention (J+ - J-)/(2i) so that
    [Jx, Jy] = i Jz.
    """
    N = _check_n(N)
    if kind not in KINDS:
        raise ValueError(f"unknown operator kind {kind!r}; expected one of {KINDS}")
    n = imbalance(N)
    lad = ladder(N)
    zero_sub = np.zeros(N, dtype=complex)
    if kind == "Jx":
        return SpinOperator(kind, N, np.zeros(N + 1), 0.5 * lad + 0j)
    if kind == "Jy":
        return SpinOperator(kind, N, np.zeros(N + 1), -0.5j * lad)
    if kind == "Jz":
        return SpinOperator(kind, N, n.copy(), zero_sub)
    return SpinOperator(kind, N, n**2, zero_sub)


@dataclass(frozen=True)
class TwoModeHamiltonian:
    """H = -Omega Jx + 2 kappa Jz^2 as real tridiagonal data."""

    omega: float
    kappa: float
    N: int
    diag: np.ndarray = field(repr=False)
    off: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.N + 1

    @property
    def sub(self) -> np.ndarray:
        return self.off.astype(complex)

    def apply(self, psi):
        return _tridiag_apply(self.diag, self.off, psi)

    def dense(self) -> np.ndarray:
        return _tridiag_dense(self.diag, self.off)

    def spectral_bound(self) -> float:
        """Gershgorin bound on the spectral radius."""
        radius = np.abs(self.diag).copy()
        radius[1:] += np.abs(self.off)
        radius[:-1] += np.abs(self.off)
        return float(radius.max())


def build_hamiltonian(omega: float, kappa: float, N: int) -> TwoModeHamiltonian:
    N = _check_n(N)
    if not (np.isfinite(omega) and np.isfinite(kappa)):
        raise ValueError("Omega and kappa must be finite")
    if omega < 0 or kappa < 0:
        raise ValueError("Omega and kappa must be non-negative")
    diag = 2.0 * kappa * imbalance(N) ** 2
    off = -0.5 * omega * ladder(N)
    return TwoModeHamiltonian(float(omega), float(kappa), N, diag, off)


@dataclass(frozen=True)
class ManyBodyState:
    """Normalized amplitude vector over the imbalance basis."""

    amplitudes: np.ndarray
    N: int
    time: float = 0.0

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.shape != (self.N + 1,):
            raise ValueError(
                f"expected {self.N + 1} amplitudes for N={self.N}, got {amps.shape}")
        norm = np.vdot(amps, amps).real
        if abs(norm - 1.0) > 1e-10:
            raise ValueError(f"state is not normalized (norm^2 = {norm!r})")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def from_amplitudes(cls, amplitudes, time: float = 0.0) -> "ManyBodyState":
        amps = np.asarray(amplitudes, dtype=complex)
        amps = amps / np.linalg.norm(amps)
        return cls(amps, amps.size - 1, time)

    @classmethod
    def fock(cls, N: int, n: float, time: float = 0.0) -> "ManyBodyState":
        """Number state with imbalance ``n`` (n = N/2 is all-left)."""
        k = n + N / 2
        if k != int(k) or not 0 <= k <= N:
            raise ValueError(f"imbalance {n} not in the basis for N={N}")
        amps = np.zeros(N + 1, dtype=complex)
        amps[int(k)] = 1.0
        return cls(amps, N, time)

    @classmethod
    def binomial(cls, N: int) -> "ManyBodyState":
        """Coherent spin state along +x (the kappa = 0 ground state)."""
        from scipy.special import gammaln

        nl = np.arange(N + 1)
        logc = gammaln(N + 1) - gammaln(nl + 1) - gammaln(N - nl + 1)
        amps = np.exp(0.5 * logc - 0.5 * N * math.log(2.0))
        return cls.from_amplitudes(amps)


def _fix_phase(vec: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(vec)))
    return vec * (abs(vec[k]) / vec[k])


def ground_state(H: TwoModeHamiltonian) -> tuple[ManyBodyState, float]:
    """Lowest eigenpair of H; the largest amplitude is made real positive."""
    if H.N == 0:
        raise ValueError("empty Hamiltonian")
    if H.dim == 1:
        vec = np.ones(1, dtype=complex)
        return ManyBodyState(vec, H.N), float(H.diag[0])
    w, v = eigh_tridiagonal(H.diag, H.off, select="i", select_range=(0, 0))
    energy = float(w[0])
    vec = _fix_phase(v[:, 0].astype(complex))
    vec /= np.linalg.norm(vec)
    resid = np.linalg.norm(H.apply(vec) - energy * vec)
    scale = max(H.spectral_bound(), 1.0)
    if resid > 1e-10 * scale:
        # one step of inverse iteration polishes LAPACK's vector
        shifted = H.dense() - (energy - 1e-9 * scale) * np.eye(H.dim)
        vec = _fix_phase(np.linalg.solve(shifted, vec))
        vec /= np.linalg.norm(vec)
        energy = float(np.vdot(vec, H.apply(vec)).real)
    return ManyBodyState(vec, H.N), energy


def expectation(state, op) -> float:
    """<psi|A|psi> for a Hermitian operator A (SpinOperator or Hamiltonian)."""
    psi = state.amplitudes if isinstance(state, ManyBodyState) else np.asarray(state)
    if psi.shape[-1] != op.dim:
        raise ValueError(
            f"dimension mismatch: state has {psi.shape[-1]}, operator {op.dim}")
    val = np.vdot(psi, op.apply(psi))
    if abs(val.imag) > 1e-10:
        logger.warning("expectation value has imaginary residue %.3e", val.imag)
    return float(val.real)


def variance(state, op) -> float:
    psi = state.amplitudes if isinstance(state, ManyBodyState) else np.asarray(state)
    if psi.shape[-1] != op.dim:
        raise ValueError(
            f"dimension mismatch: state has {psi.shape[-1]}, operator {op.dim}")
    a_psi = op.apply(psi)
    mean = np.vdot(psi, a_psi).real
    return float(np.vdot(a_psi, a_psi).real - mean**2)


def _as_schedule(value: Schedule) -> Callable[[np.ndarray], np.ndarray]:
    if callable(value):
        return lambda t: np.broadcast_to(np.asarray(value(t), dtype=float), np.shape(t))
    c = float(value)
    return lambda t: np.full(np.shape(t), c)


def propagate(psi0: np.ndarray, omegas: np.ndarray, kappas: np.ndarray,
              dt: float, store_every: int = 1,
              restore_phase: bool = True) -> np.ndarray:
    """Crank-Nicolson stepping with per-step (midpoint) Omega and kappa.

    Returns the stored states; row 0 is ``psi0``. The stepping itself uses
    H + Omega N/2 (see ``_kernels``); with ``restore_phase`` the resulting
    global phase exp(-i int Omega N/2 dt) is put back exactly.
    """
    psi0 = np.ascontiguousarray(psi0, dtype=np.complex128)
    N = psi0.size - 1
    omegas = np.ascontiguousarray(omegas, dtype=float)
    kappas = np.ascontiguousarray(kappas, dtype=float)
    if omegas.shape != kappas.shape:
        raise ValueError("omega and kappa sequences differ in length")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if N == 0:
        return np.repeat(psi0[None, :], omegas.size // store_every + 1, axis=0)
    states = _kernels.cn_propagate(psi0, omegas, kappas, float(dt),
                                   imbalance(N) ** 2, ladder(N), N / 2,
                                   int(store_every))
    if restore_phase:
        idx = _stored_steps(omegas.size, store_every)
        cum = np.concatenate(([0.0], np.cumsum(omegas))) * (0.5 * N * dt)
        states *= np.exp(1j * cum[idx])[:, None]
    return states


def _stored_steps(steps: int, store_every: int) -> np.ndarray:
    idx = np.arange(0, steps + 1, store_every)
    if idx[-1] != steps:
        idx = np.append(idx, steps)
    return idx


@dataclass
class Trajectory:
    """States sampled along an evolution together with the drive values."""

    times: np.ndarray
    states: np.ndarray
    omega: np.ndarray
    kappa: np.ndarray
    N: int
    dt: float
    diagnostics: list = field(default_factory=list)

    def state(self, i: int) -> ManyBodyState:
        return ManyBodyState.from_amplitudes(self.states[i], float(self.times[i]))

    @property
    def final(self) -> ManyBodyState:
        return self.state(-1)

    def energies(self) -> np.ndarray:
        jx = build_spin_operator("Jx", self.N).apply(self.states)
        n2 = imbalance(self.N) ** 2
        ex = np.einsum("ij,ij->i", self.states.conj(), jx).real
        ez2 = (np.abs(self.states) ** 2) @ n2
        return -self.omega * ex + 2 * self.kappa * ez2

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=1)

    def to_csv(self, path, amplitudes: bool = False) -> None:
        from .bloch import spin_moments

        mom = spin_moments(self.states)
        energy = self.energies()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["t", "Jx", "Jy", "Jz", "var_Jz", "energy"]
            if amplitudes:
                for k in range(self.N + 1):
                    header += [f"re_{k}", f"im_{k}"]
            writer.writerow(header)
            for i, t in enumerate(self.times):
                vals = [t, mom["jx"][i], mom["jy"][i], mom["jz"][i],
                        mom["var_jz"][i], energy[i]]
                row = [repr(float(v)) for v in vals]
                if amplitudes:
                    for c in self.states[i]:
                        row += [repr(float(c.real)), repr(float(c.imag))]
                writer.writerow(row)


def _n_steps(t_span, dt) -> tuple[int, float]:
    t0, t1 = map(float, t_span)
    if not dt > 0:
        raise ValueError("dt must be positive")
    if t1 < t0:
        raise ValueError("t_span must be increasing")
    steps = max(int(round((t1 - t0) / dt)), 1) if t1 > t0 else 0
    return steps, ((t1 - t0) / steps if steps else dt)


def evolve(state: ManyBodyState, omega: Schedule, kappa: Schedule, t_span,
           dt: float = 1e-3, sample_every: int = 1) -> Trajectory:
    """Evolve ``state`` under H(t) = -Omega(t) Jx + 2 kappa(t) Jz^2.

    ``omega`` and ``kappa`` are constants or vectorized callables of time.
    The step is adjusted so that an integer number of steps spans t_span;
    H is sampled at each step midpoint.
    """
    steps, dt = _n_steps(t_span, dt)
    t0 = float(t_span[0])
    om_f, ka_f = _as_schedule(omega), _as_schedule(kappa)
    mid = t0 + (np.arange(steps) + 0.5) * dt
    omegas, kappas = om_f(mid), ka_f(mid)
    diagnostics = []
    if steps:
        bound = float(np.max(np.abs(omegas)) * state.N
                      + 2 * np.max(np.abs(kappas)) * (state.N / 2) ** 2)
        if bound > 0 and dt > 1.0 / (10.0 * bound):
            global _guard_logged
            msg = (f"dt={dt:g} ms exceeds stability guard "
                   f"1/(10*|H|) = {1.0 / (10.0 * bound):.3g} ms")
            if _guard_logged:
                logger.debug(msg)
            else:
                logger.warning(msg + " (further occurrences logged at debug level)")
                _guard_logged = True
            diagnostics.append(("warning", msg))
    states = propagate(state.amplitudes, omegas, kappas, dt, sample_every)
    idx = _stored_steps(steps, sample_every)
    times = t0 + idx * dt
    return Trajectory(times, states, om_f(times), ka_f(times), state.N, dt,
                      diagnostics)


def convergence_check(state: ManyBodyState, omega: Schedule, kappa: Schedule,
                      t_span, dt: float = 1e-3) -> float:
    """Final-state distance between runs at dt and dt/2, up to global phase."""
    a = evolve(state, omega, kappa, t_span, dt).states[-1]
    b = evolve(state, omega, kappa, t_span, dt / 2).states[-1]
    overlap = np.vdot(a, b)
    phase = overlap / abs(overlap) if abs(overlap) > 0 else 1.0
    return float(np.linalg.norm(a * phase - b))
