"""GRAPE optimal control of the trapping ramp in the two-mode model.

The objective is discretized first and differentiated exactly: the forward
dynamics are the CN steps of ``two_mode.propagate`` with H sampled at step
midpoints, lambda at a midpoint is the linear interpolant of the control
samples, and the smoothness penalty is the forward-difference sum

    nu/2 * sum_j ((lam_{j+1} - lam_j) / dt_ctrl)^2 * dt_ctrl.

``gradient`` returns the L2 (per unit time) gradient, i.e. the derivative
with respect to sample j divided by dt_ctrl, so the penalty alone gives
exactly -nu times the discrete second derivative of the ramp.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .bloch import squeezing_factors
from .schedules import ControlRamp, linear_ramp
from .two_mode import (ManyBodyState, build_hamiltonian, imbalance, ladder,
                       propagate)

logger = logging.getLogger(__name__)

ARMIJO = 1e-4
MAX_HALVINGS = 40


def terminal_cost(state, H, gamma: float, N: int) -> float:
    """<Jz^2> + gamma/N <H>."""
    psi = state.amplitudes if isinstance(state, ManyBodyState) else np.asarray(state)
    jz2 = float(np.abs(psi) ** 2 @ imbalance(N) ** 2)
    if gamma == 0:
        return jz2
    return jz2 + gamma / N * float(np.vdot(psi, H.apply(psi)).real)


@dataclass
class OctProblem:
    """Trapping problem: steer psi0 over [t0, T] by the control lambda(t).

    The boundary values lambda(t0) and lambda(T) are those of the ramp
    passed in and stay fixed for every iterate.
    """

    psi0: ManyBodyState
    lambda_map: object
    ramp: ControlRamp
    gamma: float = 0.0
    nu: float = 1e-6
    dt: float = 1e-3

    def __post_init__(self):
        if self.gamma < 0 or self.nu < 0:
            raise ValueError("gamma and nu must be non-negative")
        self.ramp.check_support(self.lambda_map)
        self.boundary = (float(self.ramp.samples[0]), float(self.ramp.samples[-1]))
        span = self.ramp.T - self.ramp.t0
        self.steps = max(int(round(span / self.dt)), 1)
        self.dt = span / self.steps
        mid = (np.arange(self.steps) + 0.5) * self.dt / self.ramp.dt_ctrl
        j = np.minimum(np.floor(mid).astype(int), self.ramp.samples.size - 2)
        self._idx = j
        self._w = mid - j

    @property
    def t0(self) -> float:
        return self.ramp.t0

    @property
    def T(self) -> float:
        return self.ramp.T

    @property
    def N(self) -> int:
        return self.psi0.N

    def with_ramp(self, ramp: ControlRamp) -> "OctProblem":
        return OctProblem(self.psi0, self.lambda_map, ramp, self.gamma, self.nu,
                          self.dt)

    def midpoint_controls(self, samples) -> np.ndarray:
        s = np.asarray(samples)
        return (1 - self._w) * s[self._idx] + self._w * s[self._idx + 1]

    def final_hamiltonian(self):
        lam = self.boundary[1]
        return build_hamiltonian(float(self.lambda_map.omega(lam)),
                                 float(self.lambda_map.kappa(lam)), self.N)


def penalty(samples, dt_ctrl: float, nu: float) -> float:
    d = np.diff(samples) / dt_ctrl
    return 0.5 * nu * float(np.sum(d**2) * dt_ctrl)


def _forward(problem: OctProblem, samples, store_all: bool):
    lam = problem.midpoint_controls(samples)
    om = np.asarray(problem.lambda_map.omega(lam), dtype=float)
    ka = np.asarray(problem.lambda_map.kappa(lam), dtype=float) * np.ones_like(om)
    states = propagate(problem.psi0.amplitudes, om, ka, problem.dt,
                       store_every=1 if store_all else problem.steps,
                       restore_phase=False)
    return lam, om, ka, states


def objective(problem: OctProblem, samples=None) -> tuple[float, float, float]:
    """(J_T, penalty, total) for the given control samples."""
    samples = problem.ramp.samples if samples is None else np.asarray(samples)
    _, _, _, states = _forward(problem, samples, store_all=False)
    jt = terminal_cost(states[-1], problem.final_hamiltonian(), problem.gamma,
                       problem.N)
    pen = penalty(samples, problem.ramp.dt_ctrl, problem.nu)
    return jt, pen, jt + pen


def _value_and_gradient(problem: OctProblem, samples):
    N = problem.N
    dtc = problem.ramp.dt_ctrl
    lam, om, ka, states = _forward(problem, samples, store_all=True)
    H_T = problem.final_hamiltonian()
    psi_T = states[-1]
    jt = terminal_cost(psi_T, H_T, problem.gamma, N)
    chi = imbalance(N) ** 2 * psi_T
    if problem.gamma:
        chi = chi + problem.gamma / N * H_T.apply(psi_T)
    dom = np.asarray(problem.lambda_map.d_omega(lam), dtype=float) * np.ones_like(om)
    dka = np.asarray(problem.lambda_map.d_kappa(lam), dtype=float) * np.ones_like(om)
    g_mid, _ = _kernels.cn_adjoint(np.ascontiguousarray(chi), states, om, ka,
                                   dom, dka, problem.dt, imbalance(N) ** 2,
                                   ladder(N), N / 2)
    n = samples.size
    euclid = (np.bincount(problem._idx, g_mid * (1 - problem._w), minlength=n)
              + np.bincount(problem._idx + 1, g_mid * problem._w, minlength=n))
    d = np.diff(samples) / dtc
    pen = 0.5 * problem.nu * float(np.sum(d**2) * dtc)
    euclid[:-1] -= problem.nu * d
    euclid[1:] += problem.nu * d
    grad = euclid / dtc
    grad[0] = grad[-1] = 0.0
    return (jt, pen, jt + pen), grad


def gradient(problem: OctProblem, samples=None) -> np.ndarray:
    """L2 gradient of the total objective on the control grid (endpoints zero)."""
    samples = problem.ramp.samples if samples is None else np.asarray(samples, dtype=float)
    return _value_and_gradient(problem, samples)[1]


@dataclass
class OctTrace:
    j_t: list = field(default_factory=list)
    penalty: list = field(default_factory=list)
    total: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    step: list = field(default_factory=list)
    stalled: bool = False
    reason: str = ""

    def record(self, values, gnorm, step):
        self.j_t.append(values[0])
        self.penalty.append(values[1])
        self.total.append(values[2])
        self.grad_norm.append(gnorm)
        self.step.append(step)

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.total) <= 0))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "j_t", "penalty", "total", "grad_norm", "step"])
            for i, row in enumerate(zip(self.j_t, self.penalty, self.total,
                                        self.grad_norm, self.step)):
                w.writerow([i] + [repr(float(v)) for v in row])


def _lbfgs(problem: OctProblem, max_iters: int, gtol: float, ftol: float):
    """Bound-constrained L-BFGS driven by the adjoint gradient.

    Endpoints are pinned through degenerate bounds. Every accepted iterate
    passed the line search's sufficient-decrease test, so the recorded
    totals are non-increasing.
    """
    lo, hi = problem.lambda_map.support
    dtc = problem.ramp.dt_ctrl
    x0 = problem.ramp.samples.copy()
    cache = {}

    def fun(x):
        values, g = _value_and_gradient(problem, x)
        cache["x"], cache["values"], cache["g"] = x.copy(), values, g
        return values[2], g * dtc

    def current(x):
        if "x" not in cache or not np.array_equal(cache["x"], x):
            fun(x)
        return cache["values"], cache["g"]

    trace = OctTrace()
    values, g = current(x0)
    trace.record(values, math.sqrt(float(np.sum(g**2) * dtc)), 0.0)

    def callback(xk):
        v, gk = current(xk)
        trace.record(v, math.sqrt(float(np.sum(gk**2) * dtc)), np.nan)

    bounds = [(lo, hi)] * x0.size
    bounds[0] = (x0[0], x0[0])
    bounds[-1] = (x0[-1], x0[-1])
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   callback=callback,
                   options={"maxiter": max_iters, "ftol": ftol, "gtol": gtol * dtc,
                            "maxls": MAX_HALVINGS})
    msg = str(res.message)
    if res.status == 1:
        trace.reason = "max iterations"
    elif "ABNORMAL" in msg.upper():
        trace.stalled = True
        trace.reason = "line search failed"
        logger.warning("line search stalled after %d iterations", res.nit)
    else:
        trace.reason = msg.lower()
    # the final iterate is the last accepted one
    x = np.asarray(res.x, dtype=float)
    x[0], x[-1] = problem.boundary
    return problem.ramp.with_samples(x), trace


def _projected_descent(problem: OctProblem, max_iters: int, gtol: float, ftol: float,
                       initial_step: float | None):
    lo, hi = problem.lambda_map.support
    dtc = problem.ramp.dt_ctrl
    x = problem.ramp.samples.copy()
    values, g = _value_and_gradient(problem, x)
    trace = OctTrace()
    gnorm = math.sqrt(float(np.sum(g**2) * dtc))
    trace.record(values, gnorm, 0.0)
    if initial_step is None:
        scale = max(abs(problem.boundary[1] - problem.boundary[0]), 0.05 * abs(x).max(), 1e-3)
        step = 0.1 * scale / max(np.abs(g).max(), 1e-300)
    else:
        step = initial_step
    for it in range(max_iters):
        if gnorm < gtol:
            trace.reason = "gradient tolerance"
            break
        accepted = False
        for _ in range(MAX_HALVINGS):
            trial = np.clip(x - step * g, lo, hi)
            trial[0], trial[-1] = problem.boundary
            move = trial - x
            decrease = float(np.sum(g * move) * dtc)
            if decrease >= 0:
                step *= 0.5
                continue
            t_values = objective(problem, trial)
            if t_values[2] <= values[2] + ARMIJO * decrease:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            trace.stalled = True
            trace.reason = "line search failed"
            logger.warning("line search stalled at iteration %d", it)
            break
        prev = values[2]
        g_old = g
        x = trial
        values, g = _value_and_gradient(problem, x)
        gnorm = math.sqrt(float(np.sum(g**2) * dtc))
        trace.record(values, gnorm, step)
        # Barzilai-Borwein trial step for the next line search
        curv = float(np.sum(move * (g - g_old)))
        step = float(np.sum(move**2)) / curv if curv > 0 else 2.0 * step
        if abs(prev - values[2]) <= ftol * max(abs(prev), 1e-300):
            trace.reason = "objective tolerance"
            break
    else:
        trace.reason = "max iterations"
    return problem.ramp.with_samples(x), trace


def optimize(problem: OctProblem, max_iters: int = 200, gtol: float = 1e-8,
             ftol: float = 1e-12, method: str = "lbfgs",
             initial_step: float | None = None):
    """Minimize J_T + penalty over the interior control samples.

    ``method="lbfgs"`` uses scipy's bound-constrained L-BFGS with the
    adjoint gradient. ``method="descent"`` is projected gradient descent
    whose line search starts from a Barzilai-Borwein step and halves it
    until an Armijo test passes; it is cheaper per iteration but converges
    far more slowly on the trapping problem.

    Iterates stay inside the map support and keep the boundary values.
    Returns the final ramp and the trace; the trace is flagged ``stalled``
    when the line search fails.
    """
    if method == "lbfgs":
        return _lbfgs(problem, max_iters, gtol, ftol)
    if method == "descent":
        return _projected_descent(problem, max_iters, gtol, ftol, initial_step)
    raise ValueError(f"unknown method {method!r}")


def trapping_modulation(boundary, t_span, dt_ctrl, amplitude, frequency) -> ControlRamp:
    """Linear ramp plus a sinusoid under a half-sine envelope.

    The envelope keeps both boundary values, so the family is a subset of
    the ramps ``optimize`` can reach.
    """
    base = linear_ramp(boundary[0], boundary[1], t_span, dt_ctrl)
    tau = base.times - base.t0
    span = base.T - base.t0
    bump = np.sin(frequency * tau) * np.sin(np.pi * tau / span)
    return base.with_samples(base.samples + amplitude * bump)


def terminal_xi_s(problem: OctProblem, samples) -> float:
    _, _, _, states = _forward(problem, samples, store_all=False)
    return squeezing_factors(states[-1]).xi_s


def two_parameter_optimize(problem: OctProblem, amplitude_range, frequency_range,
                           max_evals: int = 200):
    """Nelder-Mead over (amplitude, frequency) of ``trapping_modulation``.

    Objective is the terminal xi_S. Returns ((amplitude, frequency), xi_S).
    """
    lo, hi = problem.lambda_map.support
    a_lo, a_hi = map(float, amplitude_range)
    f_lo, f_hi = map(float, frequency_range)
    t_span = (problem.t0, problem.T)

    def cost(p):
        a = float(np.clip(p[0], a_lo, a_hi))
        f = float(np.clip(p[1], f_lo, f_hi))
        ramp = trapping_modulation(problem.boundary, t_span, problem.ramp.dt_ctrl, a, f)
        if not problem.lambda_map.contains(ramp.samples):
            return math.inf
        return terminal_xi_s(problem, ramp.samples)

    if a_lo == a_hi and f_lo == f_hi:
        return (a_lo, f_lo), cost((a_lo, f_lo))
    best = None
    # a coarse start grid guards against the simplex settling on a poor basin
    for a in np.linspace(a_lo, a_hi, 3):
        for f in np.linspace(f_lo, f_hi, 3):
            c = cost((a, f))
            if best is None or c < best[1]:
                best = ((float(a), float(f)), c)
    res = minimize(cost, x0=np.array(best[0]), method="Nelder-Mead",
                   bounds=[(a_lo, a_hi), (f_lo, f_hi)],
                   options={"maxfev": max_evals, "xatol": 1e-6, "fatol": 1e-8})
    if res.fun < best[1]:
        best = ((float(np.clip(res.x[0], a_lo, a_hi)),
                 float(np.clip(res.x[1], f_lo, f_hi))), float(res.fun))
    return best
