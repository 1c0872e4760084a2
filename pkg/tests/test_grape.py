import csv

import numpy as np
import pytest

from conftest import random_state
from parasqueeze import grape
from parasqueeze.grape import (OctProblem, gradient, objective, optimize, penalty,
                               terminal_cost, trapping_modulation, two_parameter_optimize)
from parasqueeze.schedules import SurrogateMap, linear_ramp
from parasqueeze.two_mode import (ManyBodyState, build_hamiltonian, build_spin_operator,
                                  ground_state)


class FlatMap:
    """lambda has no effect on (Omega, kappa)."""

    support = (0.0, 2.0)

    def __init__(self, omega=0.5, kappa=0.05):
        self.om, self.ka = omega, kappa

    def contains(self, lam):
        return bool(np.all((np.asarray(lam) >= 0) & (np.asarray(lam) <= 2)))

    def omega(self, lam):
        return np.full(np.shape(lam), self.om) if np.ndim(lam) else self.om

    def kappa(self, lam):
        return np.full(np.shape(lam), self.ka) if np.ndim(lam) else self.ka

    def d_omega(self, lam):
        return np.zeros(np.shape(lam)) if np.ndim(lam) else 0.0

    d_kappa = d_omega


def small_problem(N=8, gamma=0.0, nu=1e-6, samples=17, seed=1):
    lmap = SurrogateMap(0.6, 0.02, 0.7, decay=3.0)
    g, _ = ground_state(build_hamiltonian(0.6, 0.02, N))
    rng = np.random.default_rng(seed)
    ramp = linear_ramp(0.7, 0.9, (0.0, 1.0), 1.0 / (samples - 1))
    s = ramp.samples.copy()
    s[1:-1] += 0.05 * rng.standard_normal(samples - 2)
    return OctProblem(g, lmap, ramp.with_samples(s), gamma=gamma, nu=nu, dt=1e-3)


def fd_directional(problem, direction, h=1e-6):
    x = problem.ramp.samples
    return (objective(problem, x + h * direction)[2]
            - objective(problem, x - h * direction)[2]) / (2 * h)


class TestCost:
    def test_balanced_fock_state(self):
        H = build_hamiltonian(1.0, 1.0, 6)
        assert terminal_cost(ManyBodyState.fock(6, 0), H, 0.0, 6) == 0.0

    def test_binomial_state(self):
        H = build_hamiltonian(1.0, 1.0, 40)
        assert terminal_cost(ManyBodyState.binomial(40), H, 0.0, 40) == pytest.approx(10.0)

    def test_dense_oracle_with_energy(self, rng):
        N = 6
        psi = random_state(rng, N)
        H = build_hamiltonian(0.8, 0.3, N)
        jz2 = build_spin_operator("Jz2", N).dense()
        ref = np.vdot(psi, (jz2 + H.dense() / N) @ psi).real
        assert terminal_cost(psi, H, 1.0, N) == pytest.approx(ref, abs=1e-12)

    def test_penalty_values(self):
        assert penalty(np.full(11, 0.7), 0.1, 1e-6) == 0.0
        r = linear_ramp(0.7, 1.05, (10, 12), 0.01)
        slope = 0.35 / 2.0
        assert penalty(r.samples, r.dt_ctrl, 1e-6) == pytest.approx(0.5e-6 * slope**2 * 2.0,
                                                                     rel=1e-10)

    def test_problem_validation(self):
        g = ManyBodyState.binomial(4)
        lmap = SurrogateMap(0.6, 0.02, 0.7)
        with pytest.raises(ValueError):
            OctProblem(g, lmap, linear_ramp(0.7, 0.9, (0, 1)), gamma=-1)
        with pytest.raises(ValueError):
            OctProblem(g, lmap, linear_ramp(0.7, 3.0, (0, 1)))


class TestGradient:
    @pytest.mark.parametrize("gamma", [0.0, 1.0, 100.0])
    def test_directional_derivative(self, gamma):
        pr = small_problem(gamma=gamma)
        rng = np.random.default_rng(5)
        d = rng.standard_normal(pr.ramp.samples.size)
        d[0] = d[-1] = 0.0
        g = gradient(pr)
        analytic = float(np.sum(g * d) * pr.ramp.dt_ctrl)
        fd = fd_directional(pr, d)
        assert abs(analytic - fd) <= 1e-5 * abs(fd)

    def test_endpoints_zero(self):
        g = gradient(small_problem())
        assert g[0] == 0.0 and g[-1] == 0.0

    def test_flat_map_without_penalty_has_zero_gradient(self):
        pr = small_problem()
        flat = OctProblem(pr.psi0, FlatMap(), pr.ramp, gamma=1.0, nu=0.0)
        assert np.all(gradient(flat) == 0.0)

    def test_penalty_only_gradient_is_discrete_laplacian(self):
        pr = small_problem()
        nu = 0.3
        flat = OctProblem(pr.psi0, FlatMap(), pr.ramp, gamma=0.0, nu=nu)
        s, h = pr.ramp.samples, pr.ramp.dt_ctrl
        lap = (s[2:] - 2 * s[1:-1] + s[:-2]) / h**2
        np.testing.assert_allclose(gradient(flat)[1:-1], -nu * lap, rtol=1e-12, atol=1e-12)


class TestOptimize:
    @pytest.mark.parametrize("method", ["lbfgs", "descent"])
    def test_penalty_only_relaxes_to_linear_ramp(self, method):
        pr = small_problem()
        flat = OctProblem(pr.psi0, FlatMap(), pr.ramp, gamma=0.0, nu=1.0)
        ramp, trace = optimize(flat, max_iters=500, gtol=1e-10, ftol=1e-15, method=method)
        target = np.linspace(*flat.boundary, ramp.samples.size)
        np.testing.assert_allclose(ramp.samples, target, atol=1e-5)
        assert trace.is_monotone()

    @pytest.mark.parametrize("method", ["lbfgs", "descent"])
    def test_monotone_trace_and_fixed_boundary(self, method):
        pr = small_problem(N=10, gamma=1.0)
        ramp, trace = optimize(pr, max_iters=15, method=method)
        assert trace.is_monotone()
        assert trace.total[-1] < trace.total[0]
        assert (ramp.samples[0], ramp.samples[-1]) == pr.boundary
        assert pr.lambda_map.contains(ramp.samples)
        assert objective(pr, ramp.samples)[2] == pytest.approx(trace.total[-1], rel=1e-12)

    def test_distinct_ramps_per_gamma(self):
        ramps = [optimize(small_problem(N=10, gamma=g), max_iters=10)[0].samples
                 for g in (0.0, 1.0, 100.0)]
        assert not np.allclose(ramps[0], ramps[1])
        assert not np.allclose(ramps[1], ramps[2])

    def test_stall_is_flagged(self, monkeypatch):
        pr = small_problem()
        monkeypatch.setattr(grape, "objective", lambda problem, s=None: (np.inf,) * 3)
        ramp, trace = optimize(pr, max_iters=5, method="descent")
        assert trace.stalled and trace.reason == "line search failed"
        np.testing.assert_array_equal(ramp.samples, pr.ramp.samples)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            optimize(small_problem(), method="newton")

    def test_trace_csv(self, tmp_path):
        _, trace = optimize(small_problem(), max_iters=3)
        trace.to_csv(tmp_path / "t.csv")
        rows = list(csv.DictReader(open(tmp_path / "t.csv")))
        assert len(rows) == len(trace.total)
        assert float(rows[0]["total"]) == trace.total[0]


class TestTwoParameter:
    def test_modulation_keeps_boundary(self):
        r = trapping_modulation((0.7, 1.0), (0, 2), 0.01, 0.2, 5.0)
        assert r.samples[0] == pytest.approx(0.7, abs=1e-15)
        assert r.samples[-1] == pytest.approx(1.0, abs=1e-12)

    def test_degenerate_range(self):
        pr = small_problem()
        (a, f), xi = two_parameter_optimize(pr, (0.1, 0.1), (3.0, 3.0))
        assert (a, f) == (0.1, 3.0)
        assert np.isfinite(xi)

    def test_superset_of_zero_amplitude(self):
        pr = small_problem(N=20)
        _, xi0 = two_parameter_optimize(pr, (0.0, 0.0), (0.0, 0.0))
        (a, f), xi = two_parameter_optimize(pr, (0.0, 0.2), (0.0, 12.0), max_evals=60)
        assert xi <= xi0
