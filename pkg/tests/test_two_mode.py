import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from conftest import random_state
from parasqueeze.two_mode import (ManyBodyState, build_hamiltonian, build_spin_operator,
                                  convergence_check, evolve, expectation, ground_state,
                                  hz_to_rad, imbalance, propagate, rad_to_khz, variance)


def schwinger(N):
    """Jx, Jy, Jz from two truncated bosonic modes restricted to N atoms.

    Basis index k = number of atoms in the left mode.
    """
    a = np.diag(np.sqrt(np.arange(1, N + 1)), 1)
    eye = np.eye(N + 1)
    al, ar = np.kron(a, eye), np.kron(eye, a)
    idx = [nl * (N + 1) + (N - nl) for nl in range(N + 1)]
    sub = np.ix_(idx, idx)
    jx = 0.5 * (al.T @ ar + ar.T @ al)
    jy = -0.5j * (al.T @ ar - ar.T @ al)
    jz = 0.5 * (al.T @ al - ar.T @ ar)
    return jx[sub], jy[sub], jz[sub]


class TestSpinOperators:
    def test_jz_is_imbalance_diagonal(self):
        jz = build_spin_operator("Jz", 4).dense()
        np.testing.assert_array_equal(np.diag(jz), [-2, -1, 0, 1, 2])
        assert np.count_nonzero(jz - np.diag(np.diag(jz))) == 0

    def test_jx_for_spin_one(self):
        jx = build_spin_operator("Jx", 2).dense()
        np.testing.assert_allclose(np.diag(jx, -1), [math.sqrt(2) / 2] * 2, atol=1e-15)
        np.testing.assert_allclose(np.diag(jx, 1), [math.sqrt(2) / 2] * 2, atol=1e-15)

    @pytest.mark.parametrize("N", [1, 2, 3, 6, 9])
    def test_matches_schwinger_boson_construction(self, N):
        jx, jy, jz = schwinger(N)
        for kind, ref in [("Jx", jx), ("Jy", jy), ("Jz", jz), ("Jz2", jz @ jz)]:
            np.testing.assert_allclose(build_spin_operator(kind, N).dense(), ref,
                                       atol=1e-13)

    @pytest.mark.parametrize("N", [0, -3, 2.5, True])
    def test_rejects_bad_atom_number(self, N):
        with pytest.raises(ValueError):
            build_spin_operator("Jx", N)

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            build_spin_operator("Jw", 4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 50), st.integers(0, 2**32 - 1))
    def test_cyclic_commutators(self, N, seed):
        rng = np.random.default_rng(seed)
        v = random_state(rng, N)
        jx, jy, jz = (build_spin_operator(k, N) for k in ("Jx", "Jy", "Jz"))
        for a, b, c in [(jx, jy, jz), (jy, jz, jx), (jz, jx, jy)]:
            comm = a.apply(b.apply(v)) - b.apply(a.apply(v))
            np.testing.assert_allclose(comm, 1j * c.apply(v), atol=1e-12 * max(N, 1))

    def test_apply_matches_dense_for_stacks(self, rng):
        op = build_spin_operator("Jy", 7)
        vs = np.array([random_state(rng, 7) for _ in range(3)])
        np.testing.assert_allclose(op.apply(vs), vs @ op.dense().T, atol=1e-14)


class TestHamiltonian:
    def test_pure_charging_is_diagonal(self):
        H = build_hamiltonian(0.0, 1.0, 4)
        np.testing.assert_array_equal(np.diag(H.dense()), [8, 2, 0, 2, 8])
        assert np.allclose(H.dense(), np.diag(np.diag(H.dense())))

    def test_pure_tunneling_offdiagonals(self):
        H = build_hamiltonian(1.0, 0.0, 2)
        np.testing.assert_allclose(np.diag(H.dense(), 1), [-math.sqrt(2) / 2] * 2)

    def test_zero_operator_allowed(self):
        assert not np.any(build_hamiltonian(0.0, 0.0, 5).dense())

    @pytest.mark.parametrize("om,ka", [(float("nan"), 1.0), (1.0, float("nan")),
                                       (-1.0, 1.0), (1.0, -0.5)])
    def test_rejects_invalid_parameters(self, om, ka):
        with pytest.raises(ValueError):
            build_hamiltonian(om, ka, 4)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0, 10), st.floats(0, 10), st.integers(1, 40))
    def test_hermitian_and_matches_operator_sum(self, om, ka, N):
        H = build_hamiltonian(om, ka, N).dense()
        assert np.array_equal(H, H.conj().T)
        ref = -om * build_spin_operator("Jx", N).dense() + 2 * ka * build_spin_operator("Jz2", N).dense()
        np.testing.assert_allclose(H, ref, atol=1e-12 * (1 + om + ka * N * N))


class TestGroundState:
    def test_pure_charging_gives_balanced_fock_state(self):
        state, energy = ground_state(build_hamiltonian(0.0, 1.0, 6))
        assert energy == pytest.approx(0.0, abs=1e-14)
        np.testing.assert_allclose(np.abs(state.amplitudes), np.eye(7)[3], atol=1e-12)

    @pytest.mark.parametrize("N", [2, 10, 101])
    def test_no_interaction_gives_binomial_state(self, N):
        state, energy = ground_state(build_hamiltonian(0.7, 0.0, N))
        np.testing.assert_allclose(state.amplitudes, ManyBodyState.binomial(N).amplitudes,
                                   atol=1e-10)
        assert energy == pytest.approx(-0.7 * N / 2, rel=1e-12)
        jz = build_spin_operator("Jz", N)
        assert math.sqrt(variance(state, jz)) == pytest.approx(math.sqrt(N) / 2, rel=1e-10)

    def test_three_level_dense_oracle(self):
        H = build_hamiltonian(1.0, 1.0, 2)
        state, energy = ground_state(H)
        w, v = np.linalg.eigh(H.dense())
        assert energy == pytest.approx(w[0], abs=1e-14)
        assert abs(abs(np.vdot(v[:, 0], state.amplitudes)) - 1) < 1e-13

    def test_phase_convention_and_residual(self):
        H = build_hamiltonian(0.58, 0.00134, 1000)
        state, energy = ground_state(H)
        psi = state.amplitudes
        k = np.argmax(np.abs(psi))
        assert psi[k].imag == 0 and psi[k].real > 0
        assert np.linalg.norm(H.apply(psi) - energy * psi) < 1e-10 * H.spectral_bound()


class TestStatesAndMoments:
    def test_norm_invariant_enforced(self):
        with pytest.raises(ValueError):
            ManyBodyState(np.array([1.0, 1.0]), 1)
        with pytest.raises(ValueError):
            ManyBodyState.fock(4, 0.5)

    def test_binomial_moments(self):
        psi = ManyBodyState.binomial(40)
        assert expectation(psi, build_spin_operator("Jz", 40)) == pytest.approx(0, abs=1e-13)
        assert variance(psi, build_spin_operator("Jz", 40)) == pytest.approx(10.0, rel=1e-12)

    def test_balanced_fock_state_has_no_jz2(self):
        assert expectation(ManyBodyState.fock(8, 0), build_spin_operator("Jz2", 8)) == 0.0

    def test_expectation_matches_dense_oracle(self, rng):
        psi = random_state(rng, 8)
        op = build_spin_operator("Jx", 8)
        ref = np.vdot(psi, op.dense() @ psi).real
        assert expectation(psi, op) == pytest.approx(ref, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            expectation(ManyBodyState.binomial(4), build_spin_operator("Jx", 5))
        with pytest.raises(ValueError):
            variance(ManyBodyState.binomial(4), build_spin_operator("Jx", 5))

    def test_frequency_conversions(self):
        assert hz_to_rad(0.22) == pytest.approx(2 * math.pi * 0.22)
        assert rad_to_khz(hz_to_rad(0.3)) == pytest.approx(0.3)


def expm_stepping(psi, omegas, kappas, dt, N):
    jx = build_spin_operator("Jx", N).dense()
    jz2 = build_spin_operator("Jz2", N).dense()
    for om, ka in zip(omegas, kappas):
        psi = expm(-1j * dt * (-om * jx + 2 * ka * jz2)) @ psi
    return psi


class TestEvolution:
    def test_rabi_rotation_of_all_left_state(self):
        N, om = 10, 1.3
        tr = evolve(ManyBodyState.fock(N, N / 2), om, 0.0, (0, 3), dt=1e-4, sample_every=500)
        jz = np.abs(tr.states) ** 2 @ imbalance(N)
        np.testing.assert_allclose(jz, N / 2 * np.cos(om * tr.times), atol=2e-6)

    def test_energy_conserved_for_static_hamiltonian(self, rng):
        N = 60
        psi = ManyBodyState.from_amplitudes(random_state(rng, N))
        tr = evolve(psi, 0.6, 0.01, (0, 10), dt=1e-3, sample_every=1000)
        e = tr.energies()
        assert np.max(np.abs(e - e[0])) / abs(e[0]) < 1e-8

    def test_norm_drift_per_thousand_steps(self, rng):
        N = 100
        psi = ManyBodyState.from_amplitudes(random_state(rng, N))
        tr = evolve(psi, lambda t: 0.5 + 0.1 * np.sin(3 * t), 0.02, (0, 5), dt=1e-3,
                    sample_every=1000)
        assert np.max(np.abs(tr.norms() - 1)) < 1e-10

    def test_parity_preserved(self):
        N = 80
        g, _ = ground_state(build_hamiltonian(0.5, 0.01, N))
        tr = evolve(g, lambda t: 0.5 * (1 + 0.2 * np.sin(2 * t)),
                    lambda t: 0.01 * (1 + 0.1 * np.cos(t)), (0, 4), sample_every=400)
        mags = np.abs(tr.states)
        assert np.max(np.abs(mags - mags[:, ::-1])) < 1e-9

    @pytest.mark.parametrize("N", [1, 3, 6])
    def test_matches_dense_expm_oracle(self, rng, N):
        om = lambda t: 0.5 + 0.3 * np.sin(4.1 * t) ** 2
        ka = lambda t: 0.05 + 0.05 * np.cos(2.3 * t) ** 2
        psi0 = random_state(rng, N)
        T, dt = 0.5, 2e-5
        tr = evolve(ManyBodyState(psi0, N), om, ka, (0, T), dt=dt, sample_every=10**9)
        mid = (np.arange(round(T / dt)) + 0.5) * dt
        ref = expm_stepping(psi0, om(mid), ka(mid), dt, N)
        assert np.linalg.norm(tr.states[-1] - ref) < 1e-8

    def test_propagate_without_phase_restore_differs_only_globally(self, rng):
        psi0 = random_state(rng, 5)
        om, ka = np.full(100, 0.8), np.full(100, 0.1)
        a = propagate(psi0, om, ka, 1e-3)[-1]
        b = propagate(psi0, om, ka, 1e-3, restore_phase=False)[-1]
        assert abs(abs(np.vdot(a, b)) - 1) < 1e-13
        assert abs(np.vdot(a, b) - 1) > 1e-6

    def test_stability_guard_is_recorded_not_fatal(self):
        tr = evolve(ManyBodyState.binomial(200), 1.0, 1.0, (0, 0.1), dt=1e-2)
        assert tr.diagnostics and tr.diagnostics[0][0] == "warning"
        assert np.isfinite(tr.states).all()

    def test_step_adjusted_to_span(self):
        tr = evolve(ManyBodyState.binomial(4), 1.0, 0.1, (0, 1.0), dt=0.3)
        assert tr.times[-1] == pytest.approx(1.0)
        assert tr.dt == pytest.approx(1.0 / 3)

    def test_convergence_check_is_second_order(self):
        g, _ = ground_state(build_hamiltonian(0.6, 0.002, 200))
        om = lambda t: 0.6 * (1 + 0.3 * np.sin(2.6 * t))
        e1 = convergence_check(g, om, 0.002, (0, 2), dt=4e-3)
        e2 = convergence_check(g, om, 0.002, (0, 2), dt=2e-3)
        assert e1 / e2 == pytest.approx(4.0, rel=0.05)

    def test_trajectory_csv(self, tmp_path):
        tr = evolve(ManyBodyState.binomial(3), 1.0, 0.1, (0, 0.01), dt=1e-3, sample_every=5)
        tr.to_csv(tmp_path / "a.csv", amplitudes=True)
        rows = list(csv.reader(open(tmp_path / "a.csv")))
        assert rows[0][:6] == ["t", "Jx", "Jy", "Jz", "var_Jz", "energy"]
        assert len(rows[0]) == 6 + 2 * 4
        assert len(rows) == 1 + tr.times.size
        assert float(rows[-1][6]) == pytest.approx(tr.states[-1, 0].real)
