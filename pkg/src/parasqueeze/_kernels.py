"""Compiled Crank-Nicolson kernels for tridiagonal two-mode Hamiltonians.

The Hamiltonian handled here is

    H_k = -Omega_k (Jx - N/2) + 2 kappa_k Jz^2

i.e. the two-mode Hamiltonian with the state-independent offset Omega N / 2
added. The offset only changes the global phase but keeps the eigenvalues
seen by the Cayley map small, which is what makes dt = 1e-3 ms usable at
N = 1000.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _thomas(sub, diag, sup, rhs, out, cprime, dprime):
    n = diag.shape[0]
    cprime[0] = sup[0] / diag[0] if n > 1 else 0.0
    dprime[0] = rhs[0] / diag[0]
    for i in range(1, n):
        denom = diag[i] - sub[i - 1] * cprime[i - 1]
        if i < n - 1:
            cprime[i] = sup[i] / denom
        dprime[i] = (rhs[i] - sub[i - 1] * dprime[i - 1]) / denom
    out[n - 1] = dprime[n - 1]
    for i in range(n - 2, -1, -1):
        out[i] = dprime[i] - cprime[i] * out[i + 1]


@njit(cache=True)
def _apply(psi, diag, off, scale, out):
    # out = (1 + scale * H) psi with H real symmetric tridiagonal
    n = psi.shape[0]
    for i in range(n):
        acc = diag[i] * psi[i]
        if i > 0:
            acc += off[i - 1] * psi[i - 1]
        if i < n - 1:
            acc += off[i] * psi[i + 1]
        out[i] = psi[i] + scale * acc


@njit(cache=True)
def cn_propagate(psi0, omegas, kappas, dt, n2, ladder, half_n, store_every):
    """Propagate psi0 through len(omegas) CN steps.

    Returns the states after every ``store_every`` steps, including the
    initial state as row 0.
    """
    dim = psi0.shape[0]
    steps = omegas.shape[0]
    n_store = steps // store_every + 1
    if steps % store_every != 0:
        n_store += 1
    out = np.empty((n_store, dim), dtype=np.complex128)
    out[0] = psi0
    psi = psi0.copy()
    rhs = np.empty(dim, dtype=np.complex128)
    diag = np.empty(dim)
    off = np.empty(max(dim - 1, 1))
    adiag = np.empty(dim, dtype=np.complex128)
    aoff = np.empty(max(dim - 1, 1), dtype=np.complex128)
    cp = np.empty(dim, dtype=np.complex128)
    dp = np.empty(dim, dtype=np.complex128)
    h = 0.5j * dt
    row = 1
    for k in range(steps):
        om = omegas[k]
        ka = kappas[k]
        for i in range(dim):
            diag[i] = 2.0 * ka * n2[i] + om * half_n
            adiag[i] = 1.0 + h * diag[i]
        for i in range(dim - 1):
            off[i] = -0.5 * om * ladder[i]
            aoff[i] = h * off[i]
        _apply(psi, diag, off, -h, rhs)
        _thomas(aoff, adiag, aoff, rhs, psi, cp, dp)
        if (k + 1) % store_every == 0 or k == steps - 1:
            out[row] = psi
            row += 1
    return out


@njit(cache=True)
def cn_adjoint(chi_T, states, omegas, kappas, domegas, dkappas, dt, n2,
               ladder, half_n):
    """Backward sweep of the discrete adjoint for CN stepping.

    ``states`` holds every forward state (steps + 1 rows). Returns the
    derivative of Re<chi_T|psi_T>-type terminal functionals with respect to
    the midpoint control of each step, i.e. 2 Re <chi_{k+1}| d psi_{k+1}/d u_k>.
    """
    dim = chi_T.shape[0]
    steps = omegas.shape[0]
    grad = np.empty(steps)
    chi = chi_T.copy()
    eta = np.empty(dim, dtype=np.complex128)
    diag = np.empty(dim)
    off = np.empty(max(dim - 1, 1))
    bdiag = np.empty(dim, dtype=np.complex128)
    boff = np.empty(max(dim - 1, 1), dtype=np.complex128)
    cp = np.empty(dim, dtype=np.complex128)
    dp = np.empty(dim, dtype=np.complex128)
    s = np.empty(dim, dtype=np.complex128)
    hs = np.empty(dim, dtype=np.complex128)
    h = 0.5j * dt
    for k in range(steps - 1, -1, -1):
        om = omegas[k]
        ka = kappas[k]
        for i in range(dim):
            diag[i] = 2.0 * ka * n2[i] + om * half_n
            bdiag[i] = 1.0 - h * diag[i]
        for i in range(dim - 1):
            off[i] = -0.5 * om * ladder[i]
            boff[i] = -h * off[i]
        # eta = (1 - i dt H / 2)^{-1} chi_{k+1}
        _thomas(boff, bdiag, boff, chi, eta, cp, dp)
        # dH/du applied to psi_k + psi_{k+1}
        dom = domegas[k]
        dka = dkappas[k]
        for i in range(dim):
            s[i] = states[k, i] + states[k + 1, i]
        for i in range(dim):
            acc = (2.0 * dka * n2[i] + dom * half_n) * s[i]
            if i > 0:
                acc += -0.5 * dom * ladder[i - 1] * s[i - 1]
            if i < dim - 1:
                acc += -0.5 * dom * ladder[i] * s[i + 1]
            hs[i] = acc
        acc = 0.0j
        for i in range(dim):
            acc += np.conj(eta[i]) * hs[i]
        grad[k] = 2.0 * (-h * acc).real
        # chi_k = (1 + i dt H / 2) eta
        _apply(eta, diag, off, h, chi)
    return grad, chi
