"""Two-orbital (gerade/ungerade) grid solver and terminal-cost derivatives.

Units: hbar = 1 and mass = 1, x in micrometers, energies in rad/ms (so
hbar/m = 1 um^2/ms; for 87Rb the physical value is 0.73 um^2/ms).

Many-body state
    |Psi> = sum_k C_k |N - k, k>, k atoms in phi_u and N - k in phi_g.

Energy functional
    E = sum_ij rho_ij <phi_i|h|phi_j> + 1/2 sum_ijkl R_ijkl V_ijkl
with rho_ij = <a_i^+ a_j>, R_ijkl = <a_i^+ a_j^+ a_k a_l>,
V_ijkl = g int phi_i^* phi_j^* phi_k phi_l and h = -1/2 d^2/dx^2 + V(x; lambda).

Equations of motion (two-orbital MCTDHB with the <phi_i|dphi_j/dt> = 0 gauge)
    i dC/dt = H[phi] C
    i sum_q rho_jq dphi_q/dt = P dE/dphi_j^*
    dE/dphi_j^* = sum_q rho_jq h phi_q + g sum_skl R_jskl phi_s^* phi_k phi_l
where P projects orthogonally out of span{phi_g, phi_u}. P is built with the
inverse overlap matrix, which makes <phi_i|phi_j> an exact quadratic
invariant of the flow; the implicit-midpoint integrator below preserves such
invariants up to the fixed-point tolerance.

Time stepping: implicit midpoint. The stiff linear part -i h phi is solved
with a tridiagonal Crank-Nicolson system (second-order central differences,
Dirichlet walls at the grid ends); the remainder is iterated to a fixed
point at each step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal, solve_banded
from scipy.optimize import brentq

from .errors import DegeneratePhaseError, OrthonormalityError
from .two_mode import SpinOperator

ORTHO_ABORT = 1e-6


@dataclass(frozen=True)
class Grid1D:
    x_max: float = 3.0
    points: int = 256

    def __post_init__(self):
        if not self.x_max > 0 or self.points < 5:
            raise ValueError("grid needs x_max > 0 and at least 5 points")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(-self.x_max, self.x_max, self.points)

    @property
    def dx(self) -> float:
        return 2 * self.x_max / (self.points - 1)

    @property
    def weights(self) -> np.ndarray:
        w = np.full(self.points, self.dx)
        w[0] = w[-1] = 0.5 * self.dx
        return w

    @property
    def step(self) -> np.ndarray:
        """Heaviside theta(x) on the nodes, 1/2 at x = 0."""
        x = self.x
        tol = 1e-12 * self.x_max
        return np.where(x > tol, 1.0, np.where(x < -tol, 0.0, 0.5))

    @property
    def half_weights(self) -> np.ndarray:
        return self.weights * self.step

    def inner(self, a, b) -> complex:
        return complex(np.sum(self.weights * np.conj(a) * b))

    def refine(self, factor: int) -> "Grid1D":
        return Grid1D(self.x_max, (self.points - 1) * factor + 1)


@dataclass(frozen=True)
class SurrogatePotential:
    """V(x; lambda) = a x^4 - b(lambda) x^2 with b = b_scale (lambda - lambda_c).

    lambda <= lambda_c gives a single well at x = 0; above it the minima
    sit at +-sqrt(b / 2a) with barrier height b^2 / 4a. Both the barrier
    and the separation grow with lambda.
    """

    quartic: float = 5.0
    b_scale: float = 50.0
    lambda_c: float = 0.5
    support: tuple[float, float] = (0.0, 2.0)

    def b(self, lam: float) -> float:
        return self.b_scale * (lam - self.lambda_c)

    def minima(self, lam: float) -> np.ndarray:
        b = self.b(lam)
        if b <= 0:
            return np.array([0.0])
        x0 = math.sqrt(b / (2 * self.quartic))
        return np.array([-x0, x0])

    def barrier_height(self, lam: float) -> float:
        b = self.b(lam)
        return b * b / (4 * self.quartic) if b > 0 else 0.0

    def __call__(self, lam: float, grid: Grid1D) -> np.ndarray:
        return surrogate_potential(lam, grid, self)


def surrogate_potential(lam: float, grid: Grid1D,
                        params: SurrogatePotential = SurrogatePotential()) -> np.ndarray:
    lo, hi = params.support
    if not lo <= lam <= hi:
        raise ValueError(f"lambda={lam} outside the potential's range [{lo}, {hi}]")
    x = grid.x
    return params.quartic * x**4 - params.b(lam) * x**2


def _kinetic_bands(grid: Grid1D):
    n = grid.points - 2
    inv = 1.0 / grid.dx**2
    return np.full(n, inv), np.full(n - 1, -0.5 * inv)


def apply_h(phi: np.ndarray, V: np.ndarray, grid: Grid1D) -> np.ndarray:
    """Single-particle Hamiltonian on the grid (zero at the Dirichlet ends)."""
    out = np.zeros_like(phi, dtype=complex)
    inv = 1.0 / grid.dx**2
    inner = phi[..., 1:-1]
    out[..., 1:-1] = (inv * inner - 0.5 * inv * (phi[..., :-2] + phi[..., 2:])
                      + V[1:-1] * inner)
    return out


def single_particle_states(V: np.ndarray, grid: Grid1D, count: int = 2):
    """Lowest eigenpairs of h, normalized with trapezoid weights.

    Even states are made positive at the origin side; odd states positive
    for x > 0.
    """
    d, e = _kinetic_bands(grid)
    w, v = eigh_tridiagonal(d + V[1:-1], e, select="i", select_range=(0, count - 1))
    states = np.zeros((count, grid.points), dtype=complex)
    states[:, 1:-1] = v.T / math.sqrt(grid.dx)
    pos = grid.x > 0
    for s in states:
        ref = np.sum(s[pos].real)
        if ref < 0:
            s *= -1
    return w, states


def calibrate_surrogate(omega: float, kappa: float, lambda_ref: float,
                        grid: Grid1D = Grid1D(), quartic: float = 5.0,
                        lambda_c: float = 0.5):
    """Potential and contact strength whose two-mode reduction gives (Omega, kappa).

    Omega is matched to the gerade/ungerade splitting at lambda_ref; the
    contact strength then follows from kappa = g/2 int |phi_l|^4.
    """
    def splitting(b_scale):
        pot = SurrogatePotential(quartic, b_scale, lambda_c)
        w, _ = single_particle_states(pot(lambda_ref, grid), grid)
        return w[1] - w[0]

    lo, hi = 1.0, 2.0
    while splitting(hi) > omega:
        lo, hi = hi, hi * 2
        if hi > 1e6:
            raise ValueError("cannot reach the requested tunneling splitting")
    b_scale = brentq(lambda b: splitting(b) - omega, lo, hi, xtol=1e-12)
    pot = SurrogatePotential(quartic, b_scale, lambda_c)
    _, states = single_particle_states(pot(lambda_ref, grid), grid)
    phi_l, _ = lr_transform(states[0], states[1], 1.0)
    u = float(np.sum(grid.weights * np.abs(phi_l) ** 4))
    return pot, 2 * kappa / u


# -- g/u Fock-space operators -------------------------------------------------

def _gu_hop(N: int) -> np.ndarray:
    """a_g^+ a_u as a dense matrix: |N-k, k> -> sqrt((N-k+1) k) |N-k+1, k-1>."""
    k = np.arange(1, N + 1)
    m = np.zeros((N + 1, N + 1))
    m[k - 1, k] = np.sqrt((N - k + 1) * k)
    return m


def gu_operators(N: int) -> dict:
    """E_ij = a_i^+ a_j for i, j in {g=0, u=1} as dense (N+1)x(N+1) arrays."""
    k = np.arange(N + 1)
    egu = _gu_hop(N)
    return {(0, 0): np.diag(N - k).astype(float), (1, 1): np.diag(k).astype(float),
            (0, 1): egu, (1, 0): egu.T.copy()}


def jz_orbital(f_tilde: complex, N: int) -> SpinOperator:
    """Jz = 1/2 (f~ a_g^+ a_u + f~^* a_u^+ a_g) in the g/u occupation basis."""
    if abs(abs(f_tilde) - 1.0) > 1e-9:
        raise ValueError("f~ must have unit modulus")
    k = np.arange(1, N + 1)
    hop = np.sqrt((N - k + 1) * k)
    # element <k|Jz|k-1> comes from the a_u^+ a_g term
    return SpinOperator("Jz_orbital", N, np.zeros(N + 1),
                        0.5 * np.conj(f_tilde) * hop.astype(complex))


def compute_f(phi_g, phi_u, grid: Grid1D):
    """Half-domain overlap f = int theta(x) phi_g^* phi_u dx and f~ = f/|f|."""
    f = complex(np.sum(grid.half_weights * np.conj(phi_g) * phi_u))
    if abs(f) < 1e-12:
        raise DegeneratePhaseError(f"|f| = {abs(f):.3e}; relative phase undefined")
    return f, f / abs(f)


def lr_transform(phi_g, phi_u, f_tilde):
    s = 1 / math.sqrt(2)
    return s * (phi_g + f_tilde * phi_u), s * (phi_g - f_tilde * phi_u)


def gu_transform(phi_l, phi_r, f_tilde):
    """Inverse of ``lr_transform``."""
    s = 1 / math.sqrt(2)
    return s * (phi_l + phi_r), s * np.conj(f_tilde) * (phi_l - phi_r)


def _as_matrix(H, dim):
    if isinstance(H, np.ndarray):
        return lambda v: H @ v
    return H.apply


def cost_derivative_C(C, f_tilde, H, gamma: float, N: int) -> np.ndarray:
    """dJ_T/dC^* = Jz^2 |C> + gamma/N H |C>."""
    C = np.asarray(C, dtype=complex)
    jz = jz_orbital(f_tilde, N)
    out = jz.apply(jz.apply(C))
    if gamma:
        out = out + gamma / N * _as_matrix(H, N + 1)(C)
    return out


def orbital_cost(C, phi_g, phi_u, grid: Grid1D, H=None, gamma: float = 0.0) -> float:
    """J_T = <C|Jz(f~)^2|C> + gamma/N <C|H|C> with H held fixed."""
    C = np.asarray(C, dtype=complex)
    N = C.size - 1
    _, ft = compute_f(phi_g, phi_u, grid)
    jz_c = jz_orbital(ft, N).apply(C)
    val = float(np.vdot(jz_c, jz_c).real)
    if gamma:
        val += gamma / N * float(np.vdot(C, _as_matrix(H, N + 1)(C)).real)
    return val


def cost_derivative_orbitals(C, phi_g, phi_u, grid: Grid1D):
    """(dJ_T/dphi_g^*, dJ_T/dphi_u^*) as grid functions.

    dJz/dphi_g^* = theta phi_u / 4 (a_g^+ a_u / |f| - a_u^+ a_g (f^*)^2 / |f|^3)
    dJz/dphi_u^* = theta phi_g / 4 (a_u^+ a_g / |f| - a_g^+ a_u f^2 / |f|^3)
    contracted as <C| Jz dJz + dJz Jz |C>. Here f in the derivative factors
    is the unit phase f~ and |f| the modulus of the raw overlap; the energy
    term has no orbital dependence at fixed matrix elements. The discrete
    gradient with respect to the node values is the returned function times
    the trapezoid weight.
    """
    C = np.asarray(C, dtype=complex)
    N = C.size - 1
    f, ft = compute_f(phi_g, phi_u, grid)
    af = abs(f)
    ops = gu_operators(N)
    jz = jz_orbital(ft, N).dense()
    egu, eug = ops[(0, 1)], ops[(1, 0)]

    def anti(A):
        return complex(np.vdot(C, (jz @ A + A @ jz) @ C))

    a_gu, a_ug = anti(egu), anti(eug)
    theta = grid.step
    coef_g = (a_gu / af - a_ug * np.conj(ft) ** 2 / af) / 4.0
    coef_u = (a_ug / af - a_gu * ft**2 / af) / 4.0
    return theta * phi_u * coef_g, theta * phi_g * coef_u


# -- two-orbital dynamics -----------------------------------------------------

@dataclass
class OrbitalPair:
    phi_g: np.ndarray
    phi_u: np.ndarray
    C: np.ndarray
    grid: Grid1D
    parity: tuple[str, str] = ("even", "odd")

    def __post_init__(self):
        self.phi_g = np.asarray(self.phi_g, dtype=complex)
        self.phi_u = np.asarray(self.phi_u, dtype=complex)
        self.C = np.asarray(self.C, dtype=complex)
        if self.phi_g.shape != (self.grid.points,) or self.phi_u.shape != (self.grid.points,):
            raise ValueError("orbitals must be sampled on the grid")

    @property
    def N(self) -> int:
        return self.C.size - 1

    def overlaps(self) -> np.ndarray:
        phis = np.stack([self.phi_g, self.phi_u])
        return np.einsum("x,ix,jx->ij", self.grid.weights, phis.conj(), phis)

    def orthonormality_defect(self) -> float:
        return float(np.abs(self.overlaps() - np.eye(2)).max())

    def parity_defect(self) -> float:
        g, u = self.phi_g, self.phi_u
        return float(max(np.abs(g - g[::-1]).max(), np.abs(u + u[::-1]).max()))


def _pair_operators(N: int, ops: dict) -> np.ndarray:
    """a_i^+ a_j^+ a_k a_l = E_il E_jk - delta_jl E_ik, stacked as [i, j, k, l]."""
    out = np.empty((2, 2, 2, 2, N + 1, N + 1))
    for i, j, k, l in np.ndindex(2, 2, 2, 2):
        term = ops[(i, l)] @ ops[(j, k)]
        if j == l:
            term = term - ops[(i, k)]
        out[i, j, k, l] = term
    return out


class _FockCache:
    def __init__(self, N: int):
        self.N = N
        self.ops = gu_operators(N)
        self.one = np.stack([[self.ops[(i, j)] for j in range(2)] for i in range(2)])
        self.two = _pair_operators(N, self.ops)


def _density_matrices(C: np.ndarray, cache: _FockCache):
    rho = np.einsum("a,ijab,b->ij", C.conj(), cache.one, C)
    R = np.einsum("a,ijklab,b->ijkl", C.conj(), cache.two, C)
    return rho, R


def _two_body(phis: np.ndarray, grid: Grid1D, g: float) -> np.ndarray:
    pairs = (phis[:, None, :] * phis[None, :, :]).reshape(4, -1)
    W = (pairs.conj() * grid.weights) @ pairs.T
    return g * W.reshape(2, 2, 2, 2)


def many_body_hamiltonian(phis: np.ndarray, V: np.ndarray, grid: Grid1D, g: float,
                          N: int, cache: _FockCache | None = None) -> np.ndarray:
    """Dense H in the |N-k, k> basis for the current orbitals."""
    cache = cache or _FockCache(N)
    hphi = apply_h(phis, V, grid)
    h = np.einsum("x,ix,jx->ij", grid.weights, phis.conj(), hphi)
    W = _two_body(phis, grid, g)
    H = np.tensordot(h, cache.one, axes=2) + 0.5 * np.tensordot(W, cache.two, axes=4)
    return 0.5 * (H + H.conj().T)


def total_energy(pair: OrbitalPair, V: np.ndarray, g: float) -> float:
    phis = np.stack([pair.phi_g, pair.phi_u])
    H = many_body_hamiltonian(phis, V, pair.grid, g, pair.N)
    return float(np.vdot(pair.C, H @ pair.C).real)


def densities(pair: OrbitalPair) -> dict:
    """Occupation-weighted total density (integrates to N) and orbital densities."""
    rho, _ = _density_matrices(pair.C, _FockCache(pair.N))
    phis = np.stack([pair.phi_g, pair.phi_u])
    total = np.einsum("ij,ix,jx->x", rho, phis.conj(), phis).real
    return {"total": total, "g": np.abs(pair.phi_g) ** 2, "u": np.abs(pair.phi_u) ** 2}


def _regularize(rho: np.ndarray, eps: float) -> np.ndarray:
    w, v = np.linalg.eigh(rho)
    w = w + eps * np.exp(-w / eps)
    return (v / w) @ v.conj().T


class _Rhs:
    def __init__(self, grid, g, N, eps):
        self.grid, self.g, self.N, self.eps = grid, g, N, eps
        self.cache = _FockCache(N)

    def __call__(self, phis, C, V):
        """Non-stiff part of d(phi)/dt and the full dC/dt."""
        grid = self.grid
        w = grid.weights
        rho, R = _density_matrices(C, self.cache)
        hphi = apply_h(phis, V, grid)
        pairs = (phis[:, None, :] * phis[None, :, :]).reshape(4, -1)
        mean = self.g * np.sum((R.reshape(2, 2, 4) @ pairs) * phis.conj()[None], axis=1)
        F = rho @ hphi + mean
        rinv = _regularize(rho, self.eps)
        G = rinv @ F
        S = np.einsum("x,ix,jx->ij", w, phis.conj(), phis)
        proj = np.linalg.solve(S, np.einsum("x,ix,jx->ij", w, phis.conj(), G))
        PG = G - proj.T @ phis
        PG[:, 0] = PG[:, -1] = 0.0
        dphi = -1j * (PG - hphi)
        H = many_body_hamiltonian(phis, V, grid, self.g, self.N, self.cache)
        return dphi, -1j * (H @ C)


@dataclass
class OrbitalTrajectory:
    times: np.ndarray
    phi_g: np.ndarray
    phi_u: np.ndarray
    C: np.ndarray
    energy: np.ndarray
    lam: np.ndarray
    grid: Grid1D
    diagnostics: dict = field(default_factory=dict)

    def pair(self, i: int) -> OrbitalPair:
        return OrbitalPair(self.phi_g[i], self.phi_u[i], self.C[i], self.grid)

    def density_map(self, which: str = "total") -> np.ndarray:
        return np.array([densities(self.pair(i))[which] for i in range(self.times.size)])

    def save_density_map(self, path, which: str = "total") -> None:
        header = (f"{which} density; rows t ({self.times[0]:.6g}..{self.times[-1]:.6g} ms, "
                  f"{self.times.size} rows), columns x ({self.grid.x[0]:.6g}.."
                  f"{self.grid.x[-1]:.6g} um, {self.grid.points} columns)")
        np.savetxt(path, self.density_map(which), header=header)


def evolve_orbitals(pair: OrbitalPair, lam, g: float, t_span, dt: float = 1e-3,
                    potential: SurrogatePotential = SurrogatePotential(),
                    sample_every: int = 10, tol: float = 1e-13,
                    max_iter: int = 100, eps: float = 1e-10) -> OrbitalTrajectory:
    """Propagate the orbital pair and coefficients under V(x; lambda(t)).

    ``lam`` is a constant or a callable of time. Aborts with
    ``OrthonormalityError`` if <phi_i|phi_j> drifts by more than 1e-6.
    """
    grid = pair.grid
    lam_f = lam if callable(lam) else (lambda t, c=float(lam): c)
    t0, t1 = map(float, t_span)
    steps = max(int(round((t1 - t0) / dt)), 1)
    dt = (t1 - t0) / steps
    rhs = _Rhs(grid, g, pair.N, eps)
    d_kin, e_kin = _kinetic_bands(grid)
    n_in = grid.points - 2

    phis = np.stack([pair.phi_g, pair.phi_u]).astype(complex)
    C = pair.C.astype(complex).copy()
    S0 = pair.overlaps()

    rec_t, rec_g, rec_u, rec_c, rec_e, rec_l = [], [], [], [], [], []
    max_iters_used = 0
    max_ortho = 0.0

    def record(t, phis, C):
        lam_t = float(lam_f(t))
        V = surrogate_potential(lam_t, grid, potential)
        rec_t.append(t)
        rec_g.append(phis[0].copy())
        rec_u.append(phis[1].copy())
        rec_c.append(C.copy())
        rec_l.append(lam_t)
        H = many_body_hamiltonian(phis, V, grid, g, pair.N, rhs.cache)
        rec_e.append(float(np.vdot(C, H @ C).real))

    record(t0, phis, C)
    ab = np.zeros((3, n_in), dtype=complex)
    for step in range(steps):
        t_mid = t0 + (step + 0.5) * dt
        V = surrogate_potential(float(lam_f(t_mid)), grid, potential)
        diag = d_kin + V[1:-1]
        ab[0, 1:] = 0.5j * dt * e_kin
        ab[1] = 1 + 0.5j * dt * diag
        ab[2, :-1] = 0.5j * dt * e_kin
        explicit = phis - 0.5j * dt * apply_h(phis, V, grid)
        new_phis, new_C = phis.copy(), C.copy()
        for it in range(max_iter):
            mid_phis = 0.5 * (phis + new_phis)
            mid_C = 0.5 * (C + new_C)
            dphi, dC = rhs(mid_phis, mid_C, V)
            target = explicit + dt * dphi
            upd = np.zeros_like(phis)
            upd[:, 1:-1] = solve_banded((1, 1), ab, target[:, 1:-1].T).T
            upd_C = C + dt * dC
            change = max(np.abs(upd - new_phis).max(), np.abs(upd_C - new_C).max())
            new_phis, new_C = upd, upd_C
            if change < tol:
                break
        max_iters_used = max(max_iters_used, it + 1)
        phis, C = new_phis, new_C
        S = np.einsum("x,ix,jx->ij", grid.weights, phis.conj(), phis)
        drift = float(np.abs(S - S0).max())
        max_ortho = max(max_ortho, drift)
        if drift > ORTHO_ABORT:
            raise OrthonormalityError(
                f"orthonormality drift {drift:.3e} at t={t0 + (step + 1) * dt:.4f} ms "
                f"(fixed-point iterations used: {it + 1})")
        if (step + 1) % sample_every == 0 or step == steps - 1:
            record(t0 + (step + 1) * dt, phis, C)

    return OrbitalTrajectory(
        np.array(rec_t), np.array(rec_g), np.array(rec_u), np.array(rec_c),
        np.array(rec_e), np.array(rec_l), grid,
        {"max_orthonormality_drift": max_ortho,
         "max_fixed_point_iterations": max_iters_used, "dt": dt})


def initial_pair(lam: float, N: int, grid: Grid1D = Grid1D(),
                 potential: SurrogatePotential = SurrogatePotential(),
                 C=None) -> OrbitalPair:
    """Lowest even/odd single-particle orbitals with coefficients C.

    Without C the coefficients are the two-mode ground state of the
    resulting many-body Hamiltonian at zero interaction.
    """
    V = surrogate_potential(lam, grid, potential)
    _, states = single_particle_states(V, grid)
    if C is None:
        C = np.zeros(N + 1, dtype=complex)
        C[0] = 1.0
    C = np.asarray(C, dtype=complex)
    return OrbitalPair(states[0], states[1], C / np.linalg.norm(C), grid)
