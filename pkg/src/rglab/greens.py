"""Covariant Green's functions, averaging kernels as dense operators,
minimizers, determinant bookkeeping, and the random-walk expansion.

Operators on scalar fields are dense matrices acting on the flattened (s, 2)
component order, i.e. row/column index 2*site + component.  All adjoints are
taken in the weighted inner products (eta^3 per fine site, 1 per unit-lattice
site), so the matrix adjoint of the block average Q carries a factor L^(3k).
"""

import numpy as np
from dataclasses import dataclass

from . import blockavg as ba
from . import fields as fld
from . import lattice as lat
from .lattice import Torus


@dataclass(frozen=True)
class CoefficientSchedule:
    """Per-scale couplings and small-field exponents.

    k counts renormalization steps; the step-k fields live on the torus with
    spacing_exp k.  e and lam are the final-scale couplings, reached at k=N.
    """
    L: int = 3
    N: int = 2
    a: float = 1.0
    e: float = 0.1
    lam: float = 0.1
    p: float = 4.0
    p0: float = 2.0
    eps: float = 0.002
    beta: float = 0.05

    def __post_init__(self):
        if self.e > np.sqrt(self.lam) + 1e-15:
            raise ValueError("charge must satisfy e <= sqrt(lam)")
        if not 0 < self.beta < 1 / 12 - 11 * self.eps:
            raise ValueError("beta must lie in (0, 1/12 - 11*eps)")

    def a_k(self, k: int) -> float:
        """a_1 = a; closed form a(1 - L^-2)/(1 - L^-2k)."""
        if k < 1:
            raise ValueError("a_k defined for k >= 1")
        r = float(self.L) ** -2
        return self.a * (1 - r) / (1 - r ** k)

    def e_k(self, k: int) -> float:
        return float(self.L) ** (-(self.N - k) / 2) * self.e

    def lam_k(self, k: int) -> float:
        return float(self.L) ** (-(self.N - k)) * self.lam

    def mu_scale(self, k: int, mu_N: float) -> float:
        return float(self.L) ** (-2 * (self.N - k)) * mu_N

    def p_k(self, k: int) -> float:
        return (-np.log(self.lam_k(k))) ** self.p

    def p0_k(self, k: int) -> float:
        return (-np.log(self.lam_k(k))) ** self.p0


# ---------------------------------------------------------------------------
# dense operator builders

def flatten(field):
    return np.asarray(field).reshape(-1)


def unflatten(v):
    return np.asarray(v).reshape(-1, 2)


def rot_blockdiag(theta):
    """Block-diagonal rotation by a per-site angle field, shape (2s, 2s)."""
    theta = np.asarray(theta)
    s = theta.shape[0]
    M = np.zeros((2 * s, 2 * s), dtype=np.result_type(theta, float))
    i = np.arange(s)
    c, sn = np.cos(theta), np.sin(theta)
    M[2 * i, 2 * i] = c
    M[2 * i, 2 * i + 1] = -sn
    M[2 * i + 1, 2 * i] = sn
    M[2 * i + 1, 2 * i + 1] = c
    return M


def conjugation_blockdiag(s):
    C = np.eye(2 * s)
    C[1::2, 1::2] *= -1
    return C


def shift_phase_matrix(t: Torus, A, mu: int, ek: float):
    """(M f)(x) = R(ek eta A_mu(x)) f(x + eta e_mu) as a dense matrix."""
    theta = ek * t.eta * np.asarray(A[mu])
    M = np.zeros((2 * t.s, 2 * t.s), dtype=np.result_type(theta, float))
    x = np.arange(t.s)
    n = t.nbr_plus[mu]
    c, sn = np.cos(theta), np.sin(theta)
    M[2 * x, 2 * n] = c
    M[2 * x, 2 * n + 1] = -sn
    M[2 * x + 1, 2 * n] = sn
    M[2 * x + 1, 2 * n + 1] = c
    return M


def minus_laplacian_matrix(t: Torus, A, ek: float):
    """Covariant second-difference operator sum_mu d^T d; the matrix
    transpose is the eta^3-weighted adjoint, so this is symmetric."""
    s2 = 2 * t.s
    out = np.zeros((s2, s2), dtype=np.result_type(np.asarray(A), float))
    eye = np.eye(s2)
    for mu in range(3):
        M = shift_phase_matrix(t, A, mu, ek)
        out += 2 * eye - M - M.T
    return out / t.eta ** 2


def averaging_mass_matrix(t: Torus, A, sched, k: int):
    """a_k Q_k^T Q_k for k >= 1; at k = 0 the one-step fluctuation mass
    a L^-2 Q^T Q that opens the cascade."""
    if k != t.k:
        raise ValueError("schedule step must match the torus spacing")
    ek = sched.e_k(k)
    if k == 0:
        Q = ba.q_top_matrix(t, A, ek)
        return (sched.a / t.L ** 2) * (t.L ** 3 * (Q.T @ Q))
    Q = ba.qk_matrix(t, A, ek, k)
    return sched.a_k(k) * (float(t.L) ** (3 * k) * (Q.T @ Q))


def generator_matrix(t: Torus, A, sched, k: int):
    """-Delta_A + a_k Q_k^T Q_k, the inverse of the level-k Green's
    function.  Requires k >= 1 and t at spacing L^-k."""
    if k < 1:
        raise ValueError("the level generator needs k >= 1")
    return minus_laplacian_matrix(t, A, sched.e_k(k)) + averaging_mass_matrix(t, A, sched, k)


def rw_generator_matrix(t: Torus, A, sched, k: int):
    """Generator used by the parametrix expansion: the level generator for
    k >= 1, the one-step fluctuation form -Delta + a L^-2 Q^T Q at k = 0."""
    if k >= 1:
        return generator_matrix(t, A, sched, k)
    return minus_laplacian_matrix(t, A, sched.e_k(0)) + averaging_mass_matrix(t, A, sched, 0)


def greens_matrix(t: Torus, A, sched, k: int):
    return np.linalg.inv(generator_matrix(t, A, sched, k))


def a_seq(sched, kmax: int):
    """Closed-form schedule a_k = a (1 - L^-2)/(1 - L^-2k), k = 1..kmax."""
    return np.array([sched.a_k(k) for k in range(1, kmax + 1)])


def a_seq_recursive(sched, kmax: int):
    """Same sequence by the one-step recursion a' = a a_k/(a_k + a L^-2)."""
    r = sched.a / sched.L ** 2
    out, cur = [], sched.a
    for _ in range(kmax):
        out.append(cur)
        cur = sched.a * cur / (cur + r)
    return np.array(out)


# ---------------------------------------------------------------------------
# background perturbation

def _deriv_matrix(t: Torus, A, mu: int, ek: float):
    return (shift_phase_matrix(t, A, mu, ek) - np.eye(2 * t.s)) / t.eta


def _bond_factor_matrix(t: Torus, Ap, mu: int, ek: float):
    # block-diagonal (R(ek eta Ap_mu) - 1)/eta
    th = ek * t.eta * np.asarray(Ap[mu])
    M = np.zeros((2 * t.s, 2 * t.s), dtype=np.result_type(th, float))
    i = np.arange(t.s)
    c, sn = (np.cos(th) - 1.0) / t.eta, np.sin(th) / t.eta
    M[2 * i, 2 * i] = c
    M[2 * i, 2 * i + 1] = -sn
    M[2 * i + 1, 2 * i] = sn
    M[2 * i + 1, 2 * i + 1] = c
    return M


def perturbation_matrix(t: Torus, A, Aprime, sched, k: int):
    """Generator shift U(A, A') assembled from bond factors against the
    covariant derivative and average-kernel factors against Q; equals the
    literal generator difference up to regrouping."""
    A = np.asarray(A)
    Aprime = np.asarray(Aprime)
    ek = sched.e_k(k)
    out = np.zeros((2 * t.s, 2 * t.s), dtype=np.result_type(A, Aprime, float))
    for mu in range(3):
        D = _deriv_matrix(t, A, mu, ek)
        F = _bond_factor_matrix(t, -Aprime, mu, ek)
        out += -F.T @ D - D.T @ F + F.T @ F
    if k >= 1:
        coef = sched.a_k(k)
        w = float(t.L) ** (3 * k)
        Q0 = ba.qk_matrix(t, A, ek, k)
        Fq = ba.qk_matrix(t, A + Aprime, ek, k) - Q0
    else:
        coef = sched.a / t.L ** 2
        w = float(t.L) ** 3
        Q0 = ba.q_top_matrix(t, A, ek)
        Fq = ba.q_top_matrix(t, A + Aprime, ek) - Q0
    out += coef * w * (Fq.T @ Q0 + Q0.T @ Fq + Fq.T @ Fq)
    return out


def generator_difference(t: Torus, A, Aprime, sched, k: int):
    """Literal difference of generators, the cross-check for the assembled
    perturbation operator."""
    A = np.asarray(A)
    return rw_generator_matrix(t, A + np.asarray(Aprime), sched, k) - rw_generator_matrix(t, A, sched, k)


def perturbation_slope(t: Torus, A, Aprime, sched, k: int, h: float = 1e-3):
    """Central-difference first-order perturbation operator in t A'."""
    Up = perturbation_matrix(t, A, h * np.asarray(Aprime), sched, k)
    Um = perturbation_matrix(t, A, -h * np.asarray(Aprime), sched, k)
    return (Up - Um) / (2 * h)


def background_derivative_residual(t: Torus, A, Aprime, sched, k: int, h: float = 1e-3):
    """Resolvent-identity check: the background derivative of G equals
    -G U' G with U' the first-order perturbation."""
    A = np.asarray(A)
    Gp = np.linalg.inv(rw_generator_matrix(t, A + h * np.asarray(Aprime), sched, k))
    Gm = np.linalg.inv(rw_generator_matrix(t, A - h * np.asarray(Aprime), sched, k))
    fd = (Gp - Gm) / (2 * h)
    G = np.linalg.inv(rw_generator_matrix(t, A, sched, k))
    pred = -G @ perturbation_slope(t, A, Aprime, sched, k, h) @ G
    return float(np.abs(fd - pred).max() / max(np.abs(fd).max(), 1e-300))


def perturbation_bound_report(t: Torus, A, Aprime, sched, k: int, f):
    """Measured constant in the local sup bound for U against the local
    field and gradient sizes.  Cubes are unit cells, enlargements 3 units."""
    ek = sched.e_k(k)
    A = np.asarray(A)
    Aprime = np.asarray(Aprime)
    Uf = unflatten(perturbation_matrix(t, A, Aprime, sched, k) @ flatten(f))
    step = t.L ** t.k
    members = lat.block_members(t, t.k)
    centers = lat.L_sublattice_coords(t, step)
    best = 0.0
    for y in range(len(centers)):
        cube = members[y]
        win = np.max(np.abs(lat.wrap_delta(t, t.coords, centers[y][None, :])), axis=-1) <= (3 * step - 1) // 2
        a_loc = np.abs(Aprime[:, win]).max()
        da = max(np.abs((Aprime[mu][t.nbr_plus[nu]] - Aprime[mu])[win]).max() / t.eta
                 for mu in range(3) for nu in range(3))
        f_loc = np.abs(f[win]).max()
        df = max(np.abs(fld.cov_deriv(t, A, f, mu, ek)[win]).max() for mu in range(3))
        num = np.abs(Uf[cube]).max()
        den = ek * (a_loc + da) * (f_loc + df)
        if den > 0:
            best = max(best, num / den)
    return {"constant": float(best)}


# ---------------------------------------------------------------------------
# minimizers and one-step fluctuation covariance

def minimizer_matrix(t: Torus, A, sched, k: int):
    """Map from unit-sublattice data to the minimizing fine field,
    a_k G_k Q_k^T in the weighted adjoint; identity at k = 0."""
    if k != t.k:
        raise ValueError("schedule step must match the torus spacing")
    if k == 0:
        return np.eye(2 * t.s)
    Q = ba.qk_matrix(t, A, sched.e_k(k), k)
    G = greens_matrix(t, A, sched, k)
    return sched.a_k(k) * (G @ (float(t.L) ** (3 * k) * Q.T))


def reconstruction_matrix(t: Torus, A, sched, k: int):
    """T_k = Q_k + a_k^-1 Q_k (-Delta_A), the left inverse of the
    minimizer map."""
    Q = ba.qk_matrix(t, A, sched.e_k(k), k)
    lap = minus_laplacian_matrix(t, A, sched.e_k(k))
    return Q + (Q @ lap) / sched.a_k(k)


def coarse_energy_matrix(t: Torus, A, sched, k: int):
    """Quadratic form of the minimized level-k action on unit-sublattice
    data: a_k (1 - a_k Q_k G_k Q_k^T); the covariant Laplacian at k = 0."""
    if k != t.k:
        raise ValueError("schedule step must match the torus spacing")
    if k == 0:
        return minus_laplacian_matrix(t, A, sched.e_k(0))
    ak = sched.a_k(k)
    Q = ba.qk_matrix(t, A, sched.e_k(k), k)
    G = greens_matrix(t, A, sched, k)
    QT = float(t.L) ** (3 * k) * Q.T
    return ak * np.eye(Q.shape[0], dtype=Q.dtype) - ak ** 2 * (Q @ G @ QT)


def step_mass_matrix(t: Torus, A, sched):
    """One-step block mass a L^-2 Q^T Q on the unit sublattice."""
    Q = ba.q_top_matrix(t, A, sched.e_k(t.k))
    return (sched.a / t.L ** 2) * (t.L ** 3 * (Q.T @ Q))


def step_form_matrix(t: Torus, A, sched, k: int):
    """Quadratic form of the single fluctuation integral; its inverse is
    the step covariance."""
    return coarse_energy_matrix(t, A, sched, k) + step_mass_matrix(t, A, sched)


def step_covariance_matrix(t: Torus, A, sched, k: int):
    return np.linalg.inv(step_form_matrix(t, A, sched, k))


def step_minimizer_matrix(t: Torus, A, sched, k: int):
    """One-step minimizer from L-sublattice data: a L^-2 C_k Q^T."""
    C = step_covariance_matrix(t, A, sched, k)
    Q = ba.q_top_matrix(t, A, sched.e_k(k))
    return (sched.a / t.L ** 2) * (C @ (t.L ** 3 * Q.T))


def coarse_energy_forms(t: Torus, A, sched, k: int, Phi):
    """The coarse quadratic form evaluated directly and assembled from the
    minimizer: a_k |Phi - Q_k (H Phi)|^2 + |d_A (H Phi)|^2."""
    direct = flatten(Phi) @ coarse_energy_matrix(t, A, sched, k) @ flatten(Phi)
    H = minimizer_matrix(t, A, sched, k)
    psi = unflatten(H @ flatten(Phi))
    ek = sched.e_k(k)
    mism = Phi - ba.qk_apply(t, A, psi, ek, k)[1]
    grad2 = t.w_site * (flatten(psi) @ minus_laplacian_matrix(t, A, ek) @ flatten(psi))
    assembled = sched.a_k(k) * np.sum(mism * mism) + grad2
    return float(direct), float(assembled)


def completion_residual(t: Torus, A, sched, k: int, phi, Phi1):
    """Two-level completion of the square: the one-step kernel exponent at
    the minimizing unit-sublattice field plus the minimized level-k
    exponent equals the composed (k+1)-level exponent."""
    L = t.L
    ek = sched.e_k(k)
    ak, ak1, a = sched.a_k(k), sched.a_k(k + 1), sched.a
    Qk_phi = ba.qk_apply(t, A, phi, ek, k)[1]
    Qk1_phi = ba.q_top_apply(t, A, Qk_phi, ek)
    c = (a / L ** 2) / (ak + a / L ** 2)
    Phimin = Qk_phi + c * (ba.q_top_adjoint(t, A, Phi1, ek)
                           - ba.q_top_adjoint(t, A, Qk1_phi, ek))
    w1 = float(L) ** 3
    lhs = (a / (2 * L ** 2)) * w1 * np.sum((Phi1 - ba.q_top_apply(t, A, Phimin, ek)) ** 2) \
        + (ak / 2) * np.sum((Phimin - Qk_phi) ** 2)
    rhs = (ak1 / (2 * L ** 2)) * w1 * np.sum((Phi1 - Qk1_phi) ** 2)
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return {"lhs": float(lhs), "rhs": float(rhs),
            "residual": float(abs(lhs - rhs) / scale), "Phimin": Phimin}


def minimizer_consistency_residual(t_next: Torus, A, sched, k: int, Phi):
    """Scaling consistency across one step: the scaled-step minimizer fed
    through the one-step minimizer reproduces the next-level minimizer."""
    rhs_fine = unflatten(minimizer_matrix(t_next, A, sched, k + 1) @ flatten(Phi))
    _, rhs = fld.scale_up(t_next, rhs_fine, "scalar")
    tL, AL = fld.scale_up(t_next, A, "gauge")
    # the relabeling onto the L-sublattice of tL is the identity on arrays
    PhiL = flatten(Phi) / np.sqrt(t_next.L)
    mid = step_minimizer_matrix(tL, AL, sched, k) @ PhiL
    lhs = unflatten(minimizer_matrix(tL, AL, sched, k) @ mid)
    return float(np.abs(lhs - rhs).max() / max(np.abs(rhs).max(), 1e-300))


# ---------------------------------------------------------------------------
# free-flow identities: Gaussian normalizations and observable flow

def normalization_recursion_report(t_next: Torus, A, sched, k: int):
    """Log-domain one-step recursion for the Gaussian normalizations: the
    next-level normalized partition value equals the scaled-level value
    times the fluctuation-step value and a pure scaling factor.

    Quadratic forms carry the w_site (fine) and unit (coarse) weights; the
    integration measures are unweighted Lebesgue per site component.
    """
    if k < 1:
        raise ValueError("the recursion starts at k >= 1")
    if np.iscomplexobj(A):
        raise ValueError("log determinants need a real background")
    L = t_next.L
    s_fine = t_next.s
    s0_next = (t_next.n // L ** t_next.k) ** 3
    sign, logdet = np.linalg.slogdet(t_next.w_site * generator_matrix(t_next, A, sched, k + 1))
    lhs = s0_next * np.log(sched.a_k(k + 1) / (2 * np.pi)) \
        + s_fine * np.log(2 * np.pi) - 0.5 * logdet
    tL, AL = fld.scale_up(t_next, A, "gauge")
    s0_L = (tL.n // L ** tL.k) ** 3
    signL, logdetL = np.linalg.slogdet(tL.w_site * generator_matrix(tL, AL, sched, k))
    signf, logdetf = np.linalg.slogdet(step_form_matrix(tL, AL, sched, k))
    rhs = s0_L * np.log(sched.a_k(k) / (2 * np.pi)) \
        + s0_next * np.log(sched.a * L / (2 * np.pi)) \
        + s_fine * np.log(2 * np.pi) - 0.5 * logdetL \
        + s0_L * np.log(2 * np.pi) - 0.5 * logdetf \
        + (s_fine - s0_next) * np.log(L)
    return {"lhs": float(lhs), "rhs": float(rhs), "diff": float(abs(lhs - rhs)),
            "signs": (float(sign), float(signL), float(signf))}


def quad_observable_value(t: Torus, k: int, Mq, b, c, psi):
    """Value of a level-k observable written in final-lattice coordinates:
    the field is carried through k scalings (a pure relabel times
    L^(-k/2)) and fed to the quadratic form (Mq, b, c)."""
    g = flatten(psi) * float(t.L) ** (-k / 2.0)
    return float(g @ Mq @ g + b @ g) + c


def observable_flow_step(t_next: Torus, A, sched, k: int, Mq, b, c):
    """One step of the observable flow: integrate the fluctuation along the
    minimizer.  The Gaussian integral is done in closed form twice, by the
    trace formula and by eigenvalue summation; the step leaves Mq and b
    unchanged and shifts the constant."""
    tL, AL = fld.scale_up(t_next, A, "gauge")
    Hk = minimizer_matrix(tL, AL, sched, k)
    Ck = step_covariance_matrix(tL, AL, sched, k)
    Mfine = float(tL.L) ** (-k) * (Hk.T @ Mq @ Hk)
    tr_term = float(np.trace(Mfine @ Ck))
    w, V = np.linalg.eigh((Ck + Ck.T) / 2)
    Ms = (Mfine + Mfine.T) / 2
    eig_term = float(w @ np.einsum("ij,ij->j", V, Ms @ V))
    return {"Mq": Mq, "b": b, "c_trace": c + tr_term, "c_eig": c + eig_term,
            "trace_term": tr_term, "eig_term": eig_term}


# ---------------------------------------------------------------------------
# region-restricted operators

def unit_cube_mask(t: Torus, ys, j=None):
    """Boolean site mask for a union of level-j blocks (default level t.k)."""
    j = t.k if j is None else j
    mask = np.zeros(t.s, dtype=bool)
    mask[lat.block_members(t, j)[np.asarray(ys, dtype=int)]] = True
    return mask


def window_mask(t: Torus, center, width_sites: int):
    """Cube window of odd site width centered at a coordinate triple."""
    if width_sites % 2 == 0:
        raise ValueError("window width must be odd")
    d = lat.wrap_delta(t, t.coords, np.asarray(center)[None, :])
    return np.max(np.abs(d), axis=-1) <= (width_sites - 1) // 2


def _neumann_local(t: Torus, A, sched, k: int, mask):
    """Region-restricted generator on the region's own degrees of freedom:
    only bonds with both ends inside enter the derivative part, and only
    averaging blocks wholly inside contribute mass.  Returns the local
    matrix and the site list, so large tori never allocate global size."""
    if k != t.k:
        raise ValueError("schedule step must match the torus spacing")
    A = np.asarray(A)
    ek = sched.e_k(k)
    mask = np.asarray(mask, dtype=bool)
    sites = np.flatnonzero(mask)
    pos = np.full(t.s, -1)
    pos[sites] = np.arange(len(sites))
    w2 = 2 * len(sites)
    out = np.zeros((w2, w2), dtype=np.result_type(A, float))
    e2 = 1.0 / t.eta ** 2
    x = np.arange(t.s)
    for mu in range(3):
        nb = t.nbr_plus[mu]
        keep = mask & mask[nb]
        xs, ns = pos[x[keep]], pos[nb[keep]]
        c = np.cos(ek * t.eta * A[mu][keep]) * e2
        sn = np.sin(ek * t.eta * A[mu][keep]) * e2
        np.add.at(out, (2 * xs, 2 * xs), e2)
        np.add.at(out, (2 * xs + 1, 2 * xs + 1), e2)
        np.add.at(out, (2 * ns, 2 * ns), e2)
        np.add.at(out, (2 * ns + 1, 2 * ns + 1), e2)
        np.add.at(out, (2 * xs, 2 * ns), -c)
        np.add.at(out, (2 * xs, 2 * ns + 1), sn)
        np.add.at(out, (2 * xs + 1, 2 * ns), -sn)
        np.add.at(out, (2 * xs + 1, 2 * ns + 1), -c)
        np.add.at(out, (2 * ns, 2 * xs), -c)
        np.add.at(out, (2 * ns, 2 * xs + 1), -sn)
        np.add.at(out, (2 * ns + 1, 2 * xs), sn)
        np.add.at(out, (2 * ns + 1, 2 * xs + 1), -c)
    if k == 0:
        theta_q, owner = ba._top_step_theta(t, A, ek)
        members = lat.block_members(t, 1)
        coef, w, wavg = sched.a / t.L ** 2, float(t.L) ** 3, t.L ** -3.0
    else:
        theta_q = ek * t.eta * ba.tau_k_field(t, A, k)
        owner = lat.site_block(t, k)
        members = lat.block_members(t, k)
        coef, w, wavg = sched.a_k(k), float(t.L) ** (3 * k), float(t.L) ** (-3 * k)
    full = np.flatnonzero(mask[members].all(axis=1))
    if len(full):
        remap = np.full(members.shape[0], -1)
        remap[full] = np.arange(len(full))
        inb = np.flatnonzero(mask & (remap[owner] >= 0))
        Qloc = np.zeros((2 * len(full), w2), dtype=out.dtype)
        r, cpos = remap[owner[inb]], pos[inb]
        cq, sq = np.cos(theta_q[inb]) * wavg, np.sin(theta_q[inb]) * wavg
        Qloc[2 * r, 2 * cpos] = cq
        Qloc[2 * r, 2 * cpos + 1] = -sq
        Qloc[2 * r + 1, 2 * cpos] = sq
        Qloc[2 * r + 1, 2 * cpos + 1] = cq
        out += coef * w * (Qloc.T @ Qloc)
    return out, sites


def neumann_generator_matrix(t: Torus, A, sched, k: int, mask):
    """Region-restricted generator embedded at global size, with zero rows
    and columns outside the region."""
    W, sites = _neumann_local(t, A, sched, k, mask)
    idx = _mask_dofs(np.asarray(mask, dtype=bool))
    out = np.zeros((2 * t.s, 2 * t.s), dtype=W.dtype)
    out[np.ix_(idx, idx)] = W
    return out


def _mask_dofs(mask):
    idx = np.repeat(2 * np.flatnonzero(np.asarray(mask, dtype=bool)), 2)
    idx[1::2] += 1
    return idx


def local_greens(t: Torus, A, sched, k: int, mask):
    """Inverse of the region-restricted generator on the region, embedded
    with zeros outside."""
    if k == 0:
        members = lat.block_members(t, 1)
    else:
        members = lat.block_members(t, k)
    if not np.asarray(mask, dtype=bool)[members].all(axis=1).any():
        raise ValueError("region contains no complete averaging block")
    W, _ = _neumann_local(t, A, sched, k, mask)
    idx = _mask_dofs(mask)
    G = np.zeros((2 * t.s, 2 * t.s), dtype=W.dtype)
    G[np.ix_(idx, idx)] = np.linalg.inv(W)
    return G


def _op_norm_inf(M):
    return float(np.abs(M).sum(axis=1).max())


def _fit_ratio(norms):
    # geometric fit over the recorded orders, skipping zeros
    v = np.asarray(norms, dtype=float)
    keep = v > 0
    if keep.sum() < 2:
        return 0.0
    n = np.arange(len(v))[keep]
    slope = np.polyfit(n, np.log(v[keep]), 1)[0]
    return float(np.exp(slope))


def neumann_series_report(t: Torus, A, Aprime, sched, k: int, mask, orders: int = 8):
    """Perturbation series for the region Green's function around the
    background A, against the dense inverse at A + A'.  Divergence is
    reported through the measured ratios, never truncated silently."""
    A = np.asarray(A)
    s0, _ = _neumann_local(t, A, sched, k, mask)
    s1, _ = _neumann_local(t, A + np.asarray(Aprime), sched, k, mask)
    G0 = np.linalg.inv(s0)
    Gfull = np.linalg.inv(s1)
    X = -G0 @ (s1 - s0)
    term = G0.copy()
    partial = G0.copy()
    ref = _op_norm_inf(Gfull)
    norms = [_op_norm_inf(term)]
    residuals = [_op_norm_inf(partial - Gfull) / ref]
    for _ in range(orders):
        term = X @ term
        partial = partial + term
        norms.append(_op_norm_inf(term))
        residuals.append(_op_norm_inf(partial - Gfull) / ref)
    ratios = [norms[i + 1] / norms[i] for i in range(len(norms) - 1) if norms[i] > 0]
    fitted = _fit_ratio(norms)
    return {"norms": norms, "ratios": ratios, "residuals": residuals,
            "fitted_ratio": fitted, "diverges": bool(fitted >= 1.0)}


# ---------------------------------------------------------------------------
# partition of unity and the random-walk expansion

def bump_profile(u, munits):
    """Per-axis raised-cosine weight: 1 on the cube core, cosine ramp on
    the overlap of width munits/4, 0 outside; adjacent squares sum to 1."""
    u = np.abs(np.asarray(u, dtype=float))
    lo, hi = 3 * munits / 8.0, 5 * munits / 8.0
    out = np.ones_like(u)
    out[u >= hi] = 0.0
    ramp = (u > lo) & (u < hi)
    out[ramp] = np.cos(np.pi / 2 * (u[ramp] - lo) / (hi - lo))
    return out


def cube_bumps(t: Torus, munits: int):
    """Tensor-product bumps centered on the M-cube grid, shape (nz, s).
    The squares sum to 1 exactly; a single cube degenerates to the
    constant weight."""
    msites = munits * t.L ** t.k
    if t.n % msites:
        raise ValueError("cube side must divide the torus side")
    centers = lat.cube_centers(t, msites)
    H = np.ones((len(centers), t.s))
    if t.n // msites == 1:
        return centers, H
    for axis in range(3):
        d = (t.coords[None, :, axis] - centers[:, None, axis]) % t.n
        d = np.where(d > t.n // 2, d - t.n, d)
        H *= bump_profile(d * t.eta, munits)
    return centers, H


def _window_width_sites(t: Torus, munits: int, width_sites=None):
    msites = munits * t.L ** t.k
    if width_sites is None:
        width_sites = 3 * msites + (msites % 2 == 0)
    elif width_sites < t.n and width_sites < 2 * msites + 1:
        raise ValueError("window too tight for the bump support and margin")
    return min(width_sites, t.n)


def _cube_windows(t: Torus, A, sched, k: int, munits: int, width_sites=None):
    """Per-cube enlarged-window Green's functions and the cubes covered by
    each window.  A window that wraps the whole torus reuses the dense
    periodic inverse."""
    msites = munits * t.L ** t.k
    width = _window_width_sites(t, munits, width_sites)
    centers, H = cube_bumps(t, munits)
    nz = len(centers)
    covered = []
    if width >= t.n:
        G = np.linalg.inv(rw_generator_matrix(t, A, sched, k))
        Gz = [G] * nz
        covered = [frozenset(range(nz))] * nz
    else:
        Gz = []
        reach = (width - msites) // 2
        for z in range(nz):
            mask = window_mask(t, centers[z], width)
            Gz.append(local_greens(t, A, sched, k, mask))
            d = (centers[:, None] - centers[z][None, None]) % t.n
            d = np.where(d > t.n // 2, d - t.n, d)
            covered.append(frozenset(np.flatnonzero(np.max(np.abs(d), axis=-1).ravel() <= reach)))
    return centers, H, Gz, covered


def random_walk_report(t: Torus, A, sched, k: int, munits: int, max_order: int = 6,
                       rng=None, width_sites=None):
    """Parametrix expansion of the level-k Green's function over M-cubes.

    The parametrix stitches window inverses with the bump partition; the
    remainder operator K collects the commutator terms.  Reports per-order
    norms and ratios, residuals against the dense inverse, and the
    measured commutator constant.  A non-contracting K shows up as a
    fitted ratio >= 1 in the report rather than an exception.
    """
    O = rw_generator_matrix(t, A, sched, k)
    G = np.linalg.inv(O)
    centers, H, Gz, covered = _cube_windows(t, A, sched, k, munits, width_sites)
    nz = len(centers)
    h2 = np.repeat(H, 2, axis=1)
    Gstar = np.zeros_like(Gz[0])
    for z in range(nz):
        Gstar += h2[z][:, None] * Gz[z] * h2[z][None, :]
    K = np.eye(2 * t.s, dtype=Gstar.dtype) - O @ Gstar
    # bump rows of the periodic generator must agree with the window one
    width = _window_width_sites(t, munits, width_sites)
    ON = neumann_generator_matrix(t, A, sched, k, window_mask(t, centers[0], width))
    margin = float(np.abs(h2[0][:, None] * (O - ON)).max())
    ref = _op_norm_inf(G)
    term = Gstar.copy()
    partial = Gstar.copy()
    norms = [_op_norm_inf(term)]
    residuals = [_op_norm_inf(partial - G) / ref]
    for _ in range(max_order):
        term = term @ K
        partial = partial + term
        norms.append(_op_norm_inf(term))
        residuals.append(_op_norm_inf(partial - G) / ref)
    ratios = [norms[i + 1] / norms[i] for i in range(len(norms) - 1) if norms[i] > 0]
    rng = np.random.default_rng(0) if rng is None else rng
    cmax = 0.0
    for _ in range(3):
        f = rng.normal(size=2 * t.s)
        fref = np.abs(f).max()
        for z in range(nz):
            piece = h2[z] ** 2 * f - O @ (h2[z] * (Gz[z] @ (h2[z] * f)))
            cmax = max(cmax, np.abs(piece).max() / fref)
    return {"norms": norms, "ratios": ratios, "residuals": residuals,
            "fitted_ratio": _fit_ratio(norms[1:]) if len(norms) > 2 else 0.0,
            "spectral_radius": float(np.abs(np.linalg.eigvals(K)).max()),
            "commutator_constant": float(cmax * munits),
            "margin_residual": margin,
            "K": K, "Gstar": Gstar, "G": G, "covered": covered, "centers": centers}


# ---------------------------------------------------------------------------
# matrix-free walk on tori too large for dense inverses

class _BatchedLevelOp:
    """Matrix-free level generator acting on column batches (s, 2, B).

    Real backgrounds only; the operator is then symmetric positive
    definite and conjugate gradients apply.
    """

    def __init__(self, t: Torus, A, sched, k: int):
        if k != t.k:
            raise ValueError("schedule step must match the torus spacing")
        A = np.asarray(A, dtype=float)
        ek = sched.e_k(k)
        self.t = t
        self.inv_eta2 = 1.0 / t.eta ** 2
        self.cos, self.sin = [], []
        for mu in range(3):
            th = ek * t.eta * A[mu]
            self.cos.append(np.cos(th))
            self.sin.append(np.sin(th))
        if k == 0:
            theta_q, owner = ba._top_step_theta(t, A, ek)
            self.coef = sched.a / t.L ** 2
            self.nb = (t.n // t.L) ** 3
        else:
            theta_q = ek * t.eta * ba.tau_k_field(t, A, k)
            owner = lat.site_block(t, k)
            self.coef = sched.a_k(k)
            self.nb = (t.n // t.L ** k) ** 3
        self.cq, self.sq = np.cos(theta_q), np.sin(theta_q)
        self.owner = owner
        self.block_mean = float(t.L) ** (-3 * k) if k else t.L ** -3.0

    def _rot(self, c, s, V):
        return np.stack([c[:, None] * V[:, 0] - s[:, None] * V[:, 1],
                         s[:, None] * V[:, 0] + c[:, None] * V[:, 1]], axis=1)

    def lap(self, V):
        t = self.t
        out = 6.0 * V.copy()
        for mu in range(3):
            c, s = self.cos[mu], self.sin[mu]
            out -= self._rot(c, s, V[t.nbr_plus[mu]])
            j = t.nbr_minus[mu]
            out -= self._rot(c[j], -s[j], V[j])
        return out * self.inv_eta2

    def mass(self, V):
        acc = np.zeros((self.nb,) + V.shape[1:], dtype=V.dtype)
        np.add.at(acc, self.owner, self._rot(self.cq, self.sq, V))
        acc *= self.block_mean
        back = acc[self.owner]
        return self.coef * self._rot(self.cq, -self.sq, back)

    def op(self, V):
        return self.lap(V) + self.mass(V)

    def solve(self, B, rtol=1e-9, maxiter=6000):
        """Lockstep conjugate gradients over the batch columns."""
        X = np.zeros_like(B)
        R = B.copy()
        P = R.copy()
        rs = np.sum(R * R, axis=(0, 1))
        b0 = np.sqrt(np.sum(B * B, axis=(0, 1)))
        b0 = np.where(b0 > 0, b0, 1.0)
        for _ in range(maxiter):
            AP = self.op(P)
            den = np.sum(P * AP, axis=(0, 1))
            alpha = np.where(den > 0, rs / np.where(den > 0, den, 1.0), 0.0)
            X += alpha[None, None, :] * P
            R -= alpha[None, None, :] * AP
            rs_new = np.sum(R * R, axis=(0, 1))
            if np.all(np.sqrt(rs_new) <= rtol * b0):
                return X
            P = R + (rs_new / np.where(rs > 0, rs, 1.0))[None, None, :] * P
            rs = rs_new
        raise RuntimeError("conjugate gradient did not converge")


def random_walk_probe_report(t: Torus, A, sched, k: int, munits: int,
                             max_order: int = 3, probes: int = 1,
                             rng=None, rtol=1e-8, width_sites=None):
    """Per-order decay of the parametrix expansion measured on random
    probe fields, fully matrix-free.  Needs windows that wrap the torus
    (3M >= side), so each window inverse is the periodic solve."""
    if _window_width_sites(t, munits, width_sites) < t.n:
        raise ValueError("probe walk expects wrapping windows; use the dense path")
    op = _BatchedLevelOp(t, A, sched, k)
    centers, H = cube_bumps(t, munits)
    nz = len(centers)
    rng = np.random.default_rng(0) if rng is None else rng
    F = rng.normal(size=(t.s, 2, probes))

    def gstar(V):
        nb = V.shape[2]
        cols = np.empty((t.s, 2, nz * nb))
        for z in range(nz):
            cols[:, :, z * nb:(z + 1) * nb] = H[z][:, None, None] * V
        sol = op.solve(cols, rtol)
        out = np.zeros_like(V)
        for z in range(nz):
            out += H[z][:, None, None] * sol[:, :, z * nb:(z + 1) * nb]
        return out

    Gf = op.solve(F, min(rtol, 1e-10))
    l2 = lambda V: np.sqrt(np.sum(V * V, axis=(0, 1)))
    f0 = l2(F)
    v = F.copy()
    partial = np.zeros_like(F)
    norms, residuals = [], []
    for _ in range(max_order + 1):
        term = gstar(v)
        partial += term
        norms.append(float((l2(term) / f0).max()))
        residuals.append(float((l2(partial - Gf) / l2(Gf)).max()))
        v = v - op.op(term)
    ratios = [norms[i + 1] / norms[i] for i in range(len(norms) - 1) if norms[i] > 0]
    # commutator pieces on the probe: K_z G(window) h_z f
    cols = np.empty((t.s, 2, nz))
    for z in range(nz):
        cols[:, :, z] = H[z][:, None] * F[:, :, 0]
    sol = op.solve(cols, rtol)
    cmax = 0.0
    fref = np.abs(F[:, :, 0]).max()
    for z in range(nz):
        piece = H[z][:, None] ** 2 * F[:, :, 0] - op.op(H[z][:, None, None] * sol[:, :, z:z + 1])[:, :, 0]
        cmax = max(cmax, np.abs(piece).max() / fref)
    return {"norms": norms, "ratios": ratios, "residuals": residuals,
            "fitted_ratio": _fit_ratio(norms[1:]) if len(norms) > 2 else 0.0,
            "commutator_constant": float(cmax * munits), "cubes": nz}


# ---------------------------------------------------------------------------
# weakened and localized forms of the expansion

def _gz_apply(O, Gz, h2z, v):
    # one commutator piece K_z v = h^2 v - O h G_z h v
    return h2z ** 2 * v - O @ (h2z * (Gz @ (h2z * v)))


def weakened_apply(t: Torus, A, sched, k: int, munits: int, s, f,
                   max_order: int = 2, width_sites=None):
    """Apply the s-weakened truncated expansion to a vector.

    Every walk carries the product of s over the cubes covered by its
    step windows, with no multiplicity: s = 1 restores the plain
    truncation, s = 0 keeps only the strictly local parametrix.  Walks
    sharing a covered set are grouped, so the cost stays polynomial.
    """
    s = np.asarray(s, dtype=float)
    if np.abs(s).max() > np.sqrt(munits) + 1e-12:
        raise ValueError("weakening factors exceed the square-root cube bound")
    O = rw_generator_matrix(t, A, sched, k)
    centers, H, Gz, covered = _cube_windows(t, A, sched, k, munits, width_sites)
    nz = len(centers)
    if s.shape != (nz,):
        raise ValueError("one weakening factor per cube expected")
    h2 = np.repeat(H, 2, axis=1)

    def gstar(v):
        out = np.zeros_like(v)
        for z in range(nz):
            out += h2[z] * (Gz[z] @ (h2[z] * v))
        return out

    out = gstar(f)
    level = {frozenset(): np.asarray(f, dtype=float)}
    for _ in range(max_order):
        nxt = {}
        for S, v in level.items():
            for z in range(nz):
                key = S | covered[z]
                piece = _gz_apply(O, Gz[z], h2[z], v)
                if key in nxt:
                    nxt[key] += piece
                else:
                    nxt[key] = piece
        level = nxt
        for S, v in level.items():
            out += np.prod(s[sorted(S)]) * gstar(v)
    return out


def localized_pieces(t: Torus, A, sched, k: int, munits: int, f,
                     max_order: int = 2, width_sites=None):
    """Split the truncated expansion of G f into pieces labeled by the set
    of cubes each walk visits.  The pieces sum to the plain truncation
    exactly, and each is supported where its cubes' bumps live."""
    O = rw_generator_matrix(t, A, sched, k)
    centers, H, Gz, covered = _cube_windows(t, A, sched, k, munits, width_sites)
    nz = len(centers)
    h2 = np.repeat(H, 2, axis=1)
    pieces = {}
    level = {frozenset(): np.asarray(f, dtype=float)}
    for order in range(max_order + 1):
        for S, v in level.items():
            for z0 in range(nz):
                key = S | {z0}
                piece = h2[z0] * (Gz[z0] @ (h2[z0] * v))
                if key in pieces:
                    pieces[key] += piece
                else:
                    pieces[key] = piece
        if order == max_order:
            break
        nxt = {}
        for S, v in level.items():
            for z in range(nz):
                key = S | {z}
                piece = _gz_apply(O, Gz[z], h2[z], v)
                if key in nxt:
                    nxt[key] += piece
                else:
                    nxt[key] = piece
        level = nxt
    return pieces


def _bump_row(t: Torus, center, munits: int):
    h = np.ones(t.s)
    for axis in range(3):
        d = (t.coords[:, axis] - center[axis]) % t.n
        d = np.where(d > t.n // 2, d - t.n, d)
        h *= bump_profile(d * t.eta, munits)
    return h


def walk_term_apply(t: Torus, A, sched, k: int, munits: int, walk, f,
                    width_sites=None):
    """Apply a single walk term h G h . K ... K to a field, using only the
    window-local solves along the walk.  Scales to tori far beyond dense
    reach; the result depends on the background only near the walk."""
    width = _window_width_sites(t, munits, width_sites)
    if width >= t.n:
        raise ValueError("walk terms need windows smaller than the torus")
    msites = munits * t.L ** t.k
    centers = lat.cube_centers(t, msites)
    op = _BatchedLevelOp(t, A, sched, k)
    cache = {}

    def window_solve(z, rhs2):
        if z not in cache:
            mask = window_mask(t, centers[z], width)
            W, sites = _neumann_local(t, A, sched, k, mask)
            cache[z] = (np.linalg.inv(W), sites)
        Winv, sites = cache[z]
        loc = Winv @ rhs2[sites].reshape(-1)
        out = np.zeros_like(rhs2)
        out[sites] = loc.reshape(-1, 2)
        return out

    v = np.asarray(f, dtype=float).copy()
    for z in reversed(list(walk[1:])):
        h = _bump_row(t, centers[z], munits)[:, None]
        v = h ** 2 * v - op.op((h * window_solve(z, h * v))[:, :, None])[:, :, 0]
    z0 = walk[0]
    h = _bump_row(t, centers[z0], munits)[:, None]
    return h * window_solve(z0, h * v)


def walk_patch_mask(t: Torus, munits: int, walk, width_sites=None, shell=None):
    """Sites whose background can influence the walk term: the union of
    the walk's windows plus a safety shell for the operator reach."""
    width = _window_width_sites(t, munits, width_sites)
    if shell is None:
        shell = 2 * t.L ** t.k + 2
    msites = munits * t.L ** t.k
    centers = lat.cube_centers(t, msites)
    mask = np.zeros(t.s, dtype=bool)
    for z in set(walk):
        mask |= window_mask(t, centers[z], min(width + 2 * shell, t.n))
    return mask


# ---------------------------------------------------------------------------
# square root of the step covariance

def resolvent_split_matrices(t: Torus, A, sched, k: int, x: float):
    """Shifted step-form inverse assembled through the two-level identity:
    a diagonal part built from the top-step block projection plus a
    fine-lattice Green's function correction with shifted masses.  Needs
    one more block level above k, so m >= 1."""
    if k != t.k or k < 1:
        raise ValueError("split needs the level-k generator, k >= 1")
    ak, a, L = sched.a_k(k), sched.a, t.L
    ek = sched.e_k(k)
    H = step_form_matrix(t, A, sched, k)
    n0 = H.shape[0]
    lhs = np.linalg.inv(H + x * np.eye(n0))
    qt = ba.q_top_matrix(t, A, ek)
    P = L ** 3 * (qt.T @ qt)
    Ahat = (np.eye(n0) - P) / (ak + x) + P / (ak + a / L ** 2 + x)
    c1 = ak * x / (ak + x)
    c2 = ak ** 2 * (a / L ** 2) / ((ak + x) * (ak + a / L ** 2 + x))
    Qk = ba.qk_matrix(t, A, ek, k)
    Qk1 = ba.qk1_matrix(t, A, ek)
    lap = minus_laplacian_matrix(t, A, ek)
    Gkx = np.linalg.inv(lap + c1 * float(L) ** (3 * k) * (Qk.T @ Qk)
                        + c2 * float(L) ** (3 * (k + 1)) * (Qk1.T @ Qk1))
    rhs = Ahat + ak ** 2 * (Ahat @ Qk @ Gkx @ (float(L) ** (3 * k) * Qk.T) @ Ahat)
    ref = np.abs(lhs).max()
    return {"lhs": lhs, "rhs": rhs,
            "residual": float(np.abs(lhs - rhs).max() / ref)}


def sqrt_covariance_report(t: Torus, A, sched, k: int, nodes: int = 32,
                           sample_x=(0.37, 2.9)):
    """Square root of the step covariance two ways: eigendecomposition as
    the oracle, and the arctangent-substituted resolvent quadrature whose
    integrand is assembled from the split identity.  The tail estimate
    compares against the half-node rule."""
    H = step_form_matrix(t, A, sched, k)
    H = 0.5 * (H + H.T)
    n0 = H.shape[0]
    w, U = np.linalg.eigh(H)
    if w.min() <= 0:
        raise ValueError("step form must be positive definite")
    C = (U / w) @ U.T
    half_eig = (U / np.sqrt(w)) @ U.T

    def quad(nn):
        xs, ws = np.polynomial.legendre.leggauss(nn)
        th = (xs + 1) * (np.pi / 4)
        out = np.zeros_like(H)
        for ti, wi in zip(th, ws):
            shift = np.tan(ti) ** 2
            out += (wi * (np.pi / 4) * (2 / np.pi) / np.cos(ti) ** 2) * \
                resolvent_split_matrices(t, A, sched, k, shift)["rhs"]
        return out

    half_quad = quad(nodes)
    tail = _op_norm_inf(half_quad - quad(nodes // 2))
    refC = _op_norm_inf(C)
    split_res = max(resolvent_split_matrices(t, A, sched, k, x)["residual"]
                    for x in sample_x)
    return {"sqrt": half_quad,
            "sqrt_eig": half_eig,
            "square_residual": _op_norm_inf(half_quad @ half_quad - C) / refC,
            "eig_vs_quad": _op_norm_inf(half_quad - half_eig) / _op_norm_inf(half_eig),
            "tail_estimate": float(tail),
            "split_residual": float(split_res),
            "norm_upper": float(w.min() ** -0.5),
            "norm_lower": float(w.max() ** -0.5)}


# ---------------------------------------------------------------------------
# covariance and decay checks

def gauge_covariance_report(t: Torus, A, sched, k: int, lam):
    """Behavior under a gauge transformation: the Green's function rotates
    with the fine phases, the minimizer with fine phases on the left and
    unit-sublattice phases on the right."""
    ek = sched.e_k(k)
    Anew = A - fld.grad_site(t, lam)
    G0 = greens_matrix(t, A, sched, k)
    G1 = greens_matrix(t, Anew, sched, k)
    R = rot_blockdiag(ek * lam)
    Rm = rot_blockdiag(-ek * lam)
    gres = np.abs(G1 - R @ G0 @ Rm).max() / np.abs(G1).max()
    H0 = minimizer_matrix(t, A, sched, k)
    H1 = minimizer_matrix(t, Anew, sched, k)
    pts = t.index(lat.L_sublattice_coords(t, t.L ** k))
    Rc = rot_blockdiag(-ek * lam[pts])
    hres = np.abs(H1 - R @ H0 @ Rc).max() / max(np.abs(H1).max(), 1e-300)
    return {"greens_residual": float(gres), "minimizer_residual": float(hres)}


def conjugation_residual(t: Torus, A, sched, k: int):
    """Charge conjugation: flipping the imaginary component conjugates the
    background."""
    C = conjugation_blockdiag(t.s)
    G = greens_matrix(t, np.asarray(A), sched, k)
    Gm = greens_matrix(t, -np.asarray(A), sched, k)
    return float(np.abs(C @ G @ C - Gm).max() / np.abs(Gm).max())


def symmetry_residual(t: Torus, A, sched, k: int, r, f):
    """Lattice-symmetry covariance checked on a vector."""
    Ar = fld.apply_symmetry_gauge(t, r, np.asarray(A))
    fr = fld.apply_symmetry_scalar(t, r, f)
    lhs = unflatten(greens_matrix(t, Ar, sched, k) @ flatten(fr))
    rhs = fld.apply_symmetry_scalar(
        t, r, unflatten(greens_matrix(t, A, sched, k) @ flatten(f)))
    return float(np.abs(lhs - rhs).max() / max(np.abs(rhs).max(), 1e-300))


def kernel_distance_profile(t: Torus, M, j=None):
    """Max kernel magnitude versus unit-cube separation in the max metric.
    Rows and columns are site-component indexed; cubes are level-j blocks."""
    j = t.k if j is None else j
    seg = t.L ** j
    blk = lat.site_block(t, j)
    nb = t.n // seg
    cc = lat.L_sublattice_coords(t, seg) // seg
    amax = np.abs(M.reshape(t.s, 2, t.s, 2)).max(axis=(1, 3))
    dists = {}
    d = np.abs((cc[:, None, :] - cc[None, :, :] + nb // 2) % nb - nb // 2).max(axis=-1)
    acc = np.zeros((len(cc), len(cc)))
    np.maximum.at(acc, (blk[:, None], blk[None, :]), amax)
    for dist in range(nb // 2 + 1):
        sel = d == dist
        if sel.any():
            dists[dist] = float(acc[sel].max())
    return dists


def fit_exp_decay(profile):
    """Fitted decay rate and goodness for a distance -> magnitude table,
    ignoring the zero-distance entry."""
    ds = sorted(dd for dd in profile if dd > 0 and profile[dd] > 0)
    if len(ds) < 2:
        return {"rate": 0.0, "rsq": 0.0}
    xs = np.array(ds, dtype=float)
    ys = np.log([profile[dd] for dd in ds])
    slope, icept = np.polyfit(xs, ys, 1)
    pred = slope * xs + icept
    ss = np.sum((ys - ys.mean()) ** 2)
    rsq = 1.0 - np.sum((ys - pred) ** 2) / ss if ss > 0 else 1.0
    return {"rate": float(-slope), "rsq": float(rsq)}


def cube_set_spread(t: Torus, munits: int, X):
    """Max pairwise cube separation (max metric, cube units) of a cube-index
    set, the natural decay distance for localized pieces."""
    msites = munits * t.L ** t.k
    nbx = t.n // msites
    cc = lat.L_sublattice_coords(t, msites)[sorted(X)] // msites
    if len(cc) < 2:
        return 0
    d = np.abs((cc[:, None, :] - cc[None, :, :] + nbx // 2) % nbx - nbx // 2)
    return int(d.max())
