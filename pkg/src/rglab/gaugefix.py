"""Gauge-field minimizers, the fluctuation split, and covariance algebra.

The delta-function RG for the gauge field needs four pieces of linear
algebra on a torus, all desk-scale dense here:

- constrained minimizers of the flux energy |dA|^2: the axial one solves
  the KKT system of the block-average and path-average (tau) constraints
  directly; the Landau one goes through the regularized Green's operator
  and a divergence projection.  The two differ by a pure gauge, so their
  field strengths must agree.
- the effective quadratic form on the next coarse lattice, obtained by
  pushing a unit-lattice field through the minimizer and measuring its
  flux energy.
- the fluctuation parametrization: intra-block kernel coordinates plus
  the non-central inter-block bonds, completed on central bonds by a
  local operator S so that every embedded field satisfies the average
  and tau constraints exactly.  The Gram matrix I + S^T S admits a
  bump-window parametrix expansion whose error decays geometrically.
- log-domain bookkeeping for the constrained Gaussian normalizations and
  the one-step recursion tying consecutive levels together.

Adjoint convention: all inner products carry the weight eta^3, so on a
single torus adjoints are plain matrix transposes; an average from fine
to coarse picks up the weight ratio L^(3*steps) in its adjoint.
"""

import warnings
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.linalg import lu_factor, lu_solve, null_space, qr

from . import blockavg as ba
from . import fields as fld
from . import greens as gr
from . import lattice as lat
from .lattice import Torus

RANK_RTOL = 1e-11


# ---------------------------------------------------------------------------
# dense exterior calculus

def curl_matrix(t: Torus):
    """Dense field-strength map, shape (3s, 3s): plaquette values of dA."""
    idx, sgn = lat.plaq_bonds(t)
    M = np.zeros((3 * t.s, 3 * t.s))
    rows = np.repeat(np.arange(3 * t.s), 4)
    np.add.at(M, (rows, idx.ravel()), sgn.ravel() / t.eta)
    return M


def grad_matrix(t: Torus):
    """Dense site gradient, shape (3s, s): bond values of the forward
    difference of a site function."""
    M = np.zeros((3 * t.s, t.s))
    x = np.arange(t.s)
    for mu in range(3):
        np.add.at(M, (mu * t.s + x, t.nbr_plus[mu]), 1.0 / t.eta)
        np.add.at(M, (mu * t.s + x, x), -1.0 / t.eta)
    return M


def flux_energy_matrix(t: Torus):
    """Matrix of the quadratic form |dA|^2 (weights included)."""
    D = curl_matrix(t)
    return t.w_site * D.T @ D


# ---------------------------------------------------------------------------
# dense averages; unlike blockavg these also run on unit lattices, where
# the coarse companion has negative spacing exponent

def bond_average_matrix(t: Torus, steps: int):
    """Straight-line block average of bond fields, steps levels down.

    Returns (tc, M) with tc the coarse companion and M of shape
    (3 tc.s, 3 t.s), mu-major on both sides.  steps=0 is the identity.
    Rows sum to 1, so constants are preserved.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    step = t.L ** steps
    if t.n % step:
        raise ValueError("block side %d does not divide the torus side %d"
                         % (step, t.n))
    tc = Torus(t.L, t.k - steps, t.m)
    if steps == 0:
        return tc, np.eye(3 * t.s)
    h = (step - 1) // 2
    offsets = np.array(list(product(range(-h, h + 1), repeat=3)))
    C = lat.L_sublattice_coords(t, step)
    pts = C[:, None, :] + offsets[None, :, :]
    rows = np.repeat(np.arange(tc.s), len(offsets))
    M = np.zeros((3 * tc.s, 3 * t.s))
    w = float(step) ** -4
    e = np.eye(3, dtype=int)
    for mu in range(3):
        for i in range(step):
            cols = t.index(pts + i * e[mu]).ravel()
            np.add.at(M, (mu * tc.s + rows, mu * t.s + cols), w)
    return tc, M


def scalar_average_matrix(t: Torus, steps: int):
    """Plain (phase-free) block mean of site functions, shape (tc.s, t.s)."""
    step = t.L ** steps
    if t.n % step:
        raise ValueError("block side %d does not divide the torus side %d"
                         % (step, t.n))
    tc = Torus(t.L, t.k - steps, t.m)
    if steps == 0:
        return tc, np.eye(t.s)
    owner = lat.site_block(t, steps)
    M = np.zeros((tc.s, t.s))
    M[owner, np.arange(t.s)] = float(step) ** -3
    return tc, M


def tau_rows(t: Torus, level: int = 0):
    """Path-average constraint rows at one level, acting on fine bonds.

    Level j first applies the j-fold bond average, then takes the in-block
    path averages on the level-j companion; the identically-zero rows at
    the block centers are dropped.  Shape (26 * ncenters, 3 t.s) for L=3.
    """
    tj, Mj = bond_average_matrix(t, level)
    T = ba.tau_matrix(tj, 1)
    nb = tj.L ** 3
    h = (tj.L - 1) // 2
    o0 = (h * tj.L + h) * tj.L + h
    keep = np.ones(nb, dtype=bool)
    keep[o0] = False
    T = T.reshape(-1, nb, 3 * tj.s)[:, keep, :].reshape(-1, 3 * tj.s)
    if level == 0:
        return T
    return T @ Mj


def _row_rank_reduce(rows, rtol=RANK_RTOL):
    """Indices of a full-rank row subset via pivoted QR on the transpose."""
    if rows.shape[0] == 0:
        return np.zeros(0, dtype=int)
    R, piv = qr(rows.T, mode="r", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > rtol * d[0])) if d.size and d[0] > 0 else 0
    return np.sort(piv[:rank])


@dataclass
class ConstraintSet:
    """Full-row-rank linear constraints of the level-k minimizer."""
    t: Torus
    k: int
    rows: np.ndarray
    rhs: np.ndarray
    rank: int
    raw_count: int
    removed: int
    navg: int           # leading raw rows holding the block-average part
    keep: np.ndarray

    def residual(self, a_flat):
        return self.rows @ a_flat - self.rhs


def constraint_set(t: Torus, k: int, A_coarse=None) -> ConstraintSet:
    """Block-average rows (k levels down) stacked with the tau rows of
    levels 0 .. k-1, reduced to full row rank.

    A_coarse, when given, is the coarse field on the level-k companion,
    shape (3, sc); its flat copy is the right-hand side of the average
    rows.  Dropping a redundant row checks that its right-hand side is
    implied by the kept ones.
    """
    tc, Q = bond_average_matrix(t, k)
    blocks = [Q]
    for j in range(k):
        blocks.append(tau_rows(t, j))
    raw = np.vstack(blocks)
    rhs_raw = np.zeros(raw.shape[0])
    if A_coarse is not None:
        rhs_raw[:Q.shape[0]] = np.asarray(A_coarse).ravel()
    keep = _row_rank_reduce(raw)
    removed = raw.shape[0] - len(keep)
    if removed and A_coarse is not None:
        drop = np.setdiff1d(np.arange(raw.shape[0]), keep)
        coef, *_ = np.linalg.lstsq(raw[keep].T, raw[drop].T, rcond=None)
        bad = np.max(np.abs(coef.T @ rhs_raw[keep] - rhs_raw[drop]))
        if bad > 1e-9:
            raise ValueError("inconsistent constraint right-hand side "
                             "(residual %.3e)" % bad)
    return ConstraintSet(t, k, raw[keep], rhs_raw[keep], len(keep),
                         raw.shape[0], removed, Q.shape[0], keep)


# ---------------------------------------------------------------------------
# axial minimizer by constrained quadratic programming

def _kkt_solve(M, rows, rhs_cols):
    n, r = M.shape[0], rows.shape[0]
    K = np.zeros((n + r, n + r))
    K[:n, :n] = M
    K[:n, n:] = rows.T
    K[n:, :n] = rows
    try:
        f = lu_factor(K)
    except Exception as exc:
        raise RuntimeError("singular KKT system: %s" % exc)
    b = np.zeros((n + r, rhs_cols.shape[1]))
    b[n:] = rhs_cols
    sol = lu_solve(f, b)
    resid = np.max(np.abs(K @ sol - b))
    if not np.isfinite(resid) or resid > 1e-6:
        raise RuntimeError(
            "KKT solve failed: residual %.3e with %d constraints of rank "
            "reported by the caller; check for redundancy" % (resid, r))
    return sol[:n]


def axial_minimizer_matrix(t: Torus, k: int):
    """Dense minimizer map coarse field -> fine field, shape (3s, 3sc).

    Minimizes half the flux energy subject to the k-fold block average
    hitting the coarse field and all tau path averages vanishing.
    """
    cs = constraint_set(t, k)
    if np.count_nonzero(cs.keep < cs.navg) < cs.navg:
        raise RuntimeError("a block-average row was dropped as redundant; "
                           "the minimizer map is not well defined")
    M = flux_energy_matrix(t)
    rhs_cols = np.zeros((cs.rank, cs.navg))
    avg_pos = np.flatnonzero(cs.keep < cs.navg)
    rhs_cols[avg_pos, cs.keep[avg_pos]] = 1.0
    return _kkt_solve(M, cs.rows, rhs_cols)


def axial_minimizer(t: Torus, A_coarse, k: int):
    """Minimizing fine field for one coarse field, shape (3, s)."""
    cs = constraint_set(t, k, A_coarse)
    M = flux_energy_matrix(t)
    sol = _kkt_solve(M, cs.rows, cs.rhs[:, None])
    return sol[:, 0].reshape(3, t.s)


# ---------------------------------------------------------------------------
# Landau minimizer via the regularized Green's operator

def laplacian_range_projection(t: Torus, steps: int, a: float = 1.0):
    """Orthogonal projection onto the Laplacian image of the scalar
    block-average kernel; independent of the regulator a."""
    G0 = grad_matrix(t)
    lap = G0.T @ G0
    tc, Qs = scalar_average_matrix(t, steps)
    wr = float(t.L) ** (3 * steps)
    G = np.linalg.inv(lap + a * wr * Qs.T @ Qs)
    QG = Qs @ G
    mid = np.linalg.inv(wr * QG @ QG.T)
    R = np.eye(t.s) - wr * QG.T @ mid @ QG
    return 0.5 * (R + R.T)


def gauge_greens_matrix(t: Torus, steps: int, a: float = 1.0,
                        alpha: float = 1.0, drd_coeff=None):
    """Inverse of the regularized gauge operator
    curl^T curl + c * grad R grad^T + a * Qw^T Q
    with c = 1/(2 alpha) unless drd_coeff overrides it."""
    c = (0.5 / alpha) if drd_coeff is None else drd_coeff
    D = curl_matrix(t)
    G0 = grad_matrix(t)
    R = laplacian_range_projection(t, steps, a)
    tc, Q = bond_average_matrix(t, steps)
    wr = float(t.L) ** (3 * steps)
    op = D.T @ D + c * G0 @ R @ G0.T + a * wr * Q.T @ Q
    return np.linalg.inv(op)


def landau_minimizer_matrix(t: Torus, steps: int, a: float = 1.0,
                            alpha: float = 1.0):
    """Dense Landau-gauge minimizer map, shape (3s, 3sc); the result is
    independent of both a and alpha."""
    Gm = gauge_greens_matrix(t, steps, a, alpha)
    tc, Q = bond_average_matrix(t, steps)
    Qwt = float(t.L) ** (3 * steps) * Q.T
    S = Q @ Gm @ Qwt
    S = 0.5 * (S + S.T)
    w = np.linalg.eigvalsh(S)
    if w[0] <= 1e-12 * max(w[-1], 1.0):
        raise RuntimeError(
            "coarse-projected Green's operator is numerically singular: "
            "spectrum extremes %.3e .. %.3e" % (w[0], w[-1]))
    return Gm @ Qwt @ np.linalg.inv(S)


def landau_minimizer(t: Torus, A_coarse, steps: int, a: float = 1.0,
                     alpha: float = 1.0):
    H = landau_minimizer_matrix(t, steps, a, alpha)
    return (H @ np.asarray(A_coarse).ravel()).reshape(3, t.s)


def minimizer_equivalence_report(t: Torus, k: int, seed: int = 0, n_fields: int = 3):
    """Axial and Landau minimizers side by side on random coarse fields.

    The two live on the same constraint-average surface and differ by a
    pure gauge, so their field strengths agree; the Landau map must not
    depend on alpha or on the regulator a, and the divergence projection
    must be a symmetric idempotent.
    """
    rng = np.random.default_rng(seed)
    tc, Q = bond_average_matrix(t, k)
    Hx = axial_minimizer_matrix(t, k)
    Hl = landau_minimizer_matrix(t, k, a=1.0, alpha=1.0)
    Hl2 = landau_minimizer_matrix(t, k, a=1.0, alpha=0.37)
    Hl3 = landau_minimizer_matrix(t, k, a=2.5, alpha=1.0)
    R = laplacian_range_projection(t, k, a=1.0)
    R2 = laplacian_range_projection(t, k, a=0.52)
    D = curl_matrix(t)
    cs = constraint_set(t, k)
    W = null_space(cs.rows)
    M = flux_energy_matrix(t)
    d_gap = grad_gap = 0.0
    for _ in range(n_fields):
        Ac = rng.normal(size=3 * tc.s)
        ax, la = Hx @ Ac, Hl @ Ac
        d_gap = max(d_gap, np.max(np.abs(D @ ax - D @ la)))
        grad_gap = max(grad_gap, np.max(np.abs(W.T @ (M @ ax))))
    return {
        "alpha_independence": float(np.max(np.abs(Hl - Hl2))),
        "a_independence": float(np.max(np.abs(Hl - Hl3))),
        "r_idempotent": float(np.max(np.abs(R @ R - R))),
        "r_symmetric": float(np.max(np.abs(R - R.T))),
        "r_a_independence": float(np.max(np.abs(R - R2))),
        "curl_equivalence": float(d_gap),
        "projected_gradient": float(grad_gap),
        "avg_recovery_axial": float(np.max(np.abs(Q @ Hx - np.eye(3 * tc.s)))),
        "avg_recovery_landau": float(np.max(np.abs(Q @ Hl - np.eye(3 * tc.s)))),
    }


def _bond_distance_profile(t: Torus, H, col_sites):
    """Distance -> max |kernel| table between bond rows and source sites."""
    tails = np.tile(np.arange(t.s), 3)
    prof = {}
    for j, src in enumerate(col_sites):
        d = lat.dist(t, tails, np.full(3 * t.s, src))
        q = np.round(d / t.eta).astype(int)
        mags = np.abs(H[:, j])
        for qq in np.unique(q):
            m = float(mags[q == qq].max())
            key = qq * t.eta
            prof[key] = max(prof.get(key, 0.0), m)
    return prof


def minimizer_bound_report(t: Torus, k: int):
    """Measured sup-norm bounds and kernel decay for the Landau minimizer
    and the divergence projection."""
    tc, Q = bond_average_matrix(t, k)
    H = landau_minimizer_matrix(t, k)
    bound = float(np.max(np.sum(np.abs(H), axis=1)))
    dH = 0.0
    for mu in range(3):
        shifted = np.vstack([H[nu * t.s + t.nbr_plus[mu]] for nu in range(3)])
        dH = max(dH, float(np.max(np.sum(np.abs(shifted - H), axis=1))) / t.eta)
    centers = lat.block_centers(t, k)
    col_sites = np.tile(centers, 3)
    fitH = gr.fit_exp_decay(_bond_distance_profile(t, H, col_sites))
    R = laplacian_range_projection(t, k)
    src = 0
    d = lat.dist(t, np.arange(t.s), np.full(t.s, src))
    profR = {}
    q = np.round(d / t.eta).astype(int)
    for qq in np.unique(q):
        profR[qq * t.eta] = float(np.abs(R[q == qq, src]).max())
    fitR = gr.fit_exp_decay(profR)
    return {"sup_bound": bound, "grad_sup_bound": dH,
            "minimizer_decay": fitH, "projection_decay": fitR}


# ---------------------------------------------------------------------------
# effective quadratic form on the coarse unit lattice

def effective_form_matrix(t: Torus, k: int, route: str = "landau",
                          a: float = 1.0, alpha: float = 1.0):
    """Form matrix of the flux energy of the minimized fine field, as a
    quadratic form on the level-k companion lattice: value(Z) equals the
    flux energy of the minimizer lifted from Z."""
    tc = Torus(t.L, t.k - k, t.m)
    if k == 0:
        D = curl_matrix(t)
        return t.w_site * D.T @ D / tc.w_site
    if route == "landau":
        H = landau_minimizer_matrix(t, k, a, alpha)
    elif route == "axial":
        H = axial_minimizer_matrix(t, k)
    else:
        raise ValueError("route must be landau or axial")
    DH = curl_matrix(t) @ H
    out = t.w_site * DH.T @ DH / tc.w_site
    return 0.5 * (out + out.T)


def fluctuation_rows(tc: Torus):
    """Constraint rows of the fluctuation integral on one lattice: the
    one-step bond average stacked with the level-0 path averages."""
    _, Q = bond_average_matrix(tc, 1)
    return np.vstack([Q, tau_rows(tc, 0)])


def fluctuation_subspace(tc: Torus):
    """Orthonormal basis of the fluctuation constraint kernel, (3s, nu)."""
    return null_space(fluctuation_rows(tc))


def effective_form_value(tc: Torus, delta_mat, Z, resid_tol: float = 1e-8):
    """Quadratic form value on a constrained field; a field off the
    constraint subspace is projected back with a warning."""
    z = np.asarray(Z, dtype=float).ravel()
    rows = fluctuation_rows(tc)
    resid = float(np.max(np.abs(rows @ z))) if rows.size else 0.0
    scale = max(1.0, float(np.max(np.abs(z))))
    if resid > resid_tol * scale:
        warnings.warn("field off the constraint subspace "
                      "(residual %.3e); projecting" % resid)
        W = null_space(rows)
        z = W @ (W.T @ z)
    return float(tc.w_site * z @ delta_mat @ z)


def form_subspace_bounds(delta_mat, W):
    """Extremes of the Rayleigh quotient of the form on span(W)."""
    B = W.T @ delta_mat @ W
    w = np.linalg.eigvalsh(0.5 * (B + B.T))
    return {"lower": float(w[0]), "upper": float(w[-1])}


# ---------------------------------------------------------------------------
# fluctuation parametrization: kernel coordinates, completion S, Gram algebra

@dataclass
class FluctuationBasis:
    """Reduced coordinates of the fluctuation constraint kernel.

    Coordinates are block-major kernel coefficients (one orthonormal
    in-block tau-kernel per block) followed by the non-central
    inter-block bonds; embed is the (3s, ntilde) map whose central-bond
    rows hold the local completion smat.
    """
    t: Torus
    central: np.ndarray
    inter: np.ndarray
    kernel0: np.ndarray
    kdim: int
    embed: np.ndarray
    smat: np.ndarray

    @property
    def ntilde(self) -> int:
        return self.embed.shape[1]

    def coordinate_sites(self):
        """Anchor site per coordinate: block centers for kernel
        coordinates, bond tails for inter-block ones."""
        t = self.t
        nbl = (t.n // t.L) ** 3
        centers = lat.block_centers(t, 1)
        anchors = np.repeat(centers, self.kdim)
        return np.concatenate([anchors, self.inter % t.s])


def fluctuation_basis(tc: Torus) -> FluctuationBasis:
    """Build the reduced coordinates and the completion on central bonds.

    The completion row for the coarse bond from block y to the next block
    y' along mu balances the straight-line averages exactly: the central
    bond value is minus the sum of the other face bonds, minus 1/L times
    the in-block mu-bonds of y weighted by how many lines cross them
    (position + 1 from the near face), minus the mirror weights in y'.
    """
    L, s = tc.L, tc.s
    if tc.n % L:
        raise ValueError("torus side not divisible by the block side")
    if tc.n // L < 2:
        raise ValueError("need at least two blocks per side for the "
                         "inter-block split")
    h = (L - 1) // 2
    e = np.eye(3, dtype=int)
    owner = lat.site_block(tc, 1)
    cc = lat.L_sublattice_coords(tc, L)
    nbl = len(cc)

    intra_mask = np.zeros(3 * s, dtype=bool)
    for mu in range(3):
        intra_mask[mu * s:(mu + 1) * s] = owner == owner[tc.nbr_plus[mu]]
    central = np.concatenate(
        [mu * s + tc.index(cc + h * e[mu]) for mu in range(3)])
    central_mask = np.zeros(3 * s, dtype=bool)
    central_mask[central] = True
    inter = np.flatnonzero(~intra_mask & ~central_mask)

    # in-block tau kernel at the origin block, replicated by translation
    intra0 = np.flatnonzero(intra_mask & np.tile(owner == 0, 3))
    T = ba.tau_matrix(tc, 1)
    nb = L ** 3
    o0 = (h * L + h) * L + h
    rows0 = np.delete(np.arange(nb), o0)
    T0 = T[np.ix_(rows0, intra0)]
    K0 = null_space(T0)
    kdim = K0.shape[1]

    ntilde = nbl * kdim + len(inter)
    embed = np.zeros((3 * s, ntilde))
    mu0 = intra0 // s
    rel = lat.wrap_delta(tc, np.zeros(3, dtype=int), tc.coords[intra0 % s])
    for c in range(nbl):
        rows = mu0 * s + tc.index(cc[c] + rel)
        embed[rows, c * kdim:(c + 1) * kdim] = K0
    embed[inter, nbl * kdim + np.arange(len(inter))] = 1.0

    # completion rows, one per coarse bond (mu-major over blocks)
    S_full = np.zeros((3 * nbl, 3 * s))
    trans = [(t1, t2) for t1 in range(-h, h + 1) for t2 in range(-h, h + 1)]
    for mu in range(3):
        nu1, nu2 = [ax for ax in range(3) if ax != mu]
        for c in range(nbl):
            row = mu * nbl + c
            y, y2 = cc[c], cc[c] + L * e[mu]
            bc = mu * s + tc.index(y + h * e[mu])
            for t1, t2 in trans:
                shift = t1 * e[nu1] + t2 * e[nu2]
                b = mu * s + tc.index(y + h * e[mu] + shift)
                if b != bc:
                    S_full[row, b] -= 1.0
                for p in range(L - 1):
                    near = mu * s + tc.index(y + (p - h) * e[mu] + shift)
                    S_full[row, near] -= (p + 1) / L
                    far = mu * s + tc.index(y2 + (p - h) * e[mu] + shift)
                    S_full[row, far] -= (L - 1 - p) / L
    smat = S_full @ embed
    embed[central] = smat
    return FluctuationBasis(tc, central, inter, K0, kdim, embed, smat)


def gram_matrix(basis: FluctuationBasis):
    """I + S^T S, the Gram matrix of the embedding."""
    n = basis.ntilde
    return np.eye(n) + basis.smat.T @ basis.smat


def reduce_coordinates(basis: FluctuationBasis, Z, gram_inv=None):
    """Left inverse of the embedding: recover the reduced coordinates of
    an embedded field via (I + S^T S)^-1 C^T."""
    if gram_inv is None:
        gram_inv = np.linalg.inv(gram_matrix(basis))
    return gram_inv @ (basis.embed.T @ np.asarray(Z).ravel())


def fluct_covariance(basis: FluctuationBasis, delta_mat):
    """Inverse of the effective form in reduced coordinates."""
    B = basis.embed.T @ delta_mat @ basis.embed
    B = 0.5 * (B + B.T)
    w = np.linalg.eigvalsh(B)
    if w[0] <= 0:
        raise RuntimeError("effective form is not positive definite on the "
                           "fluctuation coordinates (min eigenvalue %.3e)" % w[0])
    return np.linalg.inv(B)


def fluct_covariance_sqrt(basis: FluctuationBasis, delta_mat, nodes: int = 32):
    """Square root of the reduced covariance two ways: eigendecomposition
    as the oracle and the arctangent-substituted resolvent quadrature.
    Also reports the measured operator norms of both half powers."""
    B = basis.embed.T @ delta_mat @ basis.embed
    B = 0.5 * (B + B.T)
    w, U = np.linalg.eigh(B)
    if w[0] <= 0:
        raise RuntimeError("form not positive definite: min eigenvalue %.3e" % w[0])
    half_eig = (U / np.sqrt(w)) @ U.T

    def quad(nn):
        xs, ws = np.polynomial.legendre.leggauss(nn)
        th = (xs + 1) * (np.pi / 4)
        out = np.zeros_like(B)
        eye = np.eye(B.shape[0])
        for ti, wi in zip(th, ws):
            out += (wi * (np.pi / 4) * (2 / np.pi) / np.cos(ti) ** 2) * \
                np.linalg.inv(B + np.tan(ti) ** 2 * eye)
        return out

    half_quad = quad(nodes)
    tail = float(np.max(np.abs(half_quad - quad(max(nodes // 2, 2)))))
    return {
        "sqrt": half_quad,
        "oracle_error": float(np.max(np.abs(half_quad - half_eig))),
        "tail": tail,
        "cov_sqrt_norm": float(1.0 / np.sqrt(w[0])),
        "inv_sqrt_norm": float(np.sqrt(w[-1])),
    }


def block_axial_potential(tc: Torus):
    """Site potential whose gauge shift cancels every in-block path
    average: minus the path average to the site, recentered so the block
    mean of the potential vanishes.  Shape (s, 3s)."""
    L, s = tc.L, tc.s
    if tc.n % L:
        raise ValueError("torus side not divisible by the block side")
    h = (L - 1) // 2
    T = ba.tau_matrix(tc, 1).reshape(-1, L ** 3, 3 * s)
    owner = lat.site_block(tc, 1)
    cc = lat.L_sublattice_coords(tc, L)
    d = lat.wrap_delta(tc, cc[owner], tc.coords) + h
    o = (d[:, 0] * L + d[:, 1]) * L + d[:, 2]
    M = -T[owner, o] + T[owner].sum(axis=1) / float(L) ** 3
    return M


def bond_covariance_report(tc: Torus, a: float = 1.0):
    """First-level bond covariance two ways on a unit lattice.

    Route one embeds the inverse reduced form; route two pushes the
    constrained Green's operator of the next level through the axial
    regauging map.  Both are full (3s, 3s) matrices; the report carries
    their gap and the gap under a change of regulator.
    """
    if tc.k != 0:
        raise ValueError("the comparison is set up on a unit lattice")
    basis = fluctuation_basis(tc)
    D = curl_matrix(tc)
    delta0 = D.T @ D
    C0 = fluct_covariance(basis, delta0)
    route1 = basis.embed @ C0 @ basis.embed.T

    def route2(areg):
        Gm = gauge_greens_matrix(tc, 1, a=areg, drd_coeff=1.0)
        _, Q = bond_average_matrix(tc, 1)
        Qwt = float(tc.L) ** 3 * Q.T
        mid = np.linalg.inv(Q @ Gm @ Qwt)
        Gt = Gm - Gm @ Qwt @ mid @ Q @ Gm
        reg = np.eye(3 * tc.s) + grad_matrix(tc) @ block_axial_potential(tc)
        return reg @ Gt @ reg.T

    r2 = route2(a)
    r2b = route2(2.5 * a)
    scale = max(1.0, float(np.max(np.abs(route1))))
    return {
        "gap": float(np.max(np.abs(route1 - r2))),
        "scale": scale,
        "regulator_independence": float(np.max(np.abs(r2 - r2b))),
    }


def gram_inverse_expansion(basis: FluctuationBasis, munits: int,
                           max_order: int = 6, width_sites=None):
    """Bump-window parametrix expansion of the Gram inverse.

    Each coordinate is anchored to a site (block centers for kernel
    coordinates, bond tails for the rest); the window inverses stitched
    with the bump partition give the parametrix, and the remainder
    operator drives a geometric series whose truncations are compared
    against the dense inverse.
    """
    t = basis.t
    A = gram_matrix(basis)
    dense = np.linalg.inv(A)
    pos = basis.coordinate_sites()
    msites = munits * t.L ** t.k
    if t.n % msites:
        raise ValueError("cube side must divide the torus side")
    if width_sites is None:
        width_sites = 3 * msites + (msites % 2 == 0)
    width_sites = min(width_sites, t.n if t.n % 2 else t.n - 1)
    centers, Hb = gr.cube_bumps(t, munits)
    n = basis.ntilde
    Gstar = np.zeros((n, n))
    for z in range(len(centers)):
        hvec = Hb[z, pos]
        mask = gr.window_mask(t, centers[z], width_sites)[pos]
        idx = np.flatnonzero(mask)
        local = np.linalg.inv(A[np.ix_(idx, idx)])
        hz = hvec[idx]
        Gstar[np.ix_(idx, idx)] += (hz[:, None] * local) * hz[None, :]
    K = np.eye(n) - A @ Gstar
    term = Gstar.copy()
    approx = Gstar.copy()
    errors, term_norms = [], []
    Kp = np.eye(n)
    for order in range(max_order + 1):
        if order:
            Kp = Kp @ K
            term = Gstar @ Kp
            approx = approx + term
        errors.append(float(np.max(np.abs(approx - dense))))
        term_norms.append(float(np.max(np.abs(term))))
    fit = gr.fit_exp_decay({float(i): e for i, e in enumerate(errors) if e > 0})
    ratio = float(np.exp(-fit["rate"])) if fit["rate"] else 1.0
    return {
        "errors": errors,
        "term_norms": term_norms,
        "fitted_ratio": ratio,
        "rsq": fit["rsq"],
        "remainder_norm": float(np.linalg.norm(K, 2)),
    }


# ---------------------------------------------------------------------------
# log-domain normalization bookkeeping

def constrained_gauss_logz(M, rows):
    """Log of the delta-constrained Gaussian integral with form M:
    the flat measure restricted by full-rank rows picks up the inverse
    square root of det(rows rows^T), and the kernel block contributes
    the usual Gaussian volume."""
    rows = np.atleast_2d(rows)
    keep = _row_rank_reduce(rows)
    C = rows[keep]
    removed = rows.shape[0] - len(keep)
    W = null_space(C) if C.size else np.eye(M.shape[0])
    nu = W.shape[1]
    _, ld_rows = np.linalg.slogdet(C @ C.T)
    B = W.T @ M @ W
    sign, ld_form = np.linalg.slogdet(0.5 * (B + B.T))
    if nu and sign <= 0:
        raise RuntimeError("form not positive definite on the constraint kernel")
    logz = 0.5 * (nu * np.log(2 * np.pi) - ld_rows - ld_form)
    return {"logz": float(logz), "nu": int(nu), "removed": int(removed)}


def level_logz(t: Torus, k: int):
    """Normalization of the level-k constrained flux-energy Gaussian."""
    if k == 0:
        # full-rank identity delta pins the whole field
        return {"logz": 0.0, "nu": 0, "removed": 0}
    cs = constraint_set(t, k)
    return constrained_gauss_logz(flux_energy_matrix(t), cs.rows)


def fluct_logz(tc: Torus, delta_mat):
    """Normalization of the fluctuation Gaussian with the effective form."""
    return constrained_gauss_logz(tc.w_site * delta_mat, fluctuation_rows(tc))


def normalization_tower_report(L: int, N: int, k: int, a: float = 1.0,
                               route: str = "landau"):
    """One step of the gauge normalization recursion in log domain.

    The level-(k+1) constant must equal the level-k constant times the
    fluctuation constant times a pure power of L fixed by the bond and
    site counts; the report carries both sides and the gap, also
    expressed as a multiple of log L for diagnosis.
    """
    if not 0 <= k < N:
        raise ValueError("need 0 <= k < N")
    t_hi = Torus(L, k + 1, N - k - 1)
    t_lo = Torus(L, k, N - k)
    tc = Torus(L, 0, N - k)
    hi = level_logz(t_hi, k + 1)
    lo = level_logz(t_lo, k)
    delta = effective_form_matrix(t_lo, k, route=route, a=a)
    fl = fluct_logz(tc, delta)
    bonds = lambda nn: 3 * L ** (3 * nn)
    sites = lambda nn: L ** (3 * nn)
    power = 0.5 * ((bonds(N) - sites(N)) - (bonds(N - k - 1) - sites(N - k - 1)))
    lhs = hi["logz"]
    rhs = lo["logz"] + fl["logz"] + power * np.log(L)
    return {
        "lhs": lhs,
        "rhs": rhs,
        "gap": abs(lhs - rhs),
        "rel_gap": abs(lhs - rhs) / max(1.0, abs(lhs)),
        "log_L_multiple": (lhs - rhs) / np.log(L),
        "power": power,
        "nu_hi": hi["nu"],
        "nu_lo": lo["nu"],
        "nu_fluct": fl["nu"],
        "removed": hi["removed"] + lo["removed"] + fl["removed"],
    }
