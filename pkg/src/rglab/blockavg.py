"""Scalar and gauge-field block averaging between lattice scales.

Scalar block averages attach parallel-transport phases built from path
averages (tau); gauge-field averages take straight-line means along bonds.
The k-fold scalar average has a closed form using the telescoped path
hierarchy and an equivalent form composing one-step averages through the
scaling maps; tests compare the two.

Weights follow the w_site convention: fine sums carry eta^3, so the
adjoint of a block average is plain phase transport back from the block
center and Q Q^T = I holds exactly at every level.
"""

from itertools import permutations, product

import numpy as np

from . import fields as fld
from .lattice import Torus, L_sublattice_coords, block_centers, site_block, wrap_delta

_PATTERNS = {}


def _path_patterns(L, seg):
    """Merged bond patterns of the six coordinate-order paths per offset.

    Offsets delta enumerate the block of side L in seg-sublattice steps
    (lexicographic in (d0, d1, d2), each in [-(L-1)/2, (L-1)/2]); a path
    walks from the center along whole axes in permutation order, one fine
    bond at a time.  Returns (offsets, terms) where terms[o] is a list of
    (axis, coefficient, relative coords) with the 1/6 path weights merged.
    """
    key = (L, seg)
    if key in _PATTERNS:
        return _PATTERNS[key]
    h = (L - 1) // 2
    offsets = np.array(list(product(range(-h, h + 1), repeat=3)))
    terms = []
    for delta in offsets:
        coef = {}
        for perm in permutations(range(3)):
            pos = np.zeros(3, dtype=int)
            for axis in perm:
                d = int(delta[axis])
                sgn = 1 if d > 0 else -1
                for step in range(abs(d) * seg):
                    rel = pos.copy()
                    rel[axis] += sgn * step if sgn > 0 else -(step + 1)
                    kk = (axis, tuple(rel))
                    coef[kk] = coef.get(kk, 0.0) + sgn / 6.0
                pos[axis] += d * seg
        terms.append([(axis, c, np.array(rel))
                      for (axis, rel), c in sorted(coef.items()) if c != 0.0])
    _PATTERNS[key] = (offsets, terms)
    return _PATTERNS[key]


def tau_table(t: Torus, A, seg: int = 1):
    """Path averages (tau A)(y, y + seg*delta) for every center at once.

    Centers live on the (L*seg)-sublattice in canonical coarse order; the
    table has one column per block offset.  Returns (table, centers,
    offsets) with centers as fine coordinates.
    """
    offsets, terms = _path_patterns(t.L, seg)
    C = L_sublattice_coords(t, seg * t.L)
    tab = np.zeros((len(C), len(offsets)), dtype=np.result_type(A, float))
    for o, lst in enumerate(terms):
        acc = 0.0
        for axis, c, rel in lst:
            acc = acc + c * A[axis, t.index(C + rel)]
        tab[:, o] = acc
    return tab, C, offsets


def tau(t: Torus, A, y, x):
    """Mean over the six coordinate-order paths from y to x of the raw
    bond-value sums.  y must be a block center and x a member of its block."""
    cy, cx = t.coords[y], t.coords[x]
    if np.any(cy % t.L):
        raise ValueError("y is not a block center")
    delta = wrap_delta(t, cy, cx)
    h = (t.L - 1) // 2
    if np.any(np.abs(delta) > h):
        raise ValueError("x is not in the block of y")
    offsets, terms = _path_patterns(t.L, 1)
    o = int((delta[0] + h) * t.L ** 2 + (delta[1] + h) * t.L + (delta[2] + h))
    val = sum(c * A[axis, t.index(cy + rel)] for axis, c, rel in terms[o])
    return complex(val) if np.iscomplexobj(A) else float(val)


def _offset_column(t: Torus, j: int):
    """For each site, the tau_table column of its level-j offset from the
    level-(j+1) center."""
    lo, hi = t.L ** j, t.L ** (j + 1)
    yj = (t.coords + lo // 2) // lo * lo
    yj1 = (t.coords + hi // 2) // hi * hi
    d = wrap_delta(t, yj1, yj) // lo
    h = (t.L - 1) // 2
    return ((d[:, 0] + h) * t.L + (d[:, 1] + h)) * t.L + (d[:, 2] + h)


def tau_k_field(t: Torus, A, k=None):
    """Telescoped hierarchy sums (tau_k A)(y_k(x), x) for every site x.

    Level j contributes the path average between the level-(j+1) and
    level-j centers of x; block nesting makes the hierarchy unique.
    """
    k = t.k if k is None else k
    if k > t.k:
        raise ValueError("k exceeds spacing_exp %d" % t.k)
    out = np.zeros(t.s, dtype=np.result_type(A, float))
    for j in range(k):
        tab, _, _ = tau_table(t, A, t.L ** j)
        out += tab[site_block(t, j + 1), _offset_column(t, j)]
    return out


# ---------------------------------------------------------------------------
# scalar block averages

def _q_step(t: Torus, A, phi, coupling):
    """One averaging step: phi on the unit companion of t, phases from the
    fine field A, result on the spacing-L companion."""
    seg = t.L ** t.k
    tab, C, offsets = tau_table(t, A, seg)
    t0 = Torus(t.L, 0, t.m)
    t1 = Torus(t.L, -1, t.m)
    pts = t0.index(C[:, None, :] // seg + offsets[None, :, :])
    theta = coupling * t.eta * tab
    c, s = np.cos(theta), np.sin(theta)
    vals = phi[pts]
    F = np.stack([(c * vals[..., 0] - s * vals[..., 1]).mean(axis=1),
                  (s * vals[..., 0] + c * vals[..., 1]).mean(axis=1)], axis=1)
    return t1, F


def Q_apply(t: Torus, A, phi, coupling):
    """(Q(A) phi)(y) = L^-3 sum over the block of e^(q c (tau A)(y,x)) phi(x),
    on the unit lattice."""
    if t.k != 0:
        raise ValueError("one-step average is defined on the unit lattice")
    if phi.shape[0] != t.s:
        raise ValueError("mismatched tori")
    return _q_step(t, A, phi, coupling)


def Q_adjoint(t: Torus, A, F, coupling):
    """Phase transport back from the block center: (Q^T F)(x) =
    e^(-q c (tau A)(y(x), x)) F(y(x))."""
    if t.k != 0:
        raise ValueError("one-step average is defined on the unit lattice")
    tab, _, _ = tau_table(t, A, 1)
    owner = site_block(t, 1)
    theta = coupling * tab[owner, _offset_column(t, 0)]
    return fld.rot_apply(-theta, F[owner])


def qk_apply(t: Torus, A, f, coupling, k=None):
    """Closed form of the k-fold average: phases coupling * L^-k * tau_k,
    block mean over the unit block.  Returns (unit torus, coarse field)."""
    k = t.k if k is None else k
    if k > t.k:
        raise ValueError("k exceeds spacing_exp %d" % t.k)
    if k < 1 or k != t.k:
        raise ValueError("field torus must be T^-k with k >= 1")
    theta = coupling * t.eta * tau_k_field(t, A, k)
    rotated = fld.rot_apply(theta, f)
    tc = Torus(t.L, 0, t.m)
    out = np.zeros((tc.s, 2), dtype=rotated.dtype)
    np.add.at(out, site_block(t, k), rotated)
    return tc, out * t.w_site


def qk_adjoint(t: Torus, A, F, coupling, k=None):
    k = t.k if k is None else k
    if k < 1 or k != t.k:
        raise ValueError("field torus must be T^-k with k >= 1")
    theta = coupling * t.eta * tau_k_field(t, A, k)
    return fld.rot_apply(-theta, F[site_block(t, k)])


def qk_recursive(t: Torus, A, f, coupling):
    """The k-fold average via the scaling recursion
    Q_k(A) f = (Q(A_L) Q_{k-1}(A_L) f_L) scaled back down."""
    if t.k < 1:
        raise ValueError("field torus must be T^-k with k >= 1")
    return _qk_rec(t, A, f, coupling)


def _qk_rec(t, A, f, coupling):
    if t.k == 0:
        return t, f
    tu, Au = fld.scale_up(t, A, "gauge")
    _, fu = fld.scale_up(t, f, "scalar")
    cu = coupling / np.sqrt(t.L)
    _, g = _qk_rec(tu, Au, fu, cu)
    t1, h = _q_step(tu, Au, g, cu)
    return fld.scale_down(t1, h, "scalar")


def q_matrix(t: Torus, A, coupling):
    """Dense one-step average on the unit lattice, shape (2 s_c, 2 s),
    row-major over (site, component)."""
    if t.k != 0:
        raise ValueError("one-step average is defined on the unit lattice")
    tab, _, _ = tau_table(t, A, 1)
    owner = site_block(t, 1)
    theta = coupling * tab[owner, _offset_column(t, 0)]
    return _avg_matrix(theta, owner, t.L ** -3.0)


def qk_matrix(t: Torus, A, coupling, k=None):
    """Dense k-fold average, shape (2 s_c, 2 s).  The adjoint in the
    w_site-weighted inner products is L^(3k) times the plain transpose."""
    k = t.k if k is None else k
    if k < 1 or k != t.k:
        raise ValueError("field torus must be T^-k with k >= 1")
    theta = coupling * t.eta * tau_k_field(t, A, k)
    return _avg_matrix(theta, site_block(t, k), t.w_site)


def _avg_matrix(theta, owner, w):
    s = len(owner)
    sc = int(owner.max()) + 1
    M = np.zeros((2 * sc, 2 * s), dtype=np.result_type(theta, float))
    c, sn = w * np.cos(theta), w * np.sin(theta)
    x = np.arange(s)
    M[2 * owner, 2 * x] = c
    M[2 * owner, 2 * x + 1] = -sn
    M[2 * owner + 1, 2 * x] = sn
    M[2 * owner + 1, 2 * x + 1] = c
    return M


def qk_matrix_plain(t: Torus, j=None):
    """Dense level-j block mean for one-component fields, shape (s_c, s)."""
    j = t.k if j is None else j
    owner = site_block(t, j)
    M = np.zeros((int(owner.max()) + 1, t.s))
    M[owner, np.arange(t.s)] = float(t.L) ** (-3 * j)
    return M


def _top_step_theta(t: Torus, A, coupling):
    # phases for the step from the unit sublattice of t to the L-sublattice
    if t.m < 1:
        raise ValueError("no L-sublattice on a single-block torus")
    seg = t.L ** t.k
    tab, _, _ = tau_table(t, A, seg)
    pts0 = t.index(L_sublattice_coords(t, seg))
    owner = site_block(t, t.k + 1)[pts0]
    theta = coupling * t.eta * tab[owner, _offset_column(t, t.k)[pts0]]
    return theta, owner


def q_top_apply(t: Torus, A, Phi, coupling):
    """One-step average from the unit sublattice of t to the L-sublattice,
    phases from the fine field A.  Generalizes Q_apply to t.k >= 0."""
    if t.m < 1:
        raise ValueError("no L-sublattice on a single-block torus")
    if Phi.shape[0] != (t.n // t.L ** t.k) ** 3:
        raise ValueError("field must live on the unit sublattice")
    return _q_step(t, A, Phi, coupling)[1]


def q_top_adjoint(t: Torus, A, F, coupling):
    theta, owner = _top_step_theta(t, A, coupling)
    return fld.rot_apply(-theta, F[owner])


def q_top_matrix(t: Torus, A, coupling):
    """Dense one-step top average, shape (2 s_1, 2 s_0); the weighted
    adjoint is L^3 times the plain transpose."""
    theta, owner = _top_step_theta(t, A, coupling)
    return _avg_matrix(theta, owner, t.L ** -3.0)


def qk1_matrix(t: Torus, A, coupling):
    """Dense (k+1)-fold average from the fine torus to the L-sublattice:
    the top step composed with the k-fold average, as one closed form."""
    if t.m < 1:
        raise ValueError("no L-sublattice on a single-block torus")
    tab, _, _ = tau_table(t, A, t.L ** t.k)
    owner = site_block(t, t.k + 1)
    theta = coupling * t.eta * (tau_k_field(t, A) + tab[owner, _offset_column(t, t.k)])
    return _avg_matrix(theta, owner, float(t.L) ** (-3 * (t.k + 1)))


# ---------------------------------------------------------------------------
# gauge-field averages (straight-line means, delta-function flavor)

def qcal_apply(t: Torus, A):
    """One averaging step for bond fields:
    value at (y, y+L eta e_mu) = L^-4 sum over the block of the straight
    line sums A(Gamma_{x, x+L eta e_mu}); reversed bonds get minus."""
    tc = Torus(t.L, t.k - 1, t.m)
    h = (t.L - 1) // 2
    offsets = np.array(list(product(range(-h, h + 1), repeat=3)))
    C = L_sublattice_coords(t, t.L)
    pts = C[:, None, :] + offsets[None, :, :]
    out = np.zeros((3, tc.s), dtype=np.result_type(A, float))
    e = np.eye(3, dtype=int)
    for mu in range(3):
        acc = 0.0
        for i in range(t.L):
            acc = acc + A[mu, t.index(pts + i * e[mu])].sum(axis=1)
        out[mu] = acc * float(t.L) ** -4
    return tc, out


def qcal_k(t: Torus, A, k=None):
    """k-fold gauge-field average by composing one-step averages."""
    k = t.k if k is None else k
    if k > t.k:
        raise ValueError("k exceeds spacing_exp %d" % t.k)
    tc, Ac = t, A
    for _ in range(k):
        tc, Ac = qcal_apply(tc, Ac)
    return tc, Ac


def qcal_closed(t: Torus, A, k=None):
    """Closed form of the k-fold average: block mean of L^-k times the
    straight line sums over L^k fine bonds."""
    k = t.k if k is None else k
    if k > t.k:
        raise ValueError("k exceeds spacing_exp %d" % t.k)
    step = t.L ** k
    tc = Torus(t.L, t.k - k, t.m)
    h = (step - 1) // 2
    offs = np.arange(-h, h + 1)
    C = L_sublattice_coords(t, step)
    out = np.zeros((3, tc.s), dtype=np.result_type(A, float))
    e = np.eye(3, dtype=int)
    for mu in range(3):
        acc = 0.0
        for d0 in offs:
            for d1 in offs:
                for d2 in offs:
                    base = C + np.array([d0, d1, d2])
                    for i in range(step):
                        acc = acc + A[mu, t.index(base + i * e[mu])]
        out[mu] = acc * float(step) ** -4
    return tc, out


def qcal_matrix(t: Torus, k=None):
    """Dense k-fold gauge average, shape (3 s_c, 3 s), mu-major bond order."""
    k = t.k if k is None else k
    if k > t.k:
        raise ValueError("k exceeds spacing_exp %d" % t.k)
    step = t.L ** k
    tc = Torus(t.L, t.k - k, t.m)
    h = (step - 1) // 2
    offsets = np.array(list(product(range(-h, h + 1), repeat=3)))
    C = L_sublattice_coords(t, step)
    pts = C[:, None, :] + offsets[None, :, :]
    rows = np.repeat(np.arange(tc.s), len(offsets))
    M = np.zeros((3 * tc.s, 3 * t.s))
    w = float(step) ** -4
    e = np.eye(3, dtype=int)
    for mu in range(3):
        for i in range(step):
            cols = t.index(pts + i * e[mu]).ravel()
            np.add.at(M, (mu * tc.s + rows, mu * t.s + cols), w)
    return M


def tau_matrix(t: Torus, seg: int = 1):
    """Dense linear map bond field -> path averages, one row per (center,
    offset) pair in tau_table order, columns mu-major over fine bonds."""
    offsets, terms = _path_patterns(t.L, seg)
    C = L_sublattice_coords(t, seg * t.L)
    nb = len(offsets)
    M = np.zeros((len(C) * nb, 3 * t.s))
    rows = np.arange(len(C)) * nb
    for o, lst in enumerate(terms):
        for axis, c, rel in lst:
            M[rows + o, axis * t.s + t.index(C + rel)] += c
    return M


def axial_residual(t: Torus, A, k=None):
    """The arguments of every axial-constraint delta: the list, over levels
    j = 0 .. k-1, of the path-average tables of the j-fold averaged field."""
    k = t.k if k is None else k
    if k > t.k:
        raise ValueError("k exceeds spacing_exp %d" % t.k)
    out = []
    tj, Aj = t, A
    for _ in range(k):
        tab, _, _ = tau_table(tj, Aj, 1)
        out.append(tab)
        tj, Aj = qcal_apply(tj, Aj)
    return out


def stokes_check(t: Torus, A, k=None):
    """Coarse field strength of the averaged field two ways: directly, and
    as the block mean of L^-2k times the fine flux through the squares
    spanned by the coarse plaquette.  Returns (lhs, rhs) on the coarse torus."""
    k = t.k if k is None else k
    tc, Ac = qcal_closed(t, A, k)
    lhs = fld.exterior_d(tc, Ac)
    step = t.L ** k
    h = (step - 1) // 2
    offsets = np.array(list(product(range(-h, h + 1), repeat=3)))
    C = L_sublattice_coords(t, step)
    pts = C[:, None, :] + offsets[None, :, :]
    F = fld.exterior_d(t, A)
    rhs = np.zeros_like(lhs)
    e = np.eye(3, dtype=int)
    from .lattice import PLAQ_AXES
    for a, (mu, nu) in enumerate(PLAQ_AXES):
        acc = 0.0
        for i in range(step):
            for j in range(step):
                acc = acc + F[a, t.index(pts + i * e[mu] + j * e[nu])].sum(axis=1)
        rhs[a] = acc * float(step) ** -5
    return lhs, rhs


def divergence_theorem_check(t: Torus, f, y):
    """Volume integral of the backward divergence over the unit block at
    center y against the inward surface sum; the two agree by telescoping."""
    step = t.L ** t.k
    cy = t.coords[y]
    if np.any(cy % step):
        raise ValueError("y is not a unit-block center")
    h = (step - 1) // 2
    offs = np.array(list(product(range(-h, h + 1), repeat=3)))
    sites = t.index(cy + offs)
    div = sum((f[mu][t.nbr_minus[mu]] - f[mu]) / t.eta for mu in range(3))
    lhs = t.w_site * div[sites].sum()
    face = np.array(list(product(range(-h, h + 1), repeat=2)))
    rhs = 0.0
    for mu in range(3):
        lo = np.insert(face, mu, -h, axis=1) + cy
        hi = np.insert(face, mu, h, axis=1) + cy
        lo[:, mu] -= 1
        rhs += t.eta ** 2 * (f[mu][t.index(lo)].sum() - f[mu][t.index(hi)].sum())
    return lhs, rhs


# ---------------------------------------------------------------------------
# measured bounds

def louie_report(t: Torus, A, f, phi, coupling):
    """Sup-norm ratios showing that block averages of covariant divergences
    and Laplacians are controlled by the field itself, one derivative down."""
    div = sum(fld.cov_deriv_T(t, A, f[mu], mu, coupling) for mu in range(3))
    _, qdiv = qk_apply(t, A, div, coupling)
    lap = fld.minus_laplacian(t, A, phi, coupling)
    _, qlap = qk_apply(t, A, lap, coupling)
    grad = np.stack([fld.cov_deriv(t, A, phi, mu, coupling) for mu in range(3)])
    return {
        "div_ratio": fld.linf_norm(qdiv) / fld.linf_norm(f),
        "lap_ratio": fld.linf_norm(qlap) / fld.linf_norm(grad),
    }


def slippery_margin(t: Torus, coupling, im_bound, rng, samples=4):
    """max of coupling * eta * |Im tau_k| over fields with |Im A| <= im_bound;
    staying below 1 keeps the transported phases in the analyticity strip."""
    worst = 0.0
    for _ in range(samples):
        A = 1j * rng.uniform(-im_bound, im_bound, size=(3, t.s))
        tk = tau_k_field(t, A)
        worst = max(worst, coupling * t.eta * float(np.max(np.abs(tk.imag))))
    return worst
