"""Scalar and gauge fields on a torus, with covariant calculus and symmetries.

Representations:

- scalar field: (s, 2) array, real or complex, components phi1, phi2,
  |phi(x)|^2 = |phi1|^2 + |phi2|^2.
- gauge field: (3, s) array of values on positively oriented bonds,
  A[mu, x] is the value on (x, x + eta*e_mu); the reversed bond carries -A.
- two-form: (3, s) array on plaquettes, F[a, x] with a naming the axis pair
  lattice.PLAQ_AXES[a].

The charge group is SO(2) with generator q = [[0,-1],[1,0]]; e^(q theta) is
the rotation by theta, applied componentwise and valid for complex theta.
All inner products carry the weight eta^3 per site, bond, or plaquette, so
adjoints on a single torus are plain transposes.
"""

import numpy as np

from .lattice import PLAQ_AXES, Torus, dist, wrap_delta

Q_GEN = np.array([[0.0, -1.0], [1.0, 0.0]])
C_CONJ = np.array([[1.0, 0.0], [0.0, -1.0]])


def rot(theta):
    """The 2x2 rotation e^(q theta); theta may be complex."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def rot_apply(theta, phi):
    """Apply site-dependent rotations e^(q theta(x)) to a scalar field."""
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([c * phi[:, 0] - s * phi[:, 1],
                     s * phi[:, 0] + c * phi[:, 1]], axis=1)


def random_scalar(t: Torus, rng, scale=1.0, complexify=False) -> np.ndarray:
    phi = rng.standard_normal((t.s, 2)) * scale
    if complexify:
        phi = phi + 1j * rng.standard_normal((t.s, 2)) * scale
    return phi


def random_gauge(t: Torus, rng, scale=1.0, complexify=False) -> np.ndarray:
    A = rng.standard_normal((3, t.s)) * scale
    if complexify:
        A = A + 1j * rng.standard_normal((3, t.s)) * scale
    return A


# ---------------------------------------------------------------------------
# covariant calculus

def cov_deriv(t: Torus, A, phi, mu: int, ek: float):
    """(e^(q ek eta A_mu(x)) phi(x + eta e_mu) - phi(x)) / eta."""
    theta = ek * t.eta * A[mu]
    return (rot_apply(theta, phi[t.nbr_plus[mu]]) - phi) / t.eta


def cov_deriv_T(t: Torus, A, phi, mu: int, ek: float):
    """Adjoint of cov_deriv in the eta^3-weighted inner product."""
    j = t.nbr_minus[mu]
    theta = ek * t.eta * A[mu][j]
    return (rot_apply(-theta, phi[j]) - phi) / t.eta


def cov_grad(t: Torus, A, phi, mu: int, ek: float):
    """The symmetrized derivative, transforms like a vector field."""
    return 0.5 * (cov_deriv(t, A, phi, mu, ek) - cov_deriv_T(t, A, phi, mu, ek))


def minus_laplacian(t: Torus, A, phi, ek: float):
    """(-Delta_A phi) = sum_mu cov_deriv_T(cov_deriv(phi)), a positive form."""
    out = np.zeros(phi.shape, dtype=np.result_type(A, phi, float))
    for mu in range(3):
        out += cov_deriv_T(t, A, cov_deriv(t, A, phi, mu, ek), mu, ek)
    return out


def grad_site(t: Torus, lam):
    """Bond field of forward differences of a site function."""
    return np.stack([(lam[t.nbr_plus[mu]] - lam) / t.eta for mu in range(3)])


def delta1(t: Torus, A):
    """Adjoint of grad_site: site function sum_mu (A_mu(x-) - A_mu(x))/eta."""
    return sum((A[mu][t.nbr_minus[mu]] - A[mu]) / t.eta for mu in range(3))


def exterior_d(t: Torus, A):
    """Field strength on plaquettes, dA(p) = eta^-1 sum of signed bond values."""
    F = np.empty_like(A)
    for a, (mu, nu) in enumerate(PLAQ_AXES):
        F[a] = (A[mu] + A[nu][t.nbr_plus[mu]]
                - A[mu][t.nbr_plus[nu]] - A[nu]) / t.eta
    return F


def delta_2form(t: Torus, F):
    """Adjoint of exterior_d (plain transpose, weights match)."""
    A = np.zeros_like(F)
    for a, (mu, nu) in enumerate(PLAQ_AXES):
        A[mu] += (F[a] - F[a][t.nbr_minus[nu]]) / t.eta
        A[nu] += (F[a][t.nbr_minus[mu]] - F[a]) / t.eta
    return A


def gauge_transform(t: Torus, A, phi, lam, ek: float):
    """phi -> e^(q ek lam) phi, A -> A - grad lam."""
    return A - grad_site(t, lam), rot_apply(ek * lam, phi)


def charge_conjugate(phi):
    return phi @ C_CONJ.T


# ---------------------------------------------------------------------------
# lattice symmetries: r = (perm, signs, shift) acts on coordinates by
# (r c)_i = signs[i] * c[perm[i]] + shift[i]  (mod n)

def symmetry_group(rng=None, count=None):
    """All 48 point symmetries (perm, signs) with zero shift."""
    from itertools import permutations, product
    out = [(np.array(p), np.array(s), np.zeros(3, dtype=int))
           for p in permutations(range(3)) for s in product((1, -1), repeat=3)]
    if count is not None:
        idx = rng.choice(len(out), size=count, replace=False)
        out = [out[i] for i in idx]
    return out


def site_map(t: Torus, r):
    """target_index[x] = index of r(x)."""
    perm, signs, shift = r
    c = t.coords[:, perm] * signs + shift
    return t.index(c)


def apply_symmetry_scalar(t: Torus, r, phi):
    out = np.empty_like(phi)
    out[site_map(t, r)] = phi
    return out


def apply_symmetry_gauge(t: Torus, r, A):
    """A_r(b) = A(r^-1 b) with the orientation sign of the image bond."""
    perm, signs, shift = r
    tgt = site_map(t, r)
    out = np.empty_like(A)
    for i in range(3):
        mu = perm[i]  # r maps e_mu to signs[i]*e_i
        if signs[i] == 1:
            out[i][tgt] = A[mu]
        else:
            out[i][t.nbr_minus[i][tgt]] = -A[mu]
    return out


def apply_symmetry_2form(t: Torus, r, F):
    perm, signs, shift = r
    tgt = site_map(t, r)
    out = np.empty_like(F)
    pair_index = {pair: a for a, pair in enumerate(PLAQ_AXES)}
    for a, (mu, nu) in enumerate(PLAQ_AXES):
        # images of the two axes spanning the plaquette
        i = int(np.where(perm == mu)[0][0])
        j = int(np.where(perm == nu)[0][0])
        sgn = signs[i] * signs[j]
        base = tgt
        if signs[i] == -1:
            base = t.nbr_minus[i][base]
        if signs[j] == -1:
            base = t.nbr_minus[j][base]
        if i < j:
            out[pair_index[(i, j)]][base] = sgn * F[a]
        else:
            out[pair_index[(j, i)]][base] = -sgn * F[a]
    return out


# ---------------------------------------------------------------------------
# scaling maps between Torus(L, k, m) and Torus(L, k-1, m+1)

def scale_up(t: Torus, field, kind: str):
    """f_L(x) = L^(-1/2) f(L^-1 x): relabel to the coarser-spacing torus."""
    if t.k < 1:
        raise ValueError("cannot scale above spacing_exp 0")
    t2 = Torus(t.L, t.k - 1, t.m + 1)
    return t2, field * float(t.L) ** (-0.5)


def scale_down(t: Torus, field, kind: str):
    if t.m < 1:
        raise ValueError("cannot scale below size_exp 0")
    t2 = Torus(t.L, t.k + 1, t.m - 1)
    return t2, field * float(t.L) ** 0.5


# ---------------------------------------------------------------------------
# norms

def site_abs(phi):
    """|phi(x)|, using complex moduli componentwise."""
    return np.sqrt(np.sum(np.abs(phi) ** 2, axis=-1))


def l2_norm(t: Torus, field) -> float:
    return float(np.sqrt(np.sum(np.abs(field) ** 2) * t.w_site))


def linf_norm(field) -> float:
    a = np.asarray(field)
    if a.ndim == 2 and a.shape[-1] == 2:
        return float(np.max(site_abs(a)))
    return float(np.max(np.abs(a)))


def _holder_displacements(t: Torus):
    """Nonzero integer displacements with sup distance <= 1 physical."""
    r = min(t.L ** t.k, (t.n - 1) // 2)
    rng1 = np.arange(-r, r + 1)
    out = []
    for d0 in rng1:
        for d1 in rng1:
            for d2 in rng1:
                if (d0, d1, d2) != (0, 0, 0):
                    out.append((d0, d1, d2))
    return out


def transport_sum(t: Torus, A, delta):
    """A(Gamma_x,x+delta) for every x: signed bond-value sum along the
    coordinate-ordered standard path."""
    tot = np.zeros(t.s, dtype=A.dtype)
    pos = np.arange(t.s)
    for mu in range(3):
        step = 1 if delta[mu] > 0 else -1
        for _ in range(abs(delta[mu])):
            if step == 1:
                tot = tot + A[mu][pos]
                pos = t.nbr_plus[mu][pos]
            else:
                pos = t.nbr_minus[mu][pos]
                tot = tot - A[mu][pos]
    return tot


def holder_seminorm(t: Torus, A, f, alpha: float, ek: float) -> float:
    """sup over pairs d(x,y) <= 1 of |e^(q ek eta A(Gamma)) f(y) - f(x)| / d^alpha."""
    best = 0.0
    for delta in _holder_displacements(t):
        d = max(abs(v) for v in delta) * t.eta
        tau = transport_sum(t, A, delta)
        y = t.index(t.coords + np.array(delta))
        val = rot_apply(ek * t.eta * tau, f[y]) - f
        best = max(best, np.max(site_abs(val)) / d ** alpha)
    return best


def holder_grad_seminorm(t: Torus, A, f, alpha: float, ek: float) -> float:
    """max over mu of the Holder seminorm of the covariant derivative."""
    return max(holder_seminorm(t, A, cov_deriv(t, A, f, mu, ek), alpha, ek)
               for mu in range(3))


def plain_deriv(t: Torus, g):
    """(3, s) forward differences of a one-component site function."""
    return np.stack([(g[t.nbr_plus[mu]] - g) / t.eta for mu in range(3)])


def holder_plain(t: Torus, g, alpha: float, mask=None) -> float:
    """sup |g(y) - g(x)| / d(x,y)^alpha over pairs with d <= 1, optionally
    restricted to pairs inside mask."""
    best = 0.0
    for delta in _holder_displacements(t):
        d = max(abs(v) for v in delta) * t.eta
        y = t.index(t.coords + np.array(delta))
        val = np.abs(g[y] - g)
        if mask is not None:
            val = val[mask & mask[y]]
            if val.size == 0:
                continue
        best = max(best, float(np.max(val)) / d ** alpha)
    return best


# ---------------------------------------------------------------------------
# action

def potential(t: Torus, phi, eps_c: float, mu_c: float, lam_c: float) -> float:
    a2 = np.sum(np.abs(phi) ** 2, axis=1)
    return float(np.sum(eps_c + 0.5 * mu_c * a2 + 0.25 * lam_c * a2 ** 2) * t.w_site)


def action(t: Torus, A, phi, ek: float, eps_c=0.0, mu_c=0.0, lam_c=0.0) -> float:
    F = exterior_d(t, A)
    kin = sum(np.sum(np.abs(cov_deriv(t, A, phi, mu, ek)) ** 2) for mu in range(3))
    return float(0.5 * np.sum(np.abs(F) ** 2) * t.w_site
                 + 0.5 * kin * t.w_site
                 + potential(t, phi, eps_c, mu_c, lam_c))


# ---------------------------------------------------------------------------
# axial-gauge representative on a cube (unit-lattice construction, used with
# integer units: spacing 1, dA without the eta factor)

def axial_representative(t: Torus, A, y: int, radius: int):
    """On the cube |x - y| <= radius return (mask, lam, Aprime) with
    A = Aprime + grad lam on interior bonds and Aprime depending on dA only.

    lam(x) integrates A along the coordinate-ordered path from y; distances
    and derivatives here are in lattice units.
    """
    delta = wrap_delta(t, t.coords[y], t.coords)
    mask = np.all(np.abs(delta) <= radius, axis=1)
    lam = np.zeros(t.s, dtype=A.dtype)
    sites = np.where(mask)[0]
    for x in sites:
        d = delta[x]
        pos = y
        tot = 0.0
        for mu in range(3):
            step = 1 if d[mu] > 0 else -1
            for _ in range(abs(d[mu])):
                if step == 1:
                    tot += A[mu][pos]
                    pos = t.nbr_plus[mu][pos]
                else:
                    pos = t.nbr_minus[mu][pos]
                    tot -= A[mu][pos]
        lam[x] = tot
    Ap = np.zeros_like(A)
    inner = np.zeros((3, t.s), dtype=bool)
    for mu in range(3):
        both = mask & mask[t.nbr_plus[mu]] & (np.abs(delta[:, mu] + 1) <= radius)
        inner[mu] = both
        Ap[mu][both] = A[mu][both] - (lam[t.nbr_plus[mu]] - lam)[both]
    return inner, lam, Ap


# ---------------------------------------------------------------------------
# small field domains

def s_domain_report(t_unit: Torus, sched, k: int, dA=None, mismatch=None,
                    dphi=None, phi=None, dPhi=None, Phi=None):
    """Rows (name, measured, limit, ok) for the S_k bounds that the supplied
    fields allow, plus the fundamental-field consequences."""
    p = sched.p_k(k)
    lam = sched.lam_k(k)
    rows = []

    def add(name, value, limit):
        if value is not None:
            rows.append((name, float(value), float(limit), bool(value <= limit)))

    add("dA_min", None if dA is None else linf_norm(dA), p)
    add("Phi_mismatch", None if mismatch is None else linf_norm(mismatch), p)
    add("dphi_min", None if dphi is None else linf_norm(dphi), p)
    add("phi_min", None if phi is None else linf_norm(phi), lam ** -0.25 * p)
    add("fund_dPhi", None if dPhi is None else linf_norm(dPhi), 3 * p)
    add("fund_Phi", None if Phi is None else linf_norm(Phi), 2 * lam ** -0.25 * p)
    return rows


def s_domain_ok(rows) -> bool:
    return all(ok for _, _, _, ok in rows)


def r_domain_report(t: Torus, A, phi, sched, k: int, alpha=0.625,
                    half=False, M=3):
    """Rows for the analyticity-domain bounds on (A, phi).

    The real part of A is replaced per enlarged cube by its axial
    representative (which depends on dA only) before the field bounds are
    measured; the imaginary part is bounded directly.  half=True tests the
    domain shrunk by 1/2 on every right side.
    """
    from . import lattice as lat
    ek = sched.e_k(k)
    lam = sched.lam_k(k)
    eps = sched.eps
    fac = 0.5 if half else 1.0
    A_re, A_im = np.real(A), np.imag(A)
    radius = min(3 * M * t.L ** t.k - 1, t.n - 1) // 2
    Mc = M * t.L ** t.k if t.n % (M * t.L ** t.k) == 0 else t.n
    rep = [0.0, 0.0, 0.0]
    for y in lat.cube_centers(t, Mc):
        inner, _, Ap = axial_representative(t, A_re, t.index(y), radius)
        for mu in range(3):
            g = Ap[mu]
            msk = inner[mu]
            rep[0] = max(rep[0], float(np.max(np.abs(g[msk]), initial=0.0)))
            d = np.abs(np.stack([(g[t.nbr_plus[nu]] - g) / t.eta
                                 for nu in range(3)]))
            ok = msk & np.stack([msk[t.nbr_plus[nu]] for nu in range(3)])
            rep[1] = max(rep[1], float(np.max(d[ok], initial=0.0)))
            rep[2] = max(rep[2], holder_plain(t, g, alpha, mask=msk))

    def comp_max(op, arr):
        return max(op(arr[mu]) for mu in range(3))

    rows = [
        ("A0_rep", rep[0], fac * 0.5 * ek ** (-1 + eps)),
        ("dA0_rep", rep[1], fac * 0.5 * ek ** (-1 + 2 * eps)),
        ("holder_dA0_rep", rep[2], fac * 0.5 * ek ** (-1 + 3 * eps)),
        ("A1", linf_norm(A_im), fac * 0.5 * ek ** (-1 + eps)),
        ("dA1", comp_max(lambda g: linf_norm(plain_deriv(t, g)), A_im),
         fac * 0.5 * ek ** (-1 + 2 * eps)),
        ("holder_dA1",
         comp_max(lambda g: max(holder_plain(t, pd, alpha)
                                for pd in plain_deriv(t, g)), A_im),
         fac * 0.5 * ek ** (-1 + 3 * eps)),
        ("phi", linf_norm(phi), fac * lam ** (-0.25 - eps)),
        ("dphi", max(linf_norm(cov_deriv(t, A, phi, mu, ek)) for mu in range(3)),
         fac * lam ** (-1 / 6 - 2 * eps)),
        ("holder_dphi", holder_grad_seminorm(t, A, phi, alpha, ek),
         fac * lam ** (-1 / 6 - eps)),
    ]
    return [(n, float(v), float(lim), bool(v <= lim)) for n, v, lim in rows]


# ---------------------------------------------------------------------------
# serialization

def save_field(path, t: Torus, field, kind: str):
    arr = np.asarray(field)
    flat = arr.reshape(-1, t.s).T if kind == "gauge" else arr
    with open(path, "w") as fh:
        fh.write(t.header() + " kind=%s\n" % kind)
        for i in range(t.s):
            fh.write("%d," % i + ",".join("%.17g" % v for v in np.atleast_1d(flat[i])) + "\n")


def load_field(path):
    from .lattice import parse_header
    with open(path) as fh:
        head = fh.readline().split(" kind=")
        t = parse_header(head[0])
        kind = head[1].strip()
        rows = [list(map(float, line.split(",")[1:])) for line in fh]
    arr = np.array(rows)
    if kind == "gauge":
        arr = arr.T.reshape(3, t.s)
    return t, arr, kind
