"""Toroidal multiscale lattices: blocks, cubes, polymers, and distances.

Conventions used throughout the package:

- Torus(L, k, m) is the periodic cubic lattice with spacing eta = L**-k and
  physical side L**m, so n = L**(k+m) points per side and s = n**3 sites.
  Site coordinates are integers in units of eta, reduced mod n, which keeps
  equality and wrap exact; distances are computed in integers and scaled last.
- Site index = (c0*n + c1)*n + c2.
- Bonds are positively oriented: bond (x, mu) joins x to x + eta*e_mu and is
  indexed b = mu*s + x.  Antisymmetric extension to reversed bonds is handled
  by the callers, never stored.
- Plaquettes: (x, a) with a = 0,1,2 naming the axis pair (0,1), (0,2), (1,2),
  corners x, x+eta*e_mu, x+eta*e_mu+eta*e_nu, x+eta*e_nu, index p = a*s + x.
- Cubes of odd side c live on the c-sublattice (coordinates that are multiples
  of c) with membership |x - y| < c/2 in the sup metric.  Cubes of sides
  1, L, M, L*M then nest exactly, and each family partitions the torus.
"""

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import minimum_spanning_tree

PLAQ_AXES = ((0, 1), (0, 2), (1, 2))
SITE_CAP = 30_000


class Torus:
    """Periodic cubic lattice with L**(k+m) integer points per side.

    Negative k is permitted here (coarsened companions of a public torus);
    build_torus applies the public-facing validation.
    """

    def __init__(self, L, k, m):
        if m < 0:
            raise ValueError("size_exp m must be >= 0")
        self.L = L
        self.k = k
        self.m = m
        self.n = L ** (k + m)
        self.s = self.n ** 3
        self.eta = float(L) ** (-k)
        self.side = L ** m
        self.w_site = self.eta ** 3
        n = self.n
        c = np.arange(self.s)
        self.coords = np.stack([c // (n * n), (c // n) % n, c % n], axis=1)
        # neighbor tables, one step in +mu / -mu
        self.nbr_plus = [self.shift_index(c, mu, 1) for mu in range(3)]
        self.nbr_minus = [self.shift_index(c, mu, -1) for mu in range(3)]

    def index(self, coords) -> np.ndarray:
        coords = np.asarray(coords)
        n = self.n
        c = np.mod(coords, n)
        return (c[..., 0] * n + c[..., 1]) * n + c[..., 2]

    def shift_index(self, idx, mu, steps=1) -> np.ndarray:
        """Site indices of x + steps*eta*e_mu."""
        c = self.coords[idx].copy()
        c[..., mu] += steps
        return self.index(c)

    def header(self) -> str:
        return "torus L=%d k=%d m=%d" % (self.L, self.k, self.m)

    def __repr__(self):
        return "Torus(L=%d, k=%d, m=%d)" % (self.L, self.k, self.m)

    def __eq__(self, other):
        return (isinstance(other, Torus)
                and (self.L, self.k, self.m) == (other.L, other.k, other.m))

    def __hash__(self):
        return hash((self.L, self.k, self.m))


def build_torus(L: int, k: int, m: int, cap: int = SITE_CAP) -> Torus:
    """Public constructor with the paper-facing validation."""
    if L < 3 or L % 2 == 0:
        raise ValueError("L must be an odd integer >= 3, got %r" % (L,))
    if k < 0 or m < 0:
        raise ValueError("spacing_exp and size_exp must be >= 0")
    sites = L ** (3 * (k + m))
    if sites > cap:
        raise MemoryError(
            "torus with %d sites exceeds the desk-scale cap of %d" % (sites, cap))
    return Torus(L, k, m)


def parse_header(line: str) -> Torus:
    parts = dict(p.split("=") for p in line.split()[1:])
    return Torus(int(parts["L"]), int(parts["k"]), int(parts["m"]))


def bonds(t: Torus) -> np.ndarray:
    """(3s, 2) array of (tail, head) site indices, index order b = mu*s + x."""
    x = np.arange(t.s)
    return np.concatenate(
        [np.stack([x, t.nbr_plus[mu]], axis=1) for mu in range(3)])


def plaquettes(t: Torus) -> np.ndarray:
    """(3s, 4) corner site indices in cyclic order, index order p = a*s + x."""
    x = np.arange(t.s)
    out = []
    for mu, nu in PLAQ_AXES:
        xm = t.nbr_plus[mu]
        xn = t.nbr_plus[nu]
        xmn = t.shift_index(xm, nu, 1)
        out.append(np.stack([x, xm, xmn, xn], axis=1))
    return np.concatenate(out)


def plaq_bonds(t: Torus):
    """Boundary of each plaquette: (3s, 4) bond indices and (3s, 4) signs.

    dA(p) = eta^-1 * sum_i sign_i A(bond_i) for p = (x, (mu, nu)).
    """
    s = t.s
    x = np.arange(s)
    idx, sgn = [], []
    for a, (mu, nu) in enumerate(PLAQ_AXES):
        b1 = mu * s + x
        b2 = nu * s + t.nbr_plus[mu]
        b3 = mu * s + t.nbr_plus[nu]
        b4 = nu * s + x
        idx.append(np.stack([b1, b2, b3, b4], axis=1))
        sgn.append(np.tile([1.0, 1.0, -1.0, -1.0], (s, 1)))
    return np.concatenate(idx), np.concatenate(sgn)


# ---------------------------------------------------------------------------
# distances

def wrap_delta(t: Torus, ci, cj) -> np.ndarray:
    """Signed minimal displacement cj - ci per axis, integer units, in
    (-n/2, n/2].  n is odd so the minimizer is unique."""
    d = np.mod(np.asarray(cj) - np.asarray(ci), t.n)
    return np.where(d > t.n // 2, d - t.n, d)


def dist(t: Torus, i, j) -> np.ndarray:
    """Sup metric with periodic wrap, in physical units."""
    d = np.abs(wrap_delta(t, t.coords[i], t.coords[j]))
    return np.max(d, axis=-1) * t.eta


def dprime(t: Torus, i, j) -> np.ndarray:
    """dist off the diagonal; on the diagonal the contract value L**k = 1/eta."""
    d = dist(t, i, j)
    return np.where(np.asarray(i) == np.asarray(j), float(t.L) ** t.k, d)


def dprime_power_integral(t: Torus, alpha: float) -> float:
    """integral over {d'(x,0) <= 1} of d'(x,0)^-alpha dx, weight eta^3 per site."""
    x = np.arange(t.s)
    dp = dprime(t, x, np.zeros(t.s, dtype=int))
    mask = dp <= 1.0
    return float(np.sum(dp[mask] ** (-alpha)) * t.w_site)


def dprime_convolution_ratio(t: Torus, x: int, y: int, eps: float) -> float:
    """(integral of d'(x,z)^-1 d'(z,y)^-2 dz) / d'(x,y)^-eps for one pair."""
    z = np.arange(t.s)
    fx = dprime(t, np.full(t.s, x), z) ** (-1.0)
    fy = dprime(t, z, np.full(t.s, y)) ** (-2.0)
    val = float(np.sum(fx * fy) * t.w_site)
    return val / float(dprime(t, x, y)) ** (-eps)


# ---------------------------------------------------------------------------
# blocks (side L**j, centered on the L**j-sublattice)

def block_centers(t: Torus, j: int = 1) -> np.ndarray:
    """Site indices of the level-j block centers, ordered as the coarse grid."""
    c = L_sublattice_coords(t, t.L ** j)
    return t.index(c)


def L_sublattice_coords(t: Torus, step: int) -> np.ndarray:
    nc = t.n // step
    g = np.arange(nc ** 3)
    gc = np.stack([g // (nc * nc), (g // nc) % nc, g % nc], axis=1)
    return gc * step


def site_block(t: Torus, j: int = 1) -> np.ndarray:
    """For each site, the coarse-grid flat index of its level-j block."""
    step = t.L ** j
    nc = t.n // step
    g = np.mod((t.coords + step // 2) // step, nc)
    return (g[:, 0] * nc + g[:, 1]) * nc + g[:, 2]


def block_members(t: Torus, j: int = 1) -> np.ndarray:
    """(n_blocks, step**3) site indices per block, block order as block_centers."""
    step = t.L ** j
    owner = site_block(t, j)
    order = np.argsort(owner, kind="stable")
    return order.reshape(-1, step ** 3)


# ---------------------------------------------------------------------------
# M-cubes and polymers (cubes on the M-sublattice of a unit-spacing torus)

def cube_grid(t: Torus, M: int) -> int:
    if M % 2 == 0 or t.n % M != 0:
        raise ValueError("cube side M must be odd and divide the torus side")
    return t.n // M


def cube_centers(t: Torus, M: int) -> np.ndarray:
    """(ncubes**3, 3) integer coords of cube centers (multiples of M)."""
    return L_sublattice_coords(t, M)


def site_cube(t: Torus, M: int) -> np.ndarray:
    nc = cube_grid(t, M)
    g = np.mod((t.coords + M // 2) // M, nc)
    return (g[:, 0] * nc + g[:, 1]) * nc + g[:, 2]


def cube_sites(t: Torus, M: int) -> np.ndarray:
    """(ncubes**3, M**3) site indices per cube."""
    owner = site_cube(t, M)
    order = np.argsort(owner, kind="stable")
    return order.reshape(-1, M ** 3)


def cube_neighbors(t: Torus, M: int, cube) -> np.ndarray:
    """Face-adjacent cube ids (6 per cube, wrap)."""
    nc = cube_grid(t, M)
    g = np.array([cube // (nc * nc), (cube // nc) % nc, cube % nc])
    out = []
    for mu in range(3):
        for step in (1, -1):
            h = g.copy()
            h[mu] = (h[mu] + step) % nc
            out.append((h[0] * nc + h[1]) * nc + h[2])
    return np.unique(out)


def enumerate_polymers(t: Torus, M: int, support) -> list:
    """Decompose a set of cube ids into maximal face-connected components.

    Returns a list of sorted tuples of cube ids; empty support gives [].
    """
    left = set(int(c) for c in support)
    comps = []
    while left:
        stack = [left.pop()]
        comp = {stack[0]}
        while stack:
            c = stack.pop()
            for nb in cube_neighbors(t, M, c):
                if nb in left:
                    left.discard(int(nb))
                    comp.add(int(nb))
                    stack.append(int(nb))
        comps.append(tuple(sorted(comp)))
    return comps


def is_connected(t: Torus, M: int, cubes) -> bool:
    cubes = tuple(cubes)
    if not cubes:
        return False
    return len(enumerate_polymers(t, M, cubes)) == 1


def d_M(t: Torus, M: int, cubes) -> float:
    """Rectilinear MST length over cube centers, divided by M.

    The tree metric is L1 with wrap, computed on integer center coordinates.
    """
    cubes = np.asarray(sorted(set(int(c) for c in cubes)))
    if cubes.size == 0:
        raise ValueError("polymer must contain at least one cube")
    if not is_connected(t, M, cubes):
        raise ValueError("d_M requires a connected polymer")
    if cubes.size == 1:
        return 0.0
    cc = cube_centers(t, M)[cubes]
    delta = np.abs(wrap_delta(t, cc[:, None, :], cc[None, :, :]))
    w = delta.sum(axis=2)
    mst = minimum_spanning_tree(coo_matrix(w))
    return float(mst.sum()) / M


def small_set_classify(t: Torus, M: int, cubes, L: int) -> str:
    return "small" if d_M(t, M, cubes) < L else "large"
