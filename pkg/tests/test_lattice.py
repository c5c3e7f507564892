import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rglab import lattice as lat


@pytest.fixture(scope="module")
def unit9():
    return lat.build_torus(3, 0, 2)


@pytest.fixture(scope="module")
def third9():
    return lat.build_torus(3, 1, 1)


def test_counting_unit(unit9):
    assert unit9.s == 729
    assert lat.bonds(unit9).shape == (2187, 2)
    assert lat.plaquettes(unit9).shape == (2187, 4)


def test_counting_third(third9):
    assert third9.s == 729
    assert third9.eta == pytest.approx(1 / 3)
    assert third9.side == 3


def test_build_validation():
    with pytest.raises(ValueError):
        lat.build_torus(2, 0, 1)
    with pytest.raises(ValueError):
        lat.build_torus(1, 0, 1)
    with pytest.raises(ValueError):
        lat.build_torus(3, -1, 1)
    with pytest.raises(MemoryError):
        lat.build_torus(3, 2, 2)


def test_enumerations_duplicate_free(unit9):
    b = lat.bonds(unit9)
    assert len(np.unique(b, axis=0)) == len(b)
    p = lat.plaquettes(unit9)
    assert len(np.unique(np.sort(p, axis=1), axis=0)) == len(p)


def test_index_roundtrip(unit9):
    x = np.arange(unit9.s)
    assert np.array_equal(unit9.index(unit9.coords), x)
    # wrap: coordinates reduce mod n
    assert unit9.index((9, 0, 0)) == unit9.index((0, 0, 0))
    assert unit9.index((-1, 0, 0)) == unit9.index((8, 0, 0))


def test_shift_inverse(unit9):
    x = np.arange(unit9.s)
    for mu in range(3):
        assert np.array_equal(unit9.shift_index(unit9.nbr_plus[mu], mu, -1), x)
        assert np.array_equal(unit9.shift_index(x, mu, unit9.n), x)


def test_header_roundtrip(third9):
    assert third9.header() == "torus L=3 k=1 m=1"
    t = lat.parse_header(third9.header())
    assert t == third9


def test_dist_examples(third9):
    o = third9.index((0, 0, 0))
    assert lat.dist(third9, o, third9.index((1, 0, 0))) == pytest.approx(third9.eta)
    # wrap: 8 steps is 1 step the other way
    assert lat.dist(third9, o, third9.index((0, 0, 8))) == pytest.approx(third9.eta)
    # sup metric takes the largest axis separation
    assert lat.dist(third9, o, third9.index((1, 2, 3))) == pytest.approx(1.0)


def test_dprime_contract_value():
    t = lat.build_torus(3, 2, 0)
    o = t.index((0, 0, 0))
    assert lat.dprime(t, o, o) == pytest.approx(9.0)
    x = t.index((1, 0, 0))
    assert lat.dprime(t, o, x) == pytest.approx(lat.dist(t, o, x))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 728), st.integers(0, 728), st.integers(0, 728))
def test_dprime_triangle_distinct(x, y, z):
    t = TRIANGLE_TORUS
    if len({x, y, z}) < 3:
        return
    dxy = float(lat.dprime(t, x, y))
    dxz = float(lat.dprime(t, x, z))
    dzy = float(lat.dprime(t, z, y))
    assert dxy <= dxz + dzy + 1e-12


TRIANGLE_TORUS = lat.build_torus(3, 1, 1)


def test_block_partition(unit9):
    for j in (1, 2):
        owner = lat.site_block(unit9, j)
        members = lat.block_members(unit9, j)
        flat = np.sort(members.ravel())
        assert np.array_equal(flat, np.arange(unit9.s))
        # members lie within (L^j - 1)/2 of the center, sup metric
        centers = lat.block_centers(unit9, j)
        step = unit9.L ** j
        for b in range(len(centers)):
            d = lat.dist(unit9, members[b], np.full(step ** 3, centers[b]))
            assert np.all(d < step / 2 * unit9.eta + 1e-12)
            assert np.all(owner[members[b]] == b)


def test_cube_nesting(unit9):
    # M-cubes at multiples of 3 nest inside LM-cubes at multiples of 9
    owner3 = lat.site_cube(unit9, 3)
    owner9 = lat.site_cube(unit9, 9)
    for c in range(27):
        inside = owner3 == c
        assert len(np.unique(owner9[inside])) == 1


def test_polymer_components(unit9):
    assert lat.enumerate_polymers(unit9, 3, []) == []
    # diagonal-touching cubes are not connected under the face rule
    nc = 9  # M=1 grid
    a = 0
    b = (1 * nc + 1) * nc + 1
    comps = lat.enumerate_polymers(unit9, 1, [a, b])
    assert len(comps) == 2
    # 2x2x1 slab is a single polymer of 4 cubes
    slab = [unit9.index((i, j, 0)) for i in (0, 1) for j in (0, 1)]
    comps = lat.enumerate_polymers(unit9, 1, slab)
    assert len(comps) == 1 and len(comps[0]) == 4


def test_d_M_examples(unit9):
    one = [unit9.index((0, 0, 0))]
    assert lat.d_M(unit9, 1, one) == 0.0
    two = [unit9.index((0, 0, 0)), unit9.index((1, 0, 0))]
    assert lat.d_M(unit9, 1, two) == pytest.approx(1.0)
    row4 = [unit9.index((i, 0, 0)) for i in range(4)]
    assert lat.d_M(unit9, 1, row4) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        lat.d_M(unit9, 1, [0, (1 * 9 + 1) * 9 + 1])


def test_d_M_scaled_centers(unit9):
    # same geometry on the M=3 grid: centers are M apart, tree length / M
    ids = [0, 1]  # cubes at (0,0,0) and (0,0,3) on the 3-grid
    assert lat.d_M(unit9, 3, ids) == pytest.approx(1.0)


def test_small_set_classify(unit9):
    row = [unit9.index((i, 0, 0)) for i in range(4)]
    assert lat.small_set_classify(unit9, 1, row[:1], 3) == "small"
    assert lat.small_set_classify(unit9, 1, row[:3], 3) == "small"
    assert lat.small_set_classify(unit9, 1, row, 3) == "large"


def test_d_M_bounds_and_monotonicity(unit9):
    rng = np.random.default_rng(11)
    logged = 0.0
    for _ in range(25):
        # grow a random connected polymer on the M=3 grid
        cubes = {int(rng.integers(27))}
        for _ in range(int(rng.integers(1, 5))):
            c = int(rng.choice(sorted(cubes)))
            nb = lat.cube_neighbors(unit9, 3, c)
            prev = lat.d_M(unit9, 3, cubes)
            cubes.add(int(rng.choice(nb)))
            assert lat.d_M(unit9, 3, cubes) >= prev - 1e-12
        dm = lat.d_M(unit9, 3, cubes)
        assert dm <= len(cubes) + 1e-12
        logged = max(logged, len(cubes) / (dm + 1.0))
    assert logged <= 8.0


def test_appendix_integral_bounds():
    # measured constants, alpha = 2 bound pinned at 30
    for (L, k, m) in [(3, 0, 2), (3, 1, 1), (3, 2, 0)]:
        t = lat.build_torus(L, k, m)
        c1 = lat.dprime_power_integral(t, 1.0)
        c2 = lat.dprime_power_integral(t, 2.0)
        c25 = lat.dprime_power_integral(t, 2.5)
        assert c2 <= 30.0
        assert c1 <= 30.0
        assert c25 <= 35.0
        print("integral constants %s: alpha1=%.3f alpha2=%.3f alpha2.5=%.3f"
              % (t.header(), c1, c2, c25))


def test_appendix_convolution_bound():
    rng = np.random.default_rng(7)
    for (L, k, m) in [(3, 0, 2), (3, 1, 1)]:
        t = lat.build_torus(L, k, m)
        worst = 0.0
        for _ in range(40):
            x, y = rng.integers(0, t.s, 2)
            if x == y:
                continue
            worst = max(worst, lat.dprime_convolution_ratio(t, int(x), int(y), 0.5))
        assert worst <= 70.0
        print("convolution constant %s (eps=0.5): %.3f" % (t.header(), worst))
