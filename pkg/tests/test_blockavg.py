import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rglab import blockavg as ba
from rglab import fields as fld
from rglab import lattice as lat
from rglab.greens import CoefficientSchedule


@pytest.fixture(scope="module")
def tu():
    # unit lattice, 729 sites
    return lat.build_torus(3, 0, 2)


@pytest.fixture(scope="module")
def t91():
    return lat.build_torus(3, 1, 1)


@pytest.fixture(scope="module")
def t920():
    return lat.build_torus(3, 2, 0)


def test_tau_trivials(tu):
    rng = np.random.default_rng(0)
    A = fld.random_gauge(tu, rng)
    y = int(lat.block_centers(tu, 1)[5])
    assert ba.tau(tu, A, y, y) == 0.0
    lam = rng.standard_normal(tu.s)
    g = fld.grad_site(tu, lam)
    for off in [(1, -1, 1), (0, 0, -1), (1, 1, 1)]:
        x = int(tu.index(tu.coords[y] + off))
        assert abs(ba.tau(tu, g, y, x) - (lam[x] - lam[y])) < 1e-13


def test_tau_axis_aligned(tu):
    rng = np.random.default_rng(1)
    A = fld.random_gauge(tu, rng)
    y = int(lat.block_centers(tu, 1)[11])
    for mu in range(3):
        e = np.eye(3, dtype=int)[mu]
        xp = int(tu.index(tu.coords[y] + e))
        xm = int(tu.index(tu.coords[y] - e))
        assert abs(ba.tau(tu, A, y, xp) - A[mu, y]) < 1e-14
        assert abs(ba.tau(tu, A, y, xm) + A[mu, xm]) < 1e-14


def test_tau_errors(tu):
    A = np.zeros((3, tu.s))
    y = int(lat.block_centers(tu, 1)[0])
    far = int(tu.index(tu.coords[y] + [2, 0, 0]))
    with pytest.raises(ValueError):
        ba.tau(tu, A, y, far)
    with pytest.raises(ValueError):
        ba.tau(tu, A, y + 1, y)  # not a center


def test_tau_table_matches_pairs(tu):
    rng = np.random.default_rng(2)
    A = fld.random_gauge(tu, rng)
    tab, C, offs = ba.tau_table(tu, A, 1)
    for ci in range(0, len(C), 5):
        y = int(tu.index(C[ci]))
        for oi in range(0, 27, 4):
            x = int(tu.index(C[ci] + offs[oi]))
            assert abs(ba.tau(tu, A, y, x) - tab[ci, oi]) < 1e-14


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_tau_gauge_shift(seed):
    # (tau(A - grad lam))(y,x) = (tau A)(y,x) - (lam(x) - lam(y)) on the
    # unit lattice
    t = lat.Torus(3, 0, 1)
    rng = np.random.default_rng(seed)
    A = fld.random_gauge(t, rng)
    lam = rng.standard_normal(t.s)
    tab, C, offs = ba.tau_table(t, A, 1)
    shifted = ba.tau_table(t, A - fld.grad_site(t, lam), 1)[0]
    lam_x = lam[t.index(C[:, None, :] + offs[None, :, :])]
    lam_y = lam[t.index(C)][:, None]
    assert np.abs(shifted - (tab - (lam_x - lam_y))).max() < 1e-12


def test_q_constant(tu):
    phi = np.tile([1.7, -0.4], (tu.s, 1))
    _, F = ba.Q_apply(tu, np.zeros((3, tu.s)), phi, 0.3)
    assert np.abs(F - [1.7, -0.4]).max() < 1e-14


def test_qqT_identity(tu):
    rng = np.random.default_rng(3)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        A = fld.random_gauge(tu, rng)
        F = fld.random_scalar(lat.Torus(3, -1, 2), rng)
        _, back = ba.Q_apply(tu, A, ba.Q_adjoint(tu, A, F, 0.3), 0.3)
        assert np.abs(back - F).max() < 1e-12


def test_qTq_projection(tu):
    rng = np.random.default_rng(4)
    A = fld.random_gauge(tu, rng)
    Qm = ba.q_matrix(tu, A, 0.3)
    P = tu.L ** 3 * Qm.T @ Qm
    assert np.abs(P - P.T).max() < 1e-12
    assert np.abs(P @ P - P).max() < 1e-12


def test_q_gauge_covariance(tu):
    # one-step version: phases pick up the restriction of lam to centers
    rng = np.random.default_rng(5)
    A = fld.random_gauge(tu, rng)
    phi = fld.random_scalar(tu, rng)
    lam = rng.standard_normal(tu.s)
    e0 = 0.3
    Al, phil = fld.gauge_transform(tu, A, phi, lam, e0)
    _, lhs = ba.Q_apply(tu, Al, phil, e0)
    _, rhs = ba.Q_apply(tu, A, phi, e0)
    rhs = fld.rot_apply(e0 * lam[lat.block_centers(tu, 1)], rhs)
    assert np.abs(lhs - rhs).max() < 1e-12


def test_q_symmetry_covariance(tu):
    rng = np.random.default_rng(6)
    A = fld.random_gauge(tu, rng)
    phi = fld.random_scalar(tu, rng)
    tc = lat.Torus(3, -1, 2)
    _, F = ba.Q_apply(tu, A, phi, 0.3)
    for r in fld.symmetry_group():
        Ar = fld.apply_symmetry_gauge(tu, r, A)
        phir = fld.apply_symmetry_scalar(tu, r, phi)
        _, Fr = ba.Q_apply(tu, Ar, phir, 0.3)
        assert np.abs(Fr - fld.apply_symmetry_scalar(tc, r, F)).max() < 1e-13


@pytest.mark.parametrize("km", [(1, 1), (2, 0), (2, 1)])
def test_qk_closed_vs_recursion(km):
    # the scaling recursion and the telescoped closed form are two
    # independent code paths; their agreement is the composition lemma
    k, m = km
    t = lat.Torus(3, k, m)
    rng = np.random.default_rng(10 + k + m)
    A = fld.random_gauge(t, rng)
    f = fld.random_scalar(t, rng)
    tc1, F1 = ba.qk_apply(t, A, f, 0.25)
    tc2, F2 = ba.qk_recursive(t, A, f, 0.25)
    assert tc1 == tc2 == lat.Torus(3, 0, m)
    assert np.abs(F1 - F2).max() < 1e-11


def test_qk_closed_vs_recursion_complex(t91):
    rng = np.random.default_rng(14)
    A = fld.random_gauge(t91, rng, scale=0.5, complexify=True)
    f = fld.random_scalar(t91, rng)
    _, F1 = ba.qk_apply(t91, A, f, 0.25)
    _, F2 = ba.qk_recursive(t91, A, f, 0.25)
    assert np.abs(F1 - F2).max() < 1e-11


def test_qk_errors(t91):
    A = np.zeros((3, t91.s))
    f = np.zeros((t91.s, 2))
    with pytest.raises(ValueError):
        ba.qk_apply(t91, A, f, 0.1, k=2)
    with pytest.raises(ValueError):
        ba.qk_apply(lat.Torus(3, 0, 1), np.zeros((3, 27)), np.zeros((27, 2)), 0.1)


@pytest.mark.parametrize("km", [(1, 1), (2, 0)])
def test_qk_qkT_identity(km):
    k, m = km
    t = lat.Torus(3, k, m)
    rng = np.random.default_rng(20 + k)
    A = fld.random_gauge(t, rng)
    F = fld.random_scalar(lat.Torus(3, 0, m), rng)
    _, back = ba.qk_apply(t, A, ba.qk_adjoint(t, A, F, 0.4), 0.4)
    assert np.abs(back - F).max() < 1e-12
    Qk = ba.qk_matrix(t, A, 0.4)
    QQt = Qk @ (t.L ** (3 * k) * Qk.T)
    assert np.abs(QQt - np.eye(len(QQt))).max() < 1e-12


@pytest.mark.parametrize("km", [(1, 1), (2, 0)])
def test_qk_gauge_covariance(km):
    k, m = km
    t = lat.Torus(3, k, m)
    rng = np.random.default_rng(30 + k)
    sched = CoefficientSchedule()
    ek = sched.e_k(k)
    A = fld.random_gauge(t, rng)
    phi = fld.random_scalar(t, rng)
    lam = rng.standard_normal(t.s)
    Al, phil = fld.gauge_transform(t, A, phi, lam, ek)
    _, lhs = ba.qk_apply(t, Al, phil, ek)
    _, rhs = ba.qk_apply(t, A, phi, ek)
    rhs = fld.rot_apply(ek * lam[lat.block_centers(t, k)], rhs)
    assert np.abs(lhs - rhs).max() < 1e-11


def test_qk_matrix_agrees(t920):
    rng = np.random.default_rng(8)
    A = fld.random_gauge(t920, rng)
    f = fld.random_scalar(t920, rng)
    _, F = ba.qk_apply(t920, A, f, 0.4)
    Qk = ba.qk_matrix(t920, A, 0.4)
    assert np.abs((Qk @ f.ravel()).reshape(-1, 2) - F).max() < 1e-13


def test_qk_matrix_plain(t91):
    M = ba.qk_matrix_plain(t91)
    lam = np.random.default_rng(9).standard_normal(t91.s)
    means = np.zeros(27)
    np.add.at(means, lat.site_block(t91, 1), lam)
    assert np.abs(M @ lam - means / 27).max() < 1e-13
    assert np.abs(M.sum(axis=1) - 1.0).max() < 1e-13


def test_qcal_constant(t91):
    A = np.zeros((3, t91.s))
    A[1] = 2.5
    tc, out = ba.qcal_closed(t91, A)
    assert tc == lat.Torus(3, 0, 1)
    assert np.abs(out[1] - 2.5).max() < 1e-14
    assert np.abs(out[0]).max() == 0.0
    assert np.abs(out[2]).max() == 0.0


@pytest.mark.parametrize("km", [(1, 1), (2, 1)])
def test_qcal_composition_vs_closed(km):
    k, m = km
    t = lat.Torus(3, k, m)
    rng = np.random.default_rng(40 + k)
    A = fld.random_gauge(t, rng)
    ta, comp = ba.qcal_k(t, A)
    tb, clos = ba.qcal_closed(t, A)
    assert ta == tb
    assert np.abs(comp - clos).max() < 1e-12


@pytest.mark.parametrize("km", [(1, 1), (2, 1)])
def test_qcal_gradient(km):
    # averaged gradient = gradient of the block means, so its curl vanishes
    k, m = km
    t = lat.Torus(3, k, m)
    rng = np.random.default_rng(50 + k)
    lam = rng.standard_normal(t.s)
    tc, qg = ba.qcal_closed(t, fld.grad_site(t, lam))
    means = np.zeros(tc.s)
    np.add.at(means, lat.site_block(t, k), lam)
    means /= float(t.L) ** (3 * k)
    assert np.abs(qg - fld.grad_site(tc, means)).max() < 1e-12
    assert np.abs(fld.exterior_d(tc, qg)).max() < 1e-12


def test_qcal_matrix(t91):
    rng = np.random.default_rng(12)
    A = fld.random_gauge(t91, rng)
    M = ba.qcal_matrix(t91)
    _, clos = ba.qcal_closed(t91, A)
    assert np.abs(M @ A.ravel() - clos.ravel()).max() < 1e-13


@pytest.mark.parametrize("km", [(1, 1), (2, 0), (2, 1)])
def test_stokes_identity(km):
    # coarse field strength as block means of the fine flux through the
    # spanned squares
    k, m = km
    t = lat.Torus(3, k, m)
    rng = np.random.default_rng(60 + k + m)
    A = fld.random_gauge(t, rng)
    lhs, rhs = ba.stokes_check(t, A)
    assert np.abs(lhs - rhs).max() < 1e-12


def test_tau_matrix(t91):
    rng = np.random.default_rng(13)
    A = fld.random_gauge(t91, rng)
    tab, _, _ = ba.tau_table(t91, A, 1)
    M = ba.tau_matrix(t91, 1)
    assert np.abs(M @ A.ravel() - tab.ravel()).max() < 1e-13


def test_axial_residual(t91):
    zeros = ba.axial_residual(t91, np.zeros((3, t91.s)))
    assert len(zeros) == 1
    assert all(np.abs(r).max() == 0.0 for r in zeros)
    rng = np.random.default_rng(15)
    A = fld.random_gauge(t91, rng)
    res = ba.axial_residual(t91, A)
    assert all(np.abs(r).max() > 1e-3 for r in res)
    t = lat.Torus(3, 2, 1)
    assert len(ba.axial_residual(t, np.zeros((3, t.s)))) == 2


def test_axial_residual_gradient():
    # tau of the j-fold averaged gradient telescopes to differences of
    # level-j block means, scaled by the level spacing
    t = lat.Torus(3, 2, 1)
    rng = np.random.default_rng(16)
    lam = rng.standard_normal(t.s)
    res = ba.axial_residual(t, fld.grad_site(t, lam))
    for j, tab in enumerate(res):
        tj = lat.Torus(3, t.k - j, t.m)
        means = np.zeros(tj.s)
        np.add.at(means, lat.site_block(t, j), lam)
        means /= float(t.L) ** (3 * j)
        tabm, C, offs = ba.tau_table(tj, fld.grad_site(tj, means), 1)
        assert np.abs(tab - tabm).max() < 1e-11
        lam_x = means[tj.index(C[:, None, :] + offs[None, :, :])]
        lam_y = means[tj.index(C)][:, None]
        assert np.abs(tab - (lam_x - lam_y) / tj.eta).max() < 1e-11


def test_divergence_theorem(t91):
    rng = np.random.default_rng(17)
    assert ba.divergence_theorem_check(t91, np.zeros((3, t91.s)),
                                       int(lat.block_centers(t91, 1)[0])) == (0, 0)
    const = np.ones((3, t91.s)) * 1.3
    f = fld.random_gauge(t91, rng)
    for y in lat.block_centers(t91, 1):
        lhs, rhs = ba.divergence_theorem_check(t91, const, int(y))
        assert abs(lhs) < 1e-13 and abs(rhs) < 1e-13
        lhs, rhs = ba.divergence_theorem_check(t91, f, int(y))
        assert abs(lhs - rhs) < 1e-13
    with pytest.raises(ValueError):
        ba.divergence_theorem_check(t91, f, int(lat.block_centers(t91, 1)[0]) + 1)


@pytest.mark.parametrize("km", [(1, 1), (2, 0)])
def test_louie_measured_bound(km):
    # block averages of covariant divergences stay O(1) even though the
    # divergence itself carries 1/eta
    k, m = km
    t = lat.Torus(3, k, m)
    sched = CoefficientSchedule()
    ek = sched.e_k(k)
    b = t.eta / (8 * ek)
    worst = {"div_ratio": 0.0, "lap_ratio": 0.0}
    for seed in range(8):
        rng = np.random.default_rng(100 + seed)
        A = rng.uniform(-b, b, (3, t.s)) + 1j * rng.uniform(-b / 2, b / 2, (3, t.s))
        f = np.stack([fld.random_scalar(t, rng) for _ in range(3)])
        phi = fld.random_scalar(t, rng)
        rep = ba.louie_report(t, A, f, phi, ek)
        for key in worst:
            worst[key] = max(worst[key], rep[key])
    print("k=%d louie ratios: div %.3f lap %.3f" %
          (k, worst["div_ratio"], worst["lap_ratio"]))
    assert worst["div_ratio"] < 4.0
    assert worst["lap_ratio"] < 6.0


@pytest.mark.parametrize("km", [(1, 1), (2, 0)])
def test_slippery_phases_in_strip(km):
    k, m = km
    t = lat.Torus(3, k, m)
    sched = CoefficientSchedule()
    ek = sched.e_k(k)
    bound = 0.5 * ek ** (-1 + sched.eps)
    margin = ba.slippery_margin(t, ek, bound, np.random.default_rng(5), samples=8)
    print("k=%d slippery margin %.3f" % (k, margin))
    assert margin <= 1.0


# ---------------------------------------------------------------------------
# top-step averaging between the unit sublattice and the one above

def test_q_top_apply_matches_matrix(t91):
    rng = np.random.default_rng(40)
    A = fld.random_gauge(t91, rng, scale=0.5)
    e1 = CoefficientSchedule().e_k(1)
    s0 = (t91.n // t91.L) ** 3
    Phi = rng.standard_normal((s0, 2))
    M = ba.q_top_matrix(t91, A, e1)
    got = ba.q_top_apply(t91, A, Phi, e1)
    assert np.abs(got.reshape(-1) - M @ Phi.reshape(-1)).max() < 1e-13


def test_q_top_adjoint_is_weighted_transpose(t91):
    rng = np.random.default_rng(41)
    A = fld.random_gauge(t91, rng, scale=0.5)
    e1 = CoefficientSchedule().e_k(1)
    s1 = (t91.n // t91.L ** 2) ** 3
    F = rng.standard_normal((s1, 2))
    M = ba.q_top_matrix(t91, A, e1)
    got = ba.q_top_adjoint(t91, A, F, e1)
    want = t91.L ** 3 * (M.T @ F.reshape(-1))
    assert np.abs(got.reshape(-1) - want).max() < 1e-13


def test_q_top_orthonormal(t91):
    rng = np.random.default_rng(42)
    A = fld.random_gauge(t91, rng, scale=0.5)
    e1 = CoefficientSchedule().e_k(1)
    M = ba.q_top_matrix(t91, A, e1)
    eye = t91.L ** 3 * (M @ M.T)
    assert np.abs(eye - np.eye(M.shape[0])).max() < 1e-13


def test_qk1_is_composition(t91):
    rng = np.random.default_rng(43)
    A = fld.random_gauge(t91, rng, scale=0.5)
    e1 = CoefficientSchedule().e_k(1)
    lhs = ba.qk1_matrix(t91, A, e1)
    rhs = ba.q_top_matrix(t91, A, e1) @ ba.qk_matrix(t91, A, e1, 1)
    assert np.abs(lhs - rhs).max() < 1e-14


def test_qk1_on_unit_lattice_is_top_step(tu):
    # k = 0: the k-fold part is the identity, only the top step remains
    rng = np.random.default_rng(44)
    A = fld.random_gauge(tu, rng, scale=0.5)
    e0 = CoefficientSchedule().e_k(0)
    assert np.abs(ba.qk1_matrix(tu, A, e0) - ba.q_top_matrix(tu, A, e0)).max() < 1e-14


def test_q_top_needs_upper_level():
    t = lat.build_torus(3, 0, 0)
    with pytest.raises(ValueError):
        ba.q_top_apply(t, np.zeros((3, t.s)), np.zeros((t.s, 2)), 0.1)
