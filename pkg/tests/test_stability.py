import numpy as np
import pytest

from ebm_sysid import diffengine as de
from ebm_sysid import dynamics as dyn
from ebm_sysid import energy_core as ec
from ebm_sysid import stability as stab


def random_symmetric(rng, n, scale=0.6, dense=True):
    A = rng.uniform(0.1 if dense else -scale, scale, size=(n, n)) * rng.choice([-1.0, 1.0], size=(n, n))
    W = (A + A.T) / 2.0
    if dense:
        W[W == 0.0] = 0.05
        W = (W + W.T) / 2.0
    return W


def two_layer(n2=8, w_scale=0.6, beta=1.0, seed=0):
    rng = np.random.default_rng(seed)
    layers = [ec.LayerSpec(2, ec.quadratic()), ec.LayerSpec(n2, ec.log_sum_exp(beta))]
    w = rng.uniform(-w_scale, w_scale, size=(2, n2))
    b = [np.zeros(2), rng.uniform(-0.3, 0.3, size=n2)]
    return ec.HybridEBM(layers, [w], b)


# ----------------------------------------------------------------------- mesh

def test_mesh_points_count_and_bounds():
    mesh = stab.Mesh(((-2.0, 2.0), (-1.0, 1.0)), resolution=5)
    pts = mesh.points()
    assert pts.shape == (25, 2)
    assert pts[:, 0].min() == -2.0 and pts[:, 0].max() == 2.0
    assert mesh.n_points == 25


def test_mesh_validation():
    with pytest.raises(stab.CertificationError):
        stab.Mesh(((-1.0, -2.0),), resolution=4)
    with pytest.raises(stab.CertificationError):
        stab.Mesh(((-1.0, 1.0),), resolution=1)


# ---------------------------------------------------------------- dissipation

def test_dissipation_quadratic_leak():
    def builder(X):
        return de.sum(de.mul(X, X), axis=1) * 0.5

    samples = np.array([[1.0, 1.0], [2.0, -3.0]])
    rep = stab.dissipation_check(builder, lambda X: -X, samples)
    assert rep.passed
    assert np.isclose(rep.max_lie, -2.0)  # at (1,1): -(x.x) = -2


def test_dissipation_recurrent_nonsmooth_powernorm():
    rng = np.random.default_rng(1)
    W = random_symmetric(rng, 5)
    b = np.zeros(5)
    p = ec.power_norm(1.5)
    samples = rng.uniform(-3, 3, size=(10_000, 5))
    rep = stab.dissipation_check(stab_builder(W, b, p), field_of(W, b, p), samples)
    assert rep.passed
    assert rep.n_violations == 0


def stab_builder(W, b, p):
    return dyn.recurrent_energy_rows_graph(W, b, p)


def field_of(W, b, p):
    return lambda X: dyn.recurrent_field(W, b, p, X)


def test_dissipation_flags_kink_samples():
    rng = np.random.default_rng(2)
    W = random_symmetric(rng, 3)
    p = ec.power_norm(1.5)
    samples = rng.uniform(-1, 1, size=(50, 3))
    samples[7, 1] = 0.0
    rep = stab.dissipation_check(stab_builder(W, np.zeros(3), p), field_of(W, np.zeros(3), p),
                                 samples)
    assert rep.n_flagged == 1
    assert rep.passed


def test_dissipation_all_primitives_random_models():
    rng = np.random.default_rng(3)
    prims = [ec.quadratic(), ec.log_sum_exp(1.0), ec.power_norm(1.5), ec.log_cosh()]
    for p in prims:
        for _ in range(3):
            W = random_symmetric(rng, 4)
            b = rng.uniform(-0.5, 0.5, size=4)
            samples = rng.uniform(-3, 3, size=(2000, 4))
            rep = stab.dissipation_check(stab_builder(W, b, p), field_of(W, b, p), samples)
            assert rep.passed, f"{p.kind}: max lie {rep.max_lie}"


# --------------------------------------------------------------- monotonicity

def test_monotonicity_constant_trajectory():
    traj = dyn.integrate_euler(lambda x: np.zeros_like(x), np.array([1.0, 1.0]),
                               dt=0.01, steps=20)
    rep = stab.trajectory_monotonicity(lambda X: np.sum(X * X, axis=1), traj)
    assert rep.passed


def test_monotonicity_leak_descends():
    traj = dyn.integrate_euler(lambda x: -x, np.array([3.0, 4.0]), dt=0.01, steps=500)
    rep = stab.trajectory_monotonicity(lambda X: 0.5 * np.sum(X * X, axis=1), traj)
    assert rep.passed
    E = 0.5 * np.sum(traj.states ** 2, axis=1)
    assert np.all(np.diff(E) < 0)


# ------------------------------------------------------------------- growth

@pytest.mark.parametrize("q,expect_ru", [(1.2, True), (1.5, True), (1.8, True),
                                         (2.5, False), (3.0, False)])
def test_growth_classifier_verdicts(q, expect_ru):
    rng = np.random.default_rng(int(q * 10))
    W = random_symmetric(rng, 5)
    # ensure a positive top eigenvalue
    W += 0.5 * np.eye(5)
    model = stab.RecurrentEBM(W, np.zeros(5), ec.power_norm(q))
    verdict = stab.growth_classify(model, seed=7)
    assert verdict.radially_unbounded is expect_ru
    assert abs(verdict.empirical_slopes["ham"] - q) < 0.1
    assert abs(verdict.empirical_slopes["quad"] - 2 * (q - 1)) < 0.1
    if expect_ru:
        assert verdict.min_energy_at_max_radius > 1e3
    else:
        assert verdict.witness_energy_at_max_radius < -1e3


def test_growth_classifier_quadratic_boundary_case():
    rng = np.random.default_rng(4)
    W = random_symmetric(rng, 4) + 0.5 * np.eye(4)
    verdict = stab.growth_classify(stab.RecurrentEBM(W, np.zeros(4), ec.quadratic()))
    assert verdict.radially_unbounded is False  # strict inequality at q = 2


def test_growth_classifier_notes_for_zero_entries():
    W = np.zeros((3, 3))
    W[0, 1] = W[1, 0] = 1.0
    verdict = stab.growth_classify(stab.RecurrentEBM(W, np.zeros(3), ec.power_norm(1.5)))
    assert any("zero entries" in n for n in verdict.notes)


def test_growth_classifier_hybrid_carries_note():
    m = two_layer(seed=5)
    verdict = stab.growth_classify(m)
    assert any("zero blocks" in n for n in verdict.notes)
    assert verdict.q == 2.0


# ----------------------------------------------------------- gamma and radius

def test_gamma_zero_coupling():
    layers = [ec.LayerSpec(2, ec.quadratic()), ec.LayerSpec(4, ec.log_sum_exp(1.0))]
    m = ec.HybridEBM(layers, [np.zeros((2, 4))])
    mesh = stab.Mesh(((-2, 2), (-2, 2)), resolution=9)
    gamma = stab.gamma_bounds(m, mesh)
    np.testing.assert_array_equal(gamma, [0.0])
    assert stab.expansion_radius(m, mesh) == 0.0


def test_gamma_identity_coupling_brute_force():
    layers = [ec.LayerSpec(2, ec.quadratic()), ec.LayerSpec(2, ec.log_sum_exp(1.0))]
    m = ec.HybridEBM(layers, [np.eye(2)])
    mesh = stab.Mesh(((-2, 2), (-2, 2)), resolution=41)
    gamma = stab.gamma_bounds(m, mesh)
    # brute force over the mesh image of the softmax
    pts = mesh.points()
    P = m.layers[1].primitive.activation(ec.hidden_forward(m, pts)[1])
    expect = np.linalg.norm(P @ np.eye(2).T, axis=1).max()
    assert np.isclose(gamma[0], expect, rtol=0, atol=0)
    assert 1 / np.sqrt(2) <= gamma[0] <= 1.0


def test_gamma_deterministic_bit_identical():
    m = two_layer(n2=16, seed=6)
    mesh = stab.Mesh(((-2, 2), (-2, 2)), resolution=37)
    g1 = stab.gamma_bounds(m, mesh)
    g2 = stab.gamma_bounds(m, mesh)
    np.testing.assert_array_equal(g1, g2)


def test_gamma_monotone_under_mesh_refinement():
    m = two_layer(n2=12, seed=8)
    coarse = stab.gamma_bounds(m, stab.Mesh(((-2, 2), (-2, 2)), resolution=21))
    fine = stab.gamma_bounds(m, stab.Mesh(((-2, 2), (-2, 2)), resolution=81))
    assert np.all(coarse <= fine * 1.05)


def test_first_layer_simplex_exact_dominates_mesh():
    m = two_layer(n2=10, seed=9)
    mesh = stab.Mesh(((-2, 2), (-2, 2)), resolution=31)
    exact = stab.first_layer_gamma_simplex_exact(m)
    assert exact >= stab.gamma_bounds(m, mesh)[0] - 1e-12


# -------------------------------------------------------------- metric bounds

def test_metric_bounds_identity():
    q_min, q_max = stab.metric_bounds(dyn.IdentityMetric(2), stab.Mesh(((-1, 1), (-1, 1)), 5))
    assert (q_min, q_max) == (1.0, 1.0)
    assert stab.ph_radius(3.0, q_min, q_max) == 3.0


def test_metric_bounds_sincos():
    mesh = stab.Mesh(((-2, 2), (-2, 2)), resolution=200)
    q_min, q_max = stab.metric_bounds(dyn.SinCosMetric(), mesh)
    assert 0.0 < q_min <= q_max < 3.0
    assert np.isfinite(q_min) and np.isfinite(q_max)


def test_ph_radius_arithmetic():
    assert stab.ph_radius(1.0, 0.5, 5.0) == 10.0
    with pytest.raises(stab.MetricPositivityError):
        stab.ph_radius(1.0, 0.0, 1.0)


# ---------------------------------------------------------------- invariance

def test_invariance_leak_field_passes():
    stats = stab.invariance_verify(lambda X: -X, R=2.0, n=5000, seed=0, dim=3)
    assert stats.passed
    assert np.isclose(stats.max_inner_product, -4.0, atol=1e-9)


def test_invariance_outward_field_fails():
    stats = stab.invariance_verify(lambda X: X, R=1.5, n=2000, seed=1, dim=2)
    assert stats.inward_fraction == 0.0
    assert not stats.passed


def test_invariance_zero_radius_trivial():
    stats = stab.invariance_verify(lambda X: np.zeros_like(X), R=0.0, n=10, seed=2, dim=2)
    assert stats.passed


def test_invariance_deterministic_given_seed():
    s1 = stab.invariance_verify(lambda X: -X + 0.1, R=1.0, n=1000, seed=3, dim=2)
    s2 = stab.invariance_verify(lambda X: -X + 0.1, R=1.0, n=1000, seed=3, dim=2)
    assert s1.max_inner_product == s2.max_inner_product
    assert s1.inward_fraction == s2.inward_fraction


# ---------------------------------------------------------------- certificate

def test_certify_two_layer_model_and_report_roundtrip(tmp_path):
    m = two_layer(n2=8, w_scale=0.4, seed=10)
    metric = dyn.SinCosMetric()
    mesh = stab.Mesh(((-2, 2), (-2, 2)), resolution=61)
    report = stab.certify(m, metric, mesh, n_boundary=20_000, seed=4,
                          model_hash="abc", tool_version="0.1.0")
    assert report.r_ex == sum(report.gamma)
    assert report.rho_ex == (report.q_max / report.q_min) * report.r_ex
    assert report.boundary_stats.passed
    doc = report.to_json()
    back = stab.CertificationReport.from_json(doc)
    assert back.r_ex == report.r_ex
    assert back.rho_ex == report.rho_ex
    assert back.boundary_stats.max_inner_product == report.boundary_stats.max_inner_product


def test_certify_zero_weights_trivially_invariant():
    layers = [ec.LayerSpec(2, ec.quadratic()), ec.LayerSpec(4, ec.log_sum_exp(1.0))]
    m = ec.HybridEBM(layers, [np.zeros((2, 4))])
    mesh = stab.Mesh(((-2, 2), (-2, 2)), resolution=11)
    report = stab.certify(m, dyn.IdentityMetric(2), mesh, n_boundary=100, seed=0)
    assert report.r_ex == 0.0
    assert report.rho_ex == 0.0
    assert report.boundary_stats.passed


def test_certificate_invariant_violation_rejected():
    mesh = stab.Mesh(((-1, 1),), resolution=3)
    stats = stab.BoundaryStats(1.0, 10, 1.0, -0.5, 0)
    with pytest.raises(stab.CertificationError, match="r_ex"):
        stab.CertificationReport(gamma=[1.0, 2.0], r_ex=4.0, q_min=1.0, q_max=1.0,
                                 rho_ex=4.0, boundary_stats=stats, mesh=mesh,
                                 model_hash="", tool_version="")
