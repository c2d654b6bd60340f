import numpy as np
import pytest

from disentangled_influence.audit import (
    AuditPlan,
    AuditReport,
    DisentangledInfluenceAuditor,
    DisentangledModel,
    FeatureAudit,
    aggregate_influence,
    build_disentangled_model,
    direct_influence_audit,
    disentangled_influence_audit,
    feature_seed,
    sensitivity_decomposition,
)
from disentangled_influence.datasets import (
    XY_COLUMNS,
    XY_FAMILIES,
    gen_planted_proxy,
    gen_xy_synthetic,
    planted_proxy_model,
    xy_fixed_model,
)
from disentangled_influence.disentangler import DisentangleConfig, handcrafted_xy_rep
from disentangled_influence.influence import InfluenceValues, ShapConfig

TOL = 1e-9


@pytest.fixture(scope="module")
def xy():
    return gen_xy_synthetic(5000, 0)


@pytest.fixture(scope="module")
def handcrafted_report(xy):
    plan = AuditPlan(XY_COLUMNS, "handcrafted_xy")
    return disentangled_influence_audit(xy, xy_fixed_model(), plan, direct=True)


def test_wrapper_is_decode_then_model():
    rep = handcrafted_xy_rep("y")
    m = build_disentangled_model(rep, xy_fixed_model())
    assert m.input_dim == 3 and m.feature_of_interest == "y"
    Z = np.random.default_rng(0).uniform(size=(6, 3))
    np.testing.assert_array_equal(m(Z), Z[:, 1] + Z[:, 0])
    assert np.array_equal(m(Z), m(Z))


def test_wrapper_rejects_width_mismatch():
    rep = handcrafted_xy_rep("x")
    with pytest.raises(ValueError):
        DisentangledModel(rep, xy_fixed_model())(np.zeros((2, 4)))


def test_feature_seed_depends_on_name_only():
    assert feature_seed(0, "x") == feature_seed(0, "x")
    assert feature_seed(0, "x") != feature_seed(0, "2x")
    assert feature_seed(0, "x") != feature_seed(1, "x")


def test_plan_validation():
    with pytest.raises(ValueError):
        AuditPlan([])
    with pytest.raises(ValueError):
        AuditPlan(["x", "x"])
    with pytest.raises(ValueError):
        AuditPlan(["x"], dr_source="magic")


def test_unknown_feature_rejected(xy):
    with pytest.raises(KeyError):
        disentangled_influence_audit(xy, xy_fixed_model(), AuditPlan(["nope"], "handcrafted_xy"))


def test_handcrafted_families(handcrafted_report):
    r = handcrafted_report
    for c in XY_FAMILIES["c"]:
        assert np.max(np.abs(r.indirect(c))) <= TOL
    for fam in ("x", "y"):
        base = r.indirect(fam)
        assert np.max(np.abs(base)) > 0.1
        for col in XY_FAMILIES[fam]:
            np.testing.assert_allclose(r.indirect(col), base, atol=TOL, rtol=0)


def test_indirect_equals_base_feature_closed_form(xy, handcrafted_report):
    bg = xy.train.values[:50]
    inst = xy.test.values[:100]
    for fam in ("x", "y"):
        k = XY_COLUMNS.index(fam)
        closed = inst[:, k] - bg[:, k].mean()
        for col in XY_FAMILIES[fam]:
            np.testing.assert_allclose(handcrafted_report.indirect(col), closed, atol=TOL, rtol=0)


def test_indirect_matches_direct_for_bases_and_null_proxies(handcrafted_report):
    d = handcrafted_report.direct
    for col in ("x", "y", "c", "2c", "c^2"):
        np.testing.assert_allclose(handcrafted_report.indirect(col), d.column(col), atol=TOL, rtol=0)
    for col in ("2x", "x^2", "2y", "y^2", "c", "2c", "c^2"):
        assert np.all(d.column(col) == 0.0)


def test_report_meta(handcrafted_report):
    meta = handcrafted_report.meta
    assert meta["n_train"] == 4000 and meta["n_test"] == 1000 and meta["n_instances"] == 100
    assert set(meta["seeds"]) == set(XY_COLUMNS)


def test_errors_attached(handcrafted_report):
    fa = handcrafted_report.features["y^2"]
    assert np.all(fa.errors.reconstruction == 0.0)
    assert fa.errors.disentanglement == 1.0
    assert len(fa.feature_values) == 100


def test_sensitivity_decomposition():
    m = xy_fixed_model()
    row = np.array([0.3, 0.6, 0.09, 0.5, 1.0, 0.25, 0.7, 1.4, 0.49])
    expected = {"x": 1.0, "2x": 0.5, "x^2": 1 / (2 * 0.3), "c": 0.0, "2c": 0.0}
    for p, want in expected.items():
        s = sensitivity_decomposition(handcrafted_xy_rep(p), m, row)
        assert s["dy_dp_total"] == pytest.approx(want, abs=1e-6)
        assert not s["one_sided"]
    # direct derivative only sees the base column
    assert sensitivity_decomposition(handcrafted_xy_rep("x"), m, row)["dM_dp_direct"] == pytest.approx(1.0)
    assert sensitivity_decomposition(handcrafted_xy_rep("2x"), m, row)["dM_dp_direct"] == 0.0


def test_sensitivity_one_sided_at_boundary():
    row = np.array([0.3, 0.6, 0.0, 0.5, 1.0, 0.25, 0.7, 1.4, 0.49])
    row[2] = 0.0
    s = sensitivity_decomposition(handcrafted_xy_rep("x^2"), xy_fixed_model(), row)
    assert s["one_sided"]


def test_audit_independence_under_plan_changes():
    data = gen_xy_synthetic(600, 1)
    dr = DisentangleConfig.synthetic(train_steps=150)
    shap = ShapConfig(background_size=10)
    full = disentangled_influence_audit(data, xy_fixed_model(),
                                        AuditPlan(["x", "c", "2y"], dr=dr, shap=shap, n_instances=15))
    part = disentangled_influence_audit(data, xy_fixed_model(),
                                        AuditPlan(["2y", "x"], dr=dr, shap=shap, n_instances=15))
    for f in ("x", "2y"):
        assert np.array_equal(full.indirect(f), part.indirect(f))
        assert full.features[f].rep == part.features[f].rep


def test_jobs_do_not_change_results():
    data = gen_xy_synthetic(600, 2)
    plan = AuditPlan(["x", "c", "y"], dr=DisentangleConfig.synthetic(train_steps=100),
                     shap=ShapConfig(background_size=10), n_instances=10)
    a = disentangled_influence_audit(data, xy_fixed_model(), plan, jobs=1)
    b = disentangled_influence_audit(data, xy_fixed_model(), plan, jobs=3)
    assert list(a.features) == list(b.features)
    for f in plan.features:
        assert np.array_equal(a.indirect(f), b.indirect(f))


def test_divergence_marks_feature_failed():
    data = gen_xy_synthetic(300, 3)
    data.values[:, 0] *= 1e150
    data.values[:, 1] *= 1e150
    data.values[:, 2] *= 1e150
    plan = AuditPlan(["x", "y"], dr=DisentangleConfig.synthetic(train_steps=40, learning_rate=1.0),
                     shap=ShapConfig(background_size=5), n_instances=5)
    report = disentangled_influence_audit(data, xy_fixed_model(), plan)
    assert report.features["x"].failed and "divergence" in report.features["x"].failure
    rows = {r["feature"]: r for r in aggregate_influence(report)}
    assert rows["x"]["mean_abs"] is None and rows["x"]["status"].startswith("divergence")


def _report(phi):
    phi = np.asarray(phi, dtype=float).reshape(-1, 1)
    return AuditReport({"a": FeatureAudit("a", InfluenceValues(phi, 0.0, ["a"]))})


def test_aggregate_single_instance():
    (row,) = aggregate_influence(_report([-0.4]))
    assert row["mean_abs"] == 0.4 and row["max_abs"] == 0.4 and row["mean"] == -0.4


def test_aggregate_all_zero():
    (row,) = aggregate_influence(_report(np.zeros(7)))
    assert row["mean_abs"] == row["max_abs"] == row["mean"] == 0.0


def test_aggregate_order_invariant():
    phi = np.random.default_rng(0).normal(size=101) * 10.0 ** np.arange(-50, 51)
    a = aggregate_influence(_report(phi))
    b = aggregate_influence(_report(phi[::-1]))
    assert a == b


def test_direct_audit_ignored_column():
    data = gen_planted_proxy(500, seed=0)
    d = direct_influence_audit(data, planted_proxy_model(), ShapConfig(background_size=20), 30)
    assert np.all(d.column("A") == 0.0) and np.all(d.column("C") == 0.0)
    assert np.any(d.column("B") != 0.0)


def test_auditor_estimator():
    data = gen_xy_synthetic(400, 4)
    aud = DisentangledInfluenceAuditor(model=xy_fixed_model(), features=["x", "c"],
                                       feature_names=XY_COLUMNS, train_steps=50, background_size=10)
    phi = aud.fit(data.train.values).transform(data.test.values[:5])
    assert phi.shape == (5, 2)
    assert aud.get_params()["train_steps"] == 50
