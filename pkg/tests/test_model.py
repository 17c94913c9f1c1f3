import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchpop.errors import AssumptionError, ConfigError
from patchpop.model import (GrowthSpec, PatchModel, Tabulated, build_model, conservation_diagonal,
                            growth, load_config, mirror_quadratic, validate_assumptions)

from conftest import CONFIGS


def two_patch_config(nu):
    return {
        "model": {"K": 2, "L": 2.0, "epsilon": 0.001},
        "patch.1": {"growth": "quadratic", "a": -1, "b": -2, "c": 2, "d": 1},
        "patch.2": {"growth": "quadratic", "a": -1, "b": 2, "c": 2, "d": 1},
        "migration": {"matrix": [[None, nu], [nu, None]]},
    }


@pytest.mark.parametrize("name,nu", [("monomorphic", 2.5), ("dimorphic", 1.0)])
def test_reference_configs_match_mirror_family(name, nu):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        model = build_model(load_config(CONFIGS / f"{name}.yaml"))
    ref = mirror_quadratic(nu)
    xs = np.linspace(-2, 2, 41)
    assert model.K == 2 and model.L == 2.0 and model.epsilon == 1e-3
    np.testing.assert_array_equal(model.nu, ref.nu)
    for i in range(2):
        np.testing.assert_allclose(growth(model, i, xs, 1.3), growth(ref, i, xs, 1.3), atol=1e-15)


def test_single_patch_has_zero_migration():
    cfg = {"model": {"K": 1, "L": 2, "epsilon": 0.01},
           "patch.1": {"growth": "quadratic", "a": -1, "c": 3, "d": 1}}
    model = build_model(cfg)
    assert model.nu.shape == (1, 1) and model.nu[0, 0] == 0


def test_growth_examples():
    m2 = mirror_quadratic(1.0)
    assert growth(m2, 0, 0.866025, 2.25) == pytest.approx(-(2.25 + 1.866025 ** 2 - 3), abs=1e-12)
    # -2.732051 is the rounded value at the exact point sqrt(3)/2
    assert growth(m2, 0, np.sqrt(3) / 2, 2.25) == pytest.approx(-2.732051, abs=1e-6)
    assert growth(mirror_quadratic(2.5), 0, -1.0, 0.0) == 3.0
    g = GrowthSpec("quadratic", a=-1.0, b=0.0, c=0.0, d=1.0)
    m = PatchModel(L=1, epsilon=0.1, growth=(g,), psi=(1.0,), nu=np.zeros((1, 1)))
    assert growth(m, 0, 0.0, 0.0) == 0.0
    with pytest.raises(IndexError):
        growth(m, 1, 0.0, 0.0)


@pytest.mark.parametrize("a,d", [(-1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (-1.0, -1.0)])
def test_quadratic_kind_rejects_bad_signs(a, d):
    with pytest.raises(AssumptionError):
        GrowthSpec("quadratic", a=a, b=0.0, c=1.0, d=d)


@given(x=st.floats(-2, 2), I=st.floats(0, 10), J=st.floats(0, 10),
       d=st.floats(0.1, 5), b=st.floats(-3, 3))
def test_growth_is_linear_in_pressure(x, I, J, d, b):
    g = GrowthSpec("quadratic", a=-1.0, b=b, c=1.0, d=d)
    m = PatchModel(L=2, epsilon=0.01, growth=(g,), psi=(1.0,), nu=np.zeros((1, 1)))
    assert growth(m, 0, x, I) - growth(m, 0, x, J) == pytest.approx(-d * (I - J), abs=1e-12)


@settings(max_examples=50)
@given(st.integers(2, 5).flatmap(
    lambda K: st.lists(st.floats(0, 3), min_size=K * K, max_size=K * K).map(
        lambda v: np.array(v).reshape(K, K))))
def test_conservation_default_is_column_sum(raw):
    K = raw.shape[0]
    matrix = [[None if i == j else float(raw[i, j]) for j in range(K)] for i in range(K)]
    cfg = {"model": {"K": K, "L": 1, "epsilon": 0.01},
           "migration": {"matrix": matrix}}
    for i in range(1, K + 1):
        cfg[f"patch.{i}"] = {"a": -1, "c": 1, "d": 1}
    nu = build_model(cfg).nu
    off = nu * (1 - np.eye(K))
    np.testing.assert_allclose(np.diag(nu), off.sum(axis=0), atol=1e-14)
    np.testing.assert_allclose(conservation_diagonal(off), off.sum(axis=0), atol=1e-14)


def test_conservation_mismatch_and_override():
    cfg = two_patch_config(1.0)
    cfg["migration"]["matrix"] = [[3.0, 1.0], [1.0, 3.0]]
    with pytest.raises(AssumptionError):
        build_model(cfg)
    cfg["migration"]["conservation"] = False
    assert build_model(cfg).nu[0, 0] == 3.0


def test_flat_matrix_accepted():
    cfg = two_patch_config(1.0)
    cfg["migration"]["matrix"] = [None, 1.0, 1.0, None]
    np.testing.assert_array_equal(build_model(cfg).nu, [[1, 1], [1, 1]])


def test_config_errors_name_the_key(tmp_path):
    cfg = two_patch_config(1.0)
    del cfg["patch.2"]["a"]
    with pytest.raises(ConfigError, match=r"patch\.2\.a"):
        build_model(cfg)
    cfg = two_patch_config(1.0)
    cfg["model"]["epsilon"] = "small"
    with pytest.raises(ConfigError, match="model.epsilon"):
        build_model(cfg)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_unknown_keys_warn():
    cfg = two_patch_config(1.0)
    cfg["patch.1"]["colour"] = "red"
    cfg["extra"] = {}
    with pytest.warns(UserWarning) as rec:
        build_model(cfg)
    text = " ".join(str(w.message) for w in rec)
    assert "colour" in text and "extra" in text


def test_build_model_is_pure():
    a, b = build_model(two_patch_config(1.0)), build_model(two_patch_config(1.0))
    xs = np.linspace(-2, 2, 17)
    for i in range(2):
        np.testing.assert_array_equal(growth(a, i, xs, 0.7), growth(b, i, xs, 0.7))
    np.testing.assert_array_equal(a.nu, b.nu)


def test_validate_reference_dimorphic_model():
    # R(2, 0.5) = 3 - 9 - 0.5 < 0: the lower-bound sign condition cannot hold on [-2, 2]
    rep = validate_assumptions(mirror_quadratic(1.0), 0.5, 5.0)
    assert not rep["growth_positive_at_I_m"].passed
    assert rep["growth_positive_at_I_m"].witness["x"] in (-2.0, 2.0)
    for name in ("growth_negative_at_I_M", "pressure_monotone", "curvature_lower_bound",
                 "growth_bounded", "psi_bounds", "psi_neumann"):
        assert rep[name].passed, name
    assert rep["curvature_lower_bound"].witness["D"] == 2.0


def test_validate_flags_pressure_independent_growth():
    t = Tabulated(np.linspace(-2, 2, 5), np.ones(5))
    g = GrowthSpec("custom-tabulated", d=0.0, table=t)
    m = PatchModel(L=2, epsilon=1e-3, growth=(g,), psi=(1.0,), nu=np.zeros((1, 1)))
    assert not validate_assumptions(m, 0.5, 5.0)["pressure_monotone"].passed


def test_validate_constant_psi_bounds():
    w = validate_assumptions(mirror_quadratic(2.5), 0.5, 5.0)["psi_bounds"]
    assert w.passed and w.witness["a_m"] == w.witness["a_M"] == 1.0
