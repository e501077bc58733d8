import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpbilevel import (Dataset, DimensionError, PrivacyBudget, ProblemConstants, RunConfig,
                       full_batch_gradient, minibatch_gradient)
from dpbilevel.core import full_batch_value, load_manifest
from dpbilevel.oracles import central_difference, relative_error
from dpbilevel.problems import make_mean_leak, make_quadratic


@pytest.fixture
def quad5():
    A = np.array([[0.3, -0.2], [0.1, 0.4], [0.0, 0.5]])
    return make_quadratic(A, n=5, seed=3)


def test_dataset_is_read_only_and_replace_returns_neighbor():
    ds = Dataset([[1.0, 2.0], [3.0, 4.0]])
    with pytest.raises(ValueError):
        ds.points[0, 0] = 9.0
    nb = ds.replace(1, [0.0, 0.0])
    assert nb.n == 2 and np.array_equal(nb.points[1], [0.0, 0.0])
    assert np.array_equal(ds.points[1], [3.0, 4.0])


def test_dataset_rejects_empty():
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 2)))


def test_dataset_csv_roundtrip_with_and_without_header(tmp_path):
    ds = Dataset(np.random.default_rng(0).standard_normal((4, 3)))
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    ds.to_csv(p1)
    ds.to_csv(p2, header=["u", "v", "w"])
    assert np.array_equal(Dataset.from_csv(p1).points, ds.points)
    assert np.array_equal(Dataset.from_csv(p2).points, ds.points)


def test_constants_derive_ell_and_kappa():
    c = ProblemConstants(L0f=2.0, L1f=1.0, L0g=3.0, L1g=0.5, L2g=0.1, mu_g=0.5, Delta_F=1.0)
    assert c.ell == 3.0 and c.kappa == 6.0
    assert ProblemConstants.from_dict(c.to_dict()) == c


def test_constants_reject_nonpositive_mu():
    with pytest.raises(ValueError):
        ProblemConstants(1, 1, 1, 1, 0, 0.0, 1)


@pytest.mark.parametrize("eps,delta", [(0.0, 0.1), (-1.0, 0.1), (1.0, 0.0), (1.0, 1.0)])
def test_budget_rejects_out_of_range(eps, delta):
    with pytest.raises(ValueError):
        PrivacyBudget(eps, delta)


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(gamma=1.0)
    with pytest.raises(ValueError):
        RunConfig(b_in=0)
    with pytest.raises(ValueError):
        RunConfig(b_out=10).check_batches(5)


def test_mean_leak_xg_gradient_is_zero():
    ds = Dataset([[1.0, 0.0], [3.0, 0.0]])
    p = make_mean_leak(ds)
    g = full_batch_gradient(p, "xg", np.array([0.3, -1.0]), np.array([2.0, 5.0]), ds)
    assert np.array_equal(g, np.zeros(2))


def test_single_record_full_batch_equals_per_sample(quad5):
    p, ds = quad5
    one = Dataset(ds.points[:1])
    x, y = np.array([0.2, 0.1]), np.array([0.5, -0.3, 0.1])
    for which in ("xf", "yf", "xg", "yg"):
        assert np.array_equal(full_batch_gradient(p, which, x, y, one),
                              p.per_sample_gradients(which, x, y, ds.points[:1])[0])


def test_full_batch_gradient_matches_finite_differences(quad5):
    p, ds = quad5
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal(2) * 0.5, rng.standard_normal(3)
    gx = central_difference(lambda z: full_batch_value(p, "g", z, y, ds), x)
    gy = central_difference(lambda z: full_batch_value(p, "f", x, z, ds), y)
    assert relative_error(full_batch_gradient(p, "xg", x, y, ds), gx) <= 1e-6
    assert relative_error(full_batch_gradient(p, "yf", x, y, ds), gy) <= 1e-6


def test_minibatch_all_indices_equals_full_batch(quad5):
    p, ds = quad5
    x, y = np.array([0.2, 0.1]), np.array([0.5, -0.3, 0.1])
    full = full_batch_gradient(p, "yg", x, y, ds)
    assert np.allclose(minibatch_gradient(p, "yg", x, y, ds, np.arange(ds.n)), full, rtol=0, atol=1e-15)


def test_minibatch_single_and_repeated_indices(quad5):
    p, ds = quad5
    x, y = np.array([0.2, 0.1]), np.array([0.5, -0.3, 0.1])
    rows = p.per_sample_gradients("xg", x, y, ds.points)
    assert np.array_equal(minibatch_gradient(p, "xg", x, y, ds, [2]), rows[2])
    two = Dataset(ds.points[:2])
    expected = (2 * rows[0] + rows[1]) / 3
    assert np.allclose(minibatch_gradient(p, "xg", x, y, two, [0, 0, 1]), expected, rtol=1e-15, atol=1e-15)


def test_minibatch_rejects_empty_batch(quad5):
    p, ds = quad5
    with pytest.raises(ValueError):
        minibatch_gradient(p, "xf", np.zeros(2), np.zeros(3), ds, [])


def test_dimension_mismatch_names_oracle(quad5):
    p, ds = quad5
    with pytest.raises(DimensionError, match="grad_yg"):
        full_batch_gradient(p, "yg", np.zeros(2), np.zeros(4), ds)


def test_full_batch_gradient_bit_reproducible(quad5):
    p, ds = quad5
    x, y = np.array([0.2, 0.1]), np.array([0.5, -0.3, 0.1])
    a = full_batch_gradient(p, "xg", x, y, ds)
    b = full_batch_gradient(p, "xg", x, y, Dataset(ds.points.copy()))
    assert a.tobytes() == b.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(5)))
def test_full_batch_gradient_permutation_invariant(perm):
    A = np.array([[0.3, -0.2], [0.1, 0.4], [0.0, 0.5]])
    p, ds = make_quadratic(A, n=5, seed=3)
    x, y = np.array([0.2, 0.1]), np.array([0.5, -0.3, 0.1])
    shuffled = Dataset(ds.points[list(perm)])
    assert np.allclose(full_batch_gradient(p, "yg", x, y, ds), full_batch_gradient(p, "yg", x, y, shuffled),
                       rtol=0, atol=1e-14)


def test_inner_radius_invariant_enforced():
    A = np.eye(2)
    p, _ = make_quadratic(A, n=4)
    import dataclasses
    bad = dataclasses.replace(p.constants, L0g=p.inner_domain_radius * p.constants.mu_g / 2)
    with pytest.raises(ValueError, match="inner_domain_radius"):
        dataclasses.replace(p, constants=bad)


def test_manifest_requires_family(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"params": {}}))
    with pytest.raises(ValueError, match="family"):
        load_manifest(path)
    path.write_text(json.dumps({"family": "quadratic"}))
    assert load_manifest(path)["params"] == {}
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "missing.json")
