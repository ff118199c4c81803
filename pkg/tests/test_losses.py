import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from sppscl import autograd as ag
from sppscl.autograd import Tensor
from sppscl.gradcheck import finite_difference_check
from sppscl.losses import (build_inter_mask, build_intra_mask, combined_loss, cosine_sim_matrix,
                           cross_entropy_loss, supcon_inter_loss, supcon_intra_loss)

TAU = 0.07

# B=2, shared label, I'=T' with orthogonal unit rows:
# each anchor row has one positive at cosine 0 and the diagonal at cosine 1.
INTER_ORTHO_B2 = 7.1428574552945205


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


def intra(z, y, tau=TAU):
    return float(supcon_intra_loss(f64(z), y, tau).data)


def inter(i, t, y, tau=TAU, **kw):
    return float(supcon_inter_loss(f64(i), f64(t), y, tau, **kw).data)


# ---------------------------------------------------------------- masks

def test_intra_mask_examples():
    np.testing.assert_array_equal(build_intra_mask([0, 0, 1]), [[0, 1, 0], [1, 0, 0], [0, 0, 0]])
    np.testing.assert_array_equal(build_intra_mask([0, 1, 2]), np.zeros((3, 3)))
    np.testing.assert_array_equal(build_intra_mask([4, 4, 4]), np.ones((3, 3)) - np.eye(3))


def test_inter_mask_examples():
    np.testing.assert_array_equal(build_inter_mask([1, 1]), [[0, 1], [1, 0]])
    np.testing.assert_array_equal(build_inter_mask([0, 1]), np.zeros((2, 2)))
    expected = np.zeros((4, 4))
    expected[:3, :3] = 1 - np.eye(3)
    np.testing.assert_array_equal(build_inter_mask([2, 2, 2, 0]), expected)
    np.testing.assert_array_equal(build_inter_mask([1, 1], include_diagonal=True), np.ones((2, 2)))


@given(st.lists(st.integers(0, 3), min_size=1, max_size=12))
def test_masks_symmetric_with_zero_diagonal(labels):
    for mask in (build_intra_mask(labels), build_inter_mask(labels)):
        np.testing.assert_array_equal(mask, mask.T)
        assert not np.diag(mask).any()


# ---------------------------------------------------------------- cosine

def test_cosine_examples():
    z = np.random.default_rng(0).normal(size=(4, 3))
    unit = z / np.linalg.norm(z, axis=1, keepdims=True)
    np.testing.assert_allclose(np.diag(cosine_sim_matrix(f64(unit), f64(unit)).data), 1.0)
    assert cosine_sim_matrix(f64([[1, 0]]), f64([[0, 2]])).data[0, 0] == 0.0
    scaled = z.copy()
    scaled[2] *= 5
    np.testing.assert_allclose(cosine_sim_matrix(f64(scaled), f64(z)).data,
                               cosine_sim_matrix(f64(z), f64(z)).data, atol=1e-12)


def test_cosine_zero_row_gives_zero_similarity():
    s = cosine_sim_matrix(f64([[0, 0], [1, 1]]), f64([[1, 0], [0, 1]])).data
    np.testing.assert_array_equal(s[0], 0.0)


# ---------------------------------------------------------------- intra/inter examples

def test_intra_identical_pair_is_zero():
    assert intra([[0.6, 0.8], [0.6, 0.8]], [1, 1]) == pytest.approx(0.0, abs=1e-12)


def test_distinct_labels_give_zero():
    z = np.random.default_rng(0).normal(size=(4, 3))
    assert intra(z, [0, 1, 2, 3]) == 0.0
    assert inter(z, z[::-1], [0, 1, 2, 3]) == 0.0


def test_intra_b4_matches_oracle():
    z = np.random.default_rng(1).normal(size=(4, 3))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    y = [0, 0, 1, 1]
    assert intra(z, y) == pytest.approx(oracles.supcon_intra(z.tolist(), y, TAU), abs=1e-6)


def test_inter_orthogonal_b2_pinned():
    z = np.eye(2)
    assert inter(z, z, [3, 3]) == pytest.approx(INTER_ORTHO_B2, abs=1e-9)
    assert INTER_ORTHO_B2 == pytest.approx(0.5 * math.log1p(math.exp(1 / TAU)), abs=1e-12)
    assert oracles.supcon_inter(z.tolist(), z.tolist(), [3, 3], TAU) == pytest.approx(INTER_ORTHO_B2)


def test_inter_b4_matches_oracle():
    r = np.random.default_rng(2)
    i, t = r.normal(size=(4, 5)), r.normal(size=(4, 5))
    y = [0, 1, 0, 1]
    assert inter(i, t, y) == pytest.approx(oracles.supcon_inter(i.tolist(), t.tolist(), y, TAU),
                                           abs=1e-6)


def _random_case(r):
    b = int(r.integers(2, 7))
    d = int(r.integers(1, 6))
    k = int(r.integers(1, b + 1))
    return b, r.normal(size=(b, d)), r.normal(size=(b, d)), r.integers(0, k, size=b).tolist()


def test_oracle_equivalence_100_cases():
    r = np.random.default_rng(123)
    for _ in range(100):
        _, i, t, y = _random_case(r)
        tau = float(r.uniform(0.05, 1.0))
        assert intra(i, y, tau) == pytest.approx(oracles.supcon_intra(i.tolist(), y, tau), abs=1e-6)
        assert inter(i, t, y, tau) == pytest.approx(
            oracles.supcon_inter(i.tolist(), t.tolist(), y, tau), abs=1e-6)


def test_single_positive_edge_case():
    r = np.random.default_rng(9)
    i, t = r.normal(size=(5, 3)), r.normal(size=(5, 3))
    y = [0, 1, 2, 3, 0]
    assert intra(i, y) == pytest.approx(oracles.supcon_intra(i.tolist(), y, TAU), abs=1e-6)
    assert inter(i, t, y) == pytest.approx(oracles.supcon_inter(i.tolist(), t.tolist(), y, TAU),
                                           abs=1e-6)


def test_symmetric_and_diagonal_variants():
    r = np.random.default_rng(4)
    i, t = r.normal(size=(4, 3)), r.normal(size=(4, 3))
    y = [0, 0, 1, 1]
    sym = inter(i, t, y, symmetric=True)
    assert sym == pytest.approx(0.5 * (inter(i, t, y) + inter(t, i, y)), abs=1e-12)
    with_diag = inter(i, t, y, include_diagonal=True)
    assert with_diag > inter(i, t, y)


def test_validation_errors():
    z = f64(np.ones((3, 2)))
    with pytest.raises(ValueError):
        supcon_intra_loss(z, [0, 0, 1], 0.0)
    with pytest.raises(ValueError):
        supcon_intra_loss(f64(np.ones((1, 2))), [0], TAU)
    with pytest.raises(ValueError):
        supcon_inter_loss(z, f64(np.ones((3, 3))), [0, 0, 1], TAU)


# ---------------------------------------------------------------- properties

def test_losses_nonnegative_and_finite_at_float32():
    r = np.random.default_rng(5)
    for _ in range(50):
        _, i, t, y = _random_case(r)
        i32, t32 = Tensor(i.astype(np.float32)), Tensor(t.astype(np.float32))
        for val in (supcon_intra_loss(i32, y).data, supcon_inter_loss(i32, t32, y).data):
            assert np.isfinite(val) and val >= -1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_positive_row_scaling_invariance(seed, scale):
    r = np.random.default_rng(seed)
    _, i, t, y = _random_case(r)
    row_scale = r.uniform(0.1, 10.0, size=(i.shape[0], 1)) * scale
    assert intra(i * row_scale, y) == pytest.approx(intra(i, y), abs=1e-6)
    assert inter(i * row_scale, t * scale, y) == pytest.approx(inter(i, t, y), abs=1e-6)


def test_label_relabeling_invariance():
    r = np.random.default_rng(6)
    i, t = r.normal(size=(6, 4)), r.normal(size=(6, 4))
    y = np.array([0, 1, 2, 0, 1, 2])
    relabeled = np.array([2, 0, 1])[y]
    assert intra(i, relabeled) == pytest.approx(intra(i, y), abs=1e-12)
    assert inter(i, t, relabeled) == pytest.approx(inter(i, t, y), abs=1e-12)


# ---------------------------------------------------------------- cross entropy

def test_cross_entropy_examples():
    assert float(cross_entropy_loss(f64(np.zeros((2, 3))), [0, 2]).data) == pytest.approx(math.log(3))
    small = float(cross_entropy_loss(f64([[1.0, 0.0]]), [0]).data)
    large = float(cross_entropy_loss(f64([[10.0, 0.0]]), [0]).data)
    assert large < small
    logits = np.random.default_rng(7).normal(size=(2, 4))
    assert float(cross_entropy_loss(f64(logits), [1, 3]).data) == pytest.approx(
        oracles.cross_entropy(logits.tolist(), [1, 3]), abs=1e-6)


def test_cross_entropy_is_stable_for_huge_logits():
    val = float(cross_entropy_loss(f64([[1e4, 0.0]]), [1]).data)
    assert val == pytest.approx(1e4)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        cross_entropy_loss(f64(np.zeros((2, 3))), [0, 3])


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("which", ["intra", "inter", "inter-sym", "ce"])
def test_loss_gradients(which):
    r = np.random.default_rng(8)
    y = [0, 0, 1, 1]
    if which == "intra":
        err = finite_difference_check(lambda z: supcon_intra_loss(z, y, TAU), r.normal(size=(4, 8)))
    elif which == "ce":
        err = finite_difference_check(lambda z: cross_entropy_loss(z, y), r.normal(size=(4, 3)))
    else:
        sym = which == "inter-sym"
        err = finite_difference_check(
            lambda i, t: supcon_inter_loss(i, t, y, TAU, symmetric=sym),
            [r.normal(size=(4, 8)), r.normal(size=(4, 8))])
    assert err < 1e-4


def test_combined_gradient():
    r = np.random.default_rng(10)
    y = [0, 1, 0, 1]

    def f(logits, i, t):
        return combined_loss(cross_entropy_loss(logits, y), supcon_intra_loss(i, y),
                             supcon_intra_loss(t, y), supcon_inter_loss(i, t, y), 5.0).graph

    assert finite_difference_check(f, [r.normal(size=(4, 3)), r.normal(size=(4, 6)),
                                       r.normal(size=(4, 6))]) < 1e-4


# ---------------------------------------------------------------- combined

def const(v):
    return f64(np.array(v))


def test_combined_lambda_examples():
    zero = const(0.0)
    assert combined_loss(const(1.0), zero, zero, zero, 5.0).total == 5.0
    assert combined_loss(const(1.0), zero, zero, zero, 10.0).total == 10.0
    bundle = combined_loss(const(2.0), const(0.25), const(0.5), const(1.0), 0.0)
    assert bundle.total == pytest.approx(1.75)


def test_combined_phases():
    parts = [const(1.0), const(0.25), const(0.5), const(2.0)]
    assert combined_loss(*parts, lam=5.0, mode="phase1").total == pytest.approx(5.75)
    p2 = combined_loss(*parts, lam=5.0, mode="phase2")
    assert p2.total == pytest.approx(2.0)
    assert p2.ce == 1.0 and p2.cl_m == 2.0
    assert combined_loss(None, None, None, None, 1.0).total == 0.0
    with pytest.raises(ValueError):
        combined_loss(*parts, lam=-1.0)
    with pytest.raises(ValueError):
        combined_loss(*parts, lam=1.0, mode="three-step")


def test_combined_one_step_equals_component_sum():
    r = np.random.default_rng(11)
    y = [0, 1, 1, 0, 2]
    logits, i, t = r.normal(size=(5, 3)), r.normal(size=(5, 4)), r.normal(size=(5, 4))
    ce = cross_entropy_loss(f64(logits), y)
    ci, ct = supcon_intra_loss(f64(i), y), supcon_intra_loss(f64(t), y)
    cm = supcon_inter_loss(f64(i), f64(t), y)
    bundle = combined_loss(ce, ci, ct, cm, 5.0)
    expected = (5 * oracles.cross_entropy(logits.tolist(), y)
                + oracles.supcon_intra(i.tolist(), y, TAU) + oracles.supcon_intra(t.tolist(), y, TAU)
                + oracles.supcon_inter(i.tolist(), t.tolist(), y, TAU))
    assert bundle.total == pytest.approx(expected, abs=1e-6)
    assert set(bundle.as_dict()) == {"ce", "cl_i", "cl_t", "cl_m", "total"}
    ag_total = float(bundle.graph.data)
    assert ag_total == bundle.total
