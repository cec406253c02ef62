"""Engine-level checks: trivial identities, tape semantics, finite differences."""

import numpy as np
import pytest

import proto_align.autodiff as ad
from proto_align.autodiff import (
    Tape,
    Tensor,
    ShapeMismatch,
    apply_primitive,
    backward,
    grad_check,
    stop_gradient,
)


def test_sigmoid_at_zero():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_softmax_of_equal_logits_is_uniform():
    out = ad.softmax(Tensor([0.0, 0.0])).data
    np.testing.assert_array_equal(out, [0.5, 0.5])


def test_cosine_of_vector_with_itself():
    v = Tensor([1.0, -2.0, 3.0])
    assert ad.cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-12)


def test_sigmoid_gradient_at_zero():
    x = Tensor(0.0, requires_grad=True)
    with Tape():
        backward(ad.sigmoid(x))
    assert x.grad == pytest.approx(0.25, abs=1e-15)


def test_sum_gradient_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape():
        backward(ad.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = ad.scale(x, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            backward(y)


def test_backward_accumulates_across_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = ad.tensor_sum(ad.mul(x, x))
        backward(y)
        first = x.grad.copy()
        backward(y)
    np.testing.assert_array_equal(x.grad, 2.0 * first)


def test_shape_mismatch_diagnostic_names_primitive_and_shapes():
    with pytest.raises(ShapeMismatch) as err:
        ad.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 6))))
    msg = str(err.value)
    assert "matmul" in msg and "(3, 4)" in msg and "(5, 6)" in msg


def test_apply_primitive_dispatch():
    out = apply_primitive("add", Tensor([1.0]), Tensor([2.0]))
    assert out.data[0] == 3.0
    with pytest.raises(KeyError):
        apply_primitive("no_such_op", Tensor([1.0]))


def test_forward_is_deterministic():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 5))
    a = ad.softmax(ad.matmul(Tensor(x), Tensor(x.T))).data
    b = ad.softmax(ad.matmul(Tensor(x), Tensor(x.T))).data
    np.testing.assert_array_equal(a, b)


class TestStopGradient:
    def test_forward_is_bitwise_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        np.testing.assert_array_equal(stop_gradient(x).data, x.data)

    def test_cut_path_and_live_path(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=5), requires_grad=True)
        y = Tensor(rng.normal(size=5), requires_grad=True)
        with Tape():
            backward(ad.tensor_sum(ad.mul(stop_gradient(x), y)))
        assert x.grad is None or not x.grad.any()
        # hand differentiation of the bilinear form: d/dy sum(x*y) = x
        np.testing.assert_allclose(y.grad, x.data, atol=1e-15)


class TestStraightThrough:
    def test_forward_emits_hard_exactly(self):
        soft = Tensor([0.2, 0.8], requires_grad=True)
        hard = np.array([0.0, 1.0])
        out = ad.substitute_forward(soft, hard)
        np.testing.assert_array_equal(out.data, hard)

    def test_backward_flows_to_soft(self):
        soft = Tensor([0.2, 0.8], requires_grad=True)
        with Tape():
            backward(ad.tensor_sum(ad.mul(ad.substitute_forward(soft, [0.0, 1.0]),
                                          Tensor([3.0, 5.0]))))
        np.testing.assert_array_equal(soft.grad, [3.0, 5.0])


def _paired_nce(sim, tau):
    """Symmetric InfoNCE over a B x B similarity matrix of tensors."""
    logits = ad.scale(sim, 1.0 / tau)
    b = logits.shape[0]
    diag_idx = np.arange(b)
    rows = ad.log_softmax(logits, axis=-1)
    cols = ad.log_softmax(ad.transpose(logits), axis=-1)
    picked = ad.gather_rows(ad.reshape(rows, (b * b,)), diag_idx * b + diag_idx)
    picked_t = ad.gather_rows(ad.reshape(cols, (b * b,)), diag_idx * b + diag_idx)
    return ad.scale(ad.add(ad.tensor_mean(picked), ad.tensor_mean(picked_t)), -1.0)


def test_global_alignment_gradient_matches_central_differences():
    # independent oracle: central differences at step 1e-5
    rng = np.random.default_rng(42)
    other = Tensor(rng.normal(size=(4, 6)))

    def loss(img_global):
        sim = ad.matmul(ad.l2_normalize(img_global), ad.transpose(ad.l2_normalize(other)))
        return _paired_nce(sim, tau=0.5)

    report = grad_check(loss, rng.normal(size=(4, 6)), step=1e-5, tol=1e-6)
    assert report.passed, report.failures[:3]


class TestGradCheck:
    def test_normalize_then_sum(self):
        rng = np.random.default_rng(3)
        f = lambda t: ad.tensor_sum(ad.l2_normalize(t))
        report = grad_check(f, rng.normal(size=8), step=1e-5, tol=1e-6)
        assert report.passed

    def test_constant_function(self):
        f = lambda t: ad.tensor_sum(ad.mul(t, Tensor(np.zeros(4))))
        report = grad_check(f, np.ones(4), step=1e-5, tol=1e-6)
        assert report.passed and report.max_rel_error == 0.0

    def test_within_report_contrastive_toy(self):
        # three-sentence report, denominator over the same report only
        rng = np.random.default_rng(9)
        sent = Tensor(rng.normal(size=(3, 4)))

        def loss(cross):
            sim = ad.matmul(ad.l2_normalize(sent), ad.transpose(ad.l2_normalize(cross)))
            picked = ad.gather_rows(ad.reshape(ad.log_softmax(ad.scale(sim, 2.0)), (9,)),
                                    np.array([0, 4, 8]))
            return ad.scale(ad.tensor_mean(picked), -1.0)

        report = grad_check(loss, rng.normal(size=(3, 4)), step=1e-5, tol=1e-5)
        assert report.passed

    def test_nonfinite_reported_per_coordinate(self):
        x = np.array([0.5, 0.5e-5, 1.0])
        f = lambda t: ad.tensor_sum(ad.log(t))
        with np.errstate(invalid="ignore"):
            report = grad_check(f, x, step=1e-5, tol=1e-6)
        assert report.nonfinite == [1]
        assert not report.passed

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: ad.tensor_sum(t), np.ones(2), step=0.0)
