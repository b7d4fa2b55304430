"""Tests for masked MSE, InfoNCE, cross-entropy and the memory queue."""

import math

import numpy as np
import pytest

from selffed.config import NegativeMode
from selffed.errors import (
    EmptyMaskSetError,
    EmptyQueueError,
    LabelOutOfRangeError,
    NonUnitNormError,
    ZeroTemperatureError,
)
from selffed.microtensor import Graph, Tensor
from selffed.patching import MaskPlan, PatchGrid
from selffed.ssl_losses import (
    MemoryQueue,
    cross_entropy,
    info_nce,
    masked_mse,
    nce_from_similarities,
    queue_push,
)


def _unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _queue(vectors):
    vectors = np.atleast_2d(vectors)
    return MemoryQueue(len(vectors), vectors.shape[1]).push(vectors)


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


E = np.eye(3)


class TestMemoryQueue:

    @pytest.mark.parametrize("capacity", range(1, 17))
    def test_fifo_matches_list_reference(self, capacity):
        rng = np.random.default_rng(capacity)
        queue = MemoryQueue(capacity, 4)
        reference = []
        for size in rng.integers(0, 7, size=12):
            batch = _unit(rng, int(size), 4)
            queue.push(batch)
            reference = (reference + list(batch))[-capacity:]
            assert len(queue) == len(reference)
            np.testing.assert_array_equal(queue.entries(), np.array(reference).reshape(-1, 4))

    def test_oldest_evicted_first(self):
        vectors = _unit(np.random.default_rng(0), 5, 3)
        queue = MemoryQueue(4, 3)
        for v in vectors:
            queue.push(v)
        assert len(queue) == 4 and queue.full
        np.testing.assert_array_equal(queue.entries(), vectors[1:])

    def test_empty_push_is_noop(self):
        queue = _queue(E[:2])
        before = queue.copy()
        queue.push(np.zeros((0, 3)))
        assert queue == before

    def test_rejects_non_unit(self):
        with pytest.raises(NonUnitNormError):
            MemoryQueue(2, 3).push(np.array([[2.0, 0.0, 0.0]]))

    def test_functional_push_leaves_original(self):
        queue = _queue(E[:2])
        pushed = queue_push(queue, E[2])
        np.testing.assert_array_equal(queue.entries(), E[:2])
        np.testing.assert_array_equal(pushed.entries(), E[1:])


class TestInfoNCE:

    def test_two_orthogonal_negatives(self):
        loss = info_nce(E[0], E[0], _queue(E[1:]), temperature=1.0).item()
        assert loss == pytest.approx(-math.log(math.e / (math.e + 2)))
        assert loss == pytest.approx(0.5514, abs=1e-4)

    def test_negatives_only_mode(self):
        loss = info_nce(E[0], E[0], _queue(E[1:]), 1.0, NegativeMode.NEGATIVES_ONLY).item()
        assert loss == pytest.approx(math.log(2.0) - 1.0)

    @pytest.mark.parametrize("temperature", [0.05, 0.2, 1.0, 5.0])
    def test_identical_negatives(self, temperature):
        n = 5
        queue = MemoryQueue(n, 3).push(np.tile(E[0], (n, 1)))
        loss = info_nce(E[0], E[0], queue, temperature).item()
        assert loss == pytest.approx(math.log(n + 1))

    @pytest.mark.parametrize("k", [0.1, 0.5, 2.0, 7.5])
    @pytest.mark.parametrize("mode", list(NegativeMode))
    def test_scaling_similarities_and_temperature_together(self, k, mode):
        rng = np.random.default_rng(int(k * 10))
        pos = rng.uniform(-1, 1, size=4)
        neg = rng.uniform(-1, 1, size=(4, 9))
        base = nce_from_similarities(pos, neg, 0.3, mode).item()
        assert nce_from_similarities(k * pos, k * neg, k * 0.3, mode).item() == pytest.approx(base, rel=1e-9)

    @pytest.mark.parametrize("k", [0.25, 1.0, 4.0])
    def test_matches_softmax_over_scaled_cosines(self, k):
        rng = np.random.default_rng(int(k * 100))
        queue = _queue(_unit(rng, 12, 5))
        q, other = rng.normal(size=(2, 5))
        temperature = 0.2
        logits = np.array([_cos(q, other)] + [_cos(q, n) for n in queue.entries()]) / temperature
        expected = -(logits[0] - np.log(np.exp(logits).sum()))
        # cosine ignores norms, so rescaling the online embedding changes nothing
        assert info_nce(k * q, other, queue, temperature).item() == pytest.approx(expected, rel=1e-9)

    def test_monotone_in_alignment(self):
        queue = _queue(_unit(np.random.default_rng(1), 6, 2))
        losses = []
        for cos in (-1.0, 0.0, 0.5, 1.0):
            other = np.array([cos, math.sqrt(max(0.0, 1 - cos * cos))])
            losses.append(info_nce(np.array([1.0, 0.0]), other, queue, 0.2).item())
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_aligned_is_optimal(self):
        rng = np.random.default_rng(2)
        queue = _queue(_unit(rng, 8, 4))
        q = _unit(rng, 1, 4)[0]
        best = info_nce(q, q, queue, 0.2).item()
        for other in _unit(rng, 10, 4):
            assert best <= info_nce(q, other, queue, 0.2).item()

    def test_non_negative_when_negatives_dominate(self):
        queue = MemoryQueue(3, 3).push(np.tile(E[1], (3, 1)))
        loss = info_nce(E[0], -E[1], queue, 0.5).item()
        assert loss >= 0.0

    def test_batch_mean(self):
        rng = np.random.default_rng(3)
        queue = _queue(_unit(rng, 5, 4))
        a, b = _unit(rng, 3, 4), _unit(rng, 3, 4)
        batch = info_nce(a, b, queue, 0.3).item()
        singles = [info_nce(a[i], b[i], queue, 0.3).item() for i in range(3)]
        assert batch == pytest.approx(np.mean(singles))

    def test_gradient_only_into_online_branch(self):
        rng = np.random.default_rng(4)
        q = Tensor(_unit(rng, 2, 4), requires_grad=True)
        target = Tensor(_unit(rng, 2, 4), requires_grad=True)
        with Graph() as g:
            loss = info_nce(q, target, _queue(_unit(rng, 3, 4)), 0.2)
        g.backward(loss, leaves=[q, target])
        assert np.any(q.grad != 0)
        assert np.all(target.grad == 0)

    def test_errors(self):
        with pytest.raises(ZeroTemperatureError):
            info_nce(E[0], E[0], _queue(E[1:]), 0.0)
        with pytest.raises(EmptyQueueError):
            info_nce(E[0], E[0], MemoryQueue(4, 3), 0.2)


class TestMaskedMSE:
    grid = PatchGrid(4, 4, 1, 2)

    def test_zero_when_equal(self, rng):
        image = rng.uniform(size=(4, 4, 1))
        assert masked_mse(image, image, MaskPlan.from_masked(4, [1, 2]), self.grid).item() == 0.0

    def test_mean_over_masked_patches(self):
        target = np.zeros((4, 4, 1))
        pred = target.copy()
        pred[0:2, 2:4] = 2.0  # patch 1, per-patch mean squared error 4
        plan = MaskPlan.from_masked(4, [0, 1])
        assert masked_mse(pred, target, plan, self.grid).item() == pytest.approx(2.0)

    def test_unmasked_perturbation_ignored(self, rng):
        target = rng.uniform(size=(4, 4, 1))
        pred = rng.uniform(size=(4, 4, 1))
        plan = MaskPlan.from_masked(4, [0, 3])
        base = masked_mse(pred, target, plan, self.grid).item()
        pred[0:2, 2:4] += 10.0
        pred[2:4, 0:2] -= 3.0
        assert masked_mse(pred, target, plan, self.grid).item() == base

    def test_gradient_only_on_masked_pixels(self, rng):
        pred = Tensor(rng.uniform(size=(4, 4, 1)), requires_grad=True)
        plan = MaskPlan.from_masked(4, [2])
        with Graph() as g:
            loss = masked_mse(pred, np.zeros((4, 4, 1)), plan, self.grid)
        g.backward(loss)
        assert np.all(pred.grad[2:4, 0:2] != 0)
        pred.grad[2:4, 0:2] = 0
        assert np.all(pred.grad == 0)

    def test_empty_mask_rejected(self, rng):
        image = rng.uniform(size=(4, 4, 1))
        with pytest.raises(EmptyMaskSetError):
            masked_mse(image, image, MaskPlan.from_masked(4, []), self.grid)


class TestCrossEntropy:

    def test_uniform_logits(self):
        assert cross_entropy(np.zeros(2), 1).item() == pytest.approx(math.log(2))

    def test_confident_logits(self):
        assert cross_entropy(np.array([0.0, 1e6]), 1).item() == pytest.approx(0.0, abs=1e-12)

    def test_gradient_is_softmax_minus_onehot(self):
        logits = Tensor([0.3, -1.2, 2.0], requires_grad=True)
        with Graph() as g:
            loss = cross_entropy(logits, 2)
        g.backward(loss)
        p = np.exp(logits.data) / np.exp(logits.data).sum()
        np.testing.assert_allclose(logits.grad, p - np.eye(3)[2], rtol=1e-6, atol=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRangeError):
            cross_entropy(np.zeros((2, 3)), [0, 3])
