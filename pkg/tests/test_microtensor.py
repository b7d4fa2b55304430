"""Tests for the microtensor autodiff engine: primitives, tape, optimizers, weights container."""

import numpy as np
import pytest

from selffed.config import ArchConfig
from selffed.errors import (
    GraphNotEvaluatedError,
    MissingGradientError,
    NonFiniteError,
    NotScalarLossError,
    SerializationError,
    ShapeMismatchError,
)
from selffed.microtensor import (
    AdamW,
    Graph,
    ModelParams,
    SGD,
    Tensor,
    check_gradients,
    eval_primitive,
    lr_at,
    no_grad,
    ops,
    params_from_bytes,
    params_to_bytes,
    sgd_step,
)
from selffed.patching import PatchGrid, sample_mask
from selffed.ssl_losses import masked_mse
from selffed.swinlite import init_params, reconstruct


def _leaf(rng, *shape, positive=False, margin=0.0):
    data = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
    if margin:
        # keep clear of kinks at zero
        data = data + np.where(data < 0, -margin, margin)
    return Tensor(data, requires_grad=True)


# Each case builds its inputs from a Generator and returns (inputs, output-builder).
def _cases():
    return {
        "add": lambda r: ((a := _leaf(r, 3, 4), b := _leaf(r, 4)), lambda: ops.add(a, b)),
        "sub": lambda r: ((a := _leaf(r, 3, 4), b := _leaf(r, 3, 1)), lambda: ops.sub(a, b)),
        "mul": lambda r: ((a := _leaf(r, 2, 3), b := _leaf(r, 2, 3)), lambda: ops.mul(a, b)),
        "scale": lambda r: ((a := _leaf(r, 5),), lambda: ops.scale(a, -1.7)),
        "square": lambda r: ((a := _leaf(r, 4, 2),), lambda: ops.square(a)),
        "log": lambda r: ((a := _leaf(r, 6, positive=True),), lambda: ops.log(a)),
        "exp": lambda r: ((a := _leaf(r, 6),), lambda: ops.exp(a)),
        "where": lambda r: ((a := _leaf(r, 3, 4), b := _leaf(r, 4)),
                            lambda: ops.where(np.arange(12).reshape(3, 4) % 3 == 0, a, b)),
        "relu": lambda r: ((a := _leaf(r, 10, margin=1e-2),), lambda: ops.relu(a)),
        "gelu": lambda r: ((a := _leaf(r, 10),), lambda: ops.gelu(a)),
        "softmax": lambda r: ((a := _leaf(r, 3, 5),), lambda: ops.softmax(a)),
        "log_softmax": lambda r: ((a := _leaf(r, 3, 5),), lambda: ops.log_softmax(a)),
        "layer_norm": lambda r: ((a := _leaf(r, 2, 6),), lambda: ops.layer_norm(a)),
        "matmul": lambda r: ((a := _leaf(r, 2, 3, 4), b := _leaf(r, 4, 5)), lambda: ops.matmul(a, b)),
        "sum": lambda r: ((a := _leaf(r, 3, 4, 2),), lambda: ops.sum(a, axis=(0, 2))),
        "mean": lambda r: ((a := _leaf(r, 3, 4),), lambda: ops.mean(a, axis=1, keepdims=True)),
        "cosine_similarity": lambda r: ((a := _leaf(r, 3, 4), b := _leaf(r, 4)),
                                        lambda: ops.cosine_similarity(a, b)),
        "l2_normalize": lambda r: ((a := _leaf(r, 3, 4),), lambda: ops.l2_normalize(a)),
        "reshape": lambda r: ((a := _leaf(r, 2, 6),), lambda: ops.reshape(a, (3, 4))),
        "transpose": lambda r: ((a := _leaf(r, 2, 3, 4),), lambda: ops.transpose(a, (2, 0, 1))),
        "gather": lambda r: ((a := _leaf(r, 5, 3),), lambda: ops.gather(a, [4, 0, 4, 2], axis=0)),
        "concat": lambda r: ((a := _leaf(r, 2, 3), b := _leaf(r, 1, 3)), lambda: ops.concat([a, b], axis=0)),
    }


def _gradient_error(kind, seed):
    rng = np.random.default_rng(seed)
    inputs, build = _cases()[kind](rng)
    with no_grad():
        out_shape = build().shape
    weights = rng.normal(size=out_shape)

    def loss():
        return ops.sum(ops.mul(build(), weights))

    return check_gradients(loss, inputs, eps=1e-5)


class TestPrimitiveGradients:
    """Every primitive against central finite differences (step 1e-5)."""

    @pytest.mark.parametrize("kind", sorted(_cases()))
    @pytest.mark.parametrize("trial", range(5))
    def test_matches_finite_differences(self, kind, trial):
        assert _gradient_error(kind, 1000 * trial + len(kind)) <= 1e-4

    @pytest.mark.slow
    @pytest.mark.parametrize("kind", sorted(_cases()))
    def test_hundred_random_draws(self, kind):
        worst = max(_gradient_error(kind, 7919 * trial + 13) for trial in range(100))
        assert worst <= 1e-4

    def test_logsumexp_and_linear_composites(self):
        rng = np.random.default_rng(3)
        x, w, b = _leaf(rng, 4, 3), _leaf(rng, 3, 2), _leaf(rng, 2)

        def loss():
            return ops.sum(ops.logsumexp(ops.linear(x, w, b)))

        assert check_gradients(loss, [x, w, b]) <= 1e-4


class TestNumericalInvariants:

    @pytest.mark.parametrize("scale", [1e-3, 1.0, 50.0, 700.0])
    def test_softmax_rows_sum_to_one(self, scale):
        x = np.random.default_rng(21).normal(size=(6, 11)) * scale
        s = ops.softmax(x).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
        assert np.all(s >= 0.0)

    def test_softmax_ignores_row_shift(self):
        x = np.random.default_rng(22).normal(size=(4, 7))
        shifted = x + np.array([[-3.0], [0.0], [10.0], [250.0]])
        np.testing.assert_allclose(ops.softmax(shifted).data, ops.softmax(x).data, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_layer_norm_standardizes(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(loc=rng.uniform(-5, 5), scale=rng.uniform(0.1, 10), size=(8, 16))
        y = ops.layer_norm(x, eps=0.0).data
        assert np.abs(y.mean(axis=-1)).max() <= 1e-10
        assert np.abs(y.var(axis=-1) - 1.0).max() <= 1e-8

    def test_layer_norm_eps_shrinks_variance(self):
        x = np.random.default_rng(23).normal(size=(3, 10))
        v = x.var(axis=-1)
        y = ops.layer_norm(x, eps=1e-2).data
        np.testing.assert_allclose(y.var(axis=-1), v / (v + 1e-2), rtol=1e-10)


class TestCompositeGradient:

    def test_four_patch_autoencoder(self):
        arch = ArchConfig(
            image_size=4, patch_size=2, channels=1, embed_dim=4, depths=(1,), num_heads=(1,),
            window_size=2, proj_hidden_dim=4, proj_dim=4, classifier_hidden_dim=4,
        )
        rng = np.random.default_rng(11)
        params = init_params(arch, 2, rng)
        images = rng.uniform(size=(2, 4, 4, 1))
        grid = PatchGrid(4, 4, 1, 2)
        plans = [sample_mask(4, 0.5, np.random.default_rng(i)) for i in range(2)]
        names = [
            "encoder.patch_embed.weight",
            "encoder.mask_token",
            "encoder.stages.0.blocks.0.attn.q.weight",
            "encoder.stages.0.blocks.0.attn.rel_bias",
            "decoder.stages.0.blocks.0.mlp.fc1.weight",
            "decoder.pred.weight",
        ]

        def loss():
            return masked_mse(reconstruct(images, plans, params, arch), images, plans, grid)

        error = check_gradients(loss, [params[n] for n in names], max_entries=6, rng=np.random.default_rng(0))
        assert error <= 1e-3


class TestGraph:

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Graph() as g:
            y = ops.scale(x, 2.0)
        with pytest.raises(NotScalarLossError):
            g.backward(y)

    def test_loss_from_other_graph_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Graph():
            y = ops.sum(x)
        with Graph() as other:
            ops.sum(ops.scale(x, 3.0))
        with pytest.raises(GraphNotEvaluatedError):
            other.backward(y)

    def test_reused_tensor_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with Graph() as g:
            y = ops.sum(ops.mul(x, x))
        g.backward(y)
        assert x.grad[0] == pytest.approx(6.0)

    def test_unused_leaf_gets_zero_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        with Graph() as g:
            y = ops.sum(x)
        g.backward(y, leaves=[x, unused])
        np.testing.assert_array_equal(unused.grad, [0.0])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with Graph() as g:
            with no_grad():
                ops.exp(x)
        assert g.nodes == []

    def test_outside_graph_values_only(self):
        out = ops.add(Tensor([1.0], requires_grad=True), 2.0)
        assert out.data[0] == 3.0

    def test_non_finite_names_op(self):
        with pytest.raises(NonFiniteError) as exc:
            ops.log(Tensor([0.0]))
        assert exc.value.op == "log"

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_eval_primitive_dispatch(self):
        a, b = np.arange(6.0).reshape(2, 3), np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(eval_primitive("matmul", Tensor(a), Tensor(b)).data, a @ b)
        with pytest.raises(ValueError):
            eval_primitive("conv2d", Tensor(a))


class TestOptimizers:

    def _params(self):
        p = ModelParams()
        p.add("w", np.array([1.0, -2.0]))
        p.add("frozen", np.array([9.0]), trainable=False)
        return p

    def test_sgd_step(self):
        p = sgd_step(self._params(), {"w": np.array([0.5, 0.5])}, 0.1)
        np.testing.assert_allclose(p["w"].data, [0.95, -2.05])
        assert p["frozen"].data[0] == 9.0

    def test_two_sgd_steps_on_linear_regression(self):
        rng = np.random.default_rng(31)
        x, y = rng.normal(size=(12, 3)), rng.normal(size=(12, 1))
        w0 = rng.normal(size=(3, 1))
        p = ModelParams()
        p.add("w", w0)
        lr = 0.05
        for _ in range(2):
            p.zero_grad()
            with Graph() as g:
                loss = ops.mean(ops.square(ops.sub(ops.matmul(x, p["w"]), y)))
            g.backward(loss, leaves=[p["w"]])
            sgd_step(p, p.grads(), lr)

        def grad(w):
            return 2.0 / len(y) * x.T @ (x @ w - y)

        w1 = w0 - lr * grad(w0)
        np.testing.assert_allclose(p["w"].data, w1 - lr * grad(w1), rtol=0, atol=1e-12)

    def test_zero_lr_is_identity(self):
        for opt_cls in (SGD, AdamW):
            p = self._params()
            before = p.copy()
            opt_cls(p).step({"w": np.array([3.0, -1.0])}, 0.0)
            assert p.equal(before)

    def test_missing_gradient(self):
        with pytest.raises(MissingGradientError):
            SGD(self._params()).step({}, 0.1)

    def test_adamw_first_step_moves_by_lr(self):
        p = self._params()
        AdamW(p, weight_decay=0.0).step({"w": np.array([4.0, -0.1])}, 0.01)
        np.testing.assert_allclose(p["w"].data, [0.99, -1.99], atol=1e-6)

    def test_warmup_then_cosine(self):
        assert lr_at(0, 100, 1.0, warmup_rounds=5) == pytest.approx(0.2)
        assert lr_at(4, 100, 1.0, warmup_rounds=5) == pytest.approx(1.0)
        assert lr_at(5, 100, 1.0, warmup_rounds=5) == pytest.approx(1.0)
        assert lr_at(99, 100, 1.0, warmup_rounds=5, min_ratio=0.1) == pytest.approx(0.1)
        assert lr_at(50, 100, 1.0, warmup_rounds=0, schedule="constant") == 1.0


class TestModelParams:

    def _params(self):
        rng = np.random.default_rng(0)
        p = ModelParams()
        p.add("encoder.a", rng.normal(size=(2, 3)))
        p.add("encoder.b", np.array(1.5))
        p.add("decoder.c", rng.normal(size=(4,)))
        return p

    def test_container_round_trip(self):
        p = self._params()
        restored = params_from_bytes(params_to_bytes(p))
        assert restored.equal(p)
        assert restored["encoder.b"].shape == ()

    def test_bad_magic(self):
        with pytest.raises(SerializationError):
            params_from_bytes(b"XXXX" + params_to_bytes(self._params())[4:])

    def test_truncated(self):
        blob = params_to_bytes(self._params())
        with pytest.raises(SerializationError):
            params_from_bytes(blob[:-3])
        with pytest.raises(SerializationError):
            params_from_bytes(blob[:10])

    def test_section_shares_copy_does_not(self):
        p = self._params()
        section = p.section("encoder")
        assert section.names() == ["encoder.a", "encoder.b"]
        section["encoder.a"].data = np.zeros((2, 3))
        assert np.all(p["encoder.a"].data == 0)
        clone = p.copy()
        clone["decoder.c"].data = np.ones(4)
        assert not np.all(p["decoder.c"].data == 1)

    def test_frozen_copy(self):
        frozen = self._params().frozen()
        assert frozen.trainable() == {}

    def test_load_shape_mismatch(self):
        p = self._params()
        other = ModelParams()
        other.add("encoder.a", np.zeros(5))
        with pytest.raises(ShapeMismatchError):
            p.load_(other)
