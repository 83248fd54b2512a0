import numpy as np
import pytest
from conftest import central_diff, rel_err

from arena.adapters import attach_adapters
from arena.errors import ContractError, ShapeError
from arena.model_kit import (
    AttentionBlock, LayerNorm, LinearLayer, ReLU, Sigmoid, Softmax, ToyModel,
    build_attention_model, build_linear_model, build_mlp, dice_score, mse_loss,
    multiclass_dice_loss, soft_dice_loss,
)


def mask(shape, sl):
    m = np.zeros(shape)
    m[sl] = 1.0
    return m


def probe_loss(model, x, g):
    out, _ = model.forward(x)
    return float(np.sum(out * g))


def check_model_grads(model, x, names, tol):
    out, cache = model.forward(x)
    g = np.random.default_rng(3).normal(size=out.shape)
    grads = model.backward(cache, g)
    params = model.parameters()
    for name in names:
        fd = central_diff(lambda: probe_loss(model, x, g), params[name])
        assert rel_err(grads[name], fd) < tol, name


class TestForward:
    def test_zero_head_gives_zero(self, rng, np_rng):
        model = build_mlp(rng, 5, 8, 2, output="identity")
        model.head.weight[...] = 0.0
        out, _ = model.forward(np_rng.normal(size=(5, 7)))
        np.testing.assert_array_equal(out, 0.0)

    def test_identity_linear(self, np_rng):
        model = build_linear_model(np.eye(4))
        x = np_rng.normal(size=(4, 3))
        np.testing.assert_array_equal(model.forward(x)[0], x)

    def test_attention_by_hand(self, np_rng):
        lin = lambda n: LinearLayer(n, np_rng.normal(size=(2, 2)), np_rng.normal(size=2))  # noqa: E731
        wq, wk, wv, wo = lin("q"), lin("k"), lin("v"), lin("o")
        block = AttentionBlock("attn", wq, wk, wv, wo)
        x = np_rng.normal(size=(2, 2))
        y, _ = block.forward(x)
        # token-by-token re-derivation
        expected = np.zeros((2, 2))
        for i in range(2):
            q = wq.weight @ x[:, i] + wq.bias
            scores = []
            for j in range(2):
                k = wk.weight @ x[:, j] + wk.bias
                scores.append(q @ k / np.sqrt(2))
            w = np.exp(scores) / np.sum(np.exp(scores))
            o = sum(w[j] * (wv.weight @ x[:, j] + wv.bias) for j in range(2))
            expected[:, i] = x[:, i] + wo.weight @ o + wo.bias
        np.testing.assert_allclose(y, expected, rtol=1e-12, atol=1e-12)

    def test_attention_rows_sum_to_one(self, rng, np_rng):
        model = build_attention_model(rng, 3, d=4, seq_len=5)
        _, cache = model.forward(np_rng.normal(size=(3, 10)))
        P = cache.layer_caches[1][-1]
        np.testing.assert_allclose(P.sum(axis=2), 1.0, atol=1e-9)

    def test_shape_error_names_layer(self, rng):
        model = build_mlp(rng, 5, 8, 1)
        with pytest.raises(ShapeError, match="fc1"):
            model.forward(np.ones((4, 2)))

    def test_attention_seq_len_must_divide(self, rng):
        model = build_attention_model(rng, 3, d=4, seq_len=4)
        with pytest.raises(ShapeError, match="attn"):
            model.forward(np.ones((3, 6)))


class TestBackward:
    def test_zero_grad_output(self, rng, np_rng):
        model = build_mlp(rng, 5, 8, 1)
        x = np_rng.normal(size=(5, 4))
        out, cache = model.forward(x)
        for g in model.backward(cache, np.zeros_like(out)).values():
            np.testing.assert_array_equal(g, 0.0)

    def test_linear_finite_differences(self, np_rng):
        model = build_linear_model(np_rng.normal(size=(3, 4)), np_rng.normal(size=3))
        check_model_grads(model, np_rng.normal(size=(4, 5)), ["base.weight", "base.bias"], 1e-6)

    def test_mlp_all_layers(self, rng, np_rng):
        model = build_mlp(rng, 4, 6, 2, output="softmax")
        x = np_rng.normal(size=(4, 5))
        check_model_grads(model, x, list(model.parameters()), 1e-5)

    def test_attention_with_adapters(self, rng, np_rng):
        model = build_attention_model(rng, 3, d=4, n_out=1, seq_len=3)
        attach_adapters(model, rng.split("ad"), "gated", 2)
        for a in model.adapters().values():
            a.B[...] = np_rng.normal(size=a.B.shape)
        model.touch()
        names = [n for n in model.parameters() if ".adapter." in n]
        assert len(names) == 6
        check_model_grads(model, np_rng.normal(size=(3, 6)), names, 1e-5)

    def test_every_layer_type_random_points(self, np_rng):
        layers = {
            "layernorm": LayerNorm("ln", 5, gamma=np_rng.normal(size=5), beta=np_rng.normal(size=5)),
            "sigmoid": Sigmoid("s"),
            "softmax": Softmax("sm"),
            "relu": ReLU("r"),
        }
        for kind, layer in layers.items():
            for _ in range(25):
                x = np_rng.normal(size=(5, 3))
                g = np_rng.normal(size=(5, 3))
                y, cache = layer.forward(x)
                gx, grads = layer.backward(cache, g)
                fx = central_diff(lambda: float(np.sum(layer.forward(x)[0] * g)), x)
                assert rel_err(gx, fx) < 1e-5, kind
                for name, p in layer.params().items():
                    fp = central_diff(lambda: float(np.sum(layer.forward(x)[0] * g)), p)
                    assert rel_err(grads[name], fp) < 1e-5, name

    def test_stale_cache_rejected(self, rng, np_rng):
        model = build_mlp(rng, 3, 4, 1)
        out, cache = model.forward(np_rng.normal(size=(3, 2)))
        model.touch()
        with pytest.raises(ContractError):
            model.backward(cache, np.ones_like(out))

    def test_foreign_cache_rejected(self, rng, np_rng):
        a = build_mlp(rng, 3, 4, 1)
        b = build_mlp(rng, 3, 4, 1)
        out, cache = a.forward(np_rng.normal(size=(3, 2)))
        with pytest.raises(ContractError):
            b.backward(cache, np.ones_like(out))


class TestLayerNorm:
    def test_column_statistics(self, np_rng):
        ln = LayerNorm("ln", 16)
        x = np_rng.normal(5.0, 10.0, size=(16, 40))
        xhat, _ = ln.normalize(x)
        assert np.max(np.abs(xhat.mean(axis=0))) < 1e-9
        assert np.max(np.abs(xhat.var(axis=0) - 1.0)) < 1e-6


class TestParameterGroups:
    @pytest.mark.parametrize("builder", ["mlp", "attention"])
    def test_partition(self, rng, builder):
        model = build_mlp(rng, 4, 6) if builder == "mlp" else build_attention_model(rng, 4, d=6)
        attach_adapters(model, rng, "gated", 2)
        per_layer = [set(layer.params()) for layer in model.layers]
        union = set().union(*per_layer)
        assert union == set(model.parameters())
        assert sum(len(s) for s in per_layer) == len(union)

    def test_duplicate_names_rejected(self):
        with pytest.raises(ShapeError):
            ToyModel([LinearLayer("a", np.eye(2)), LinearLayer("a", np.eye(2))])


class TestLosses:
    def test_dice_loss_perfect(self):
        t = np.array([[1.0, 0.0, 1.0, 0.0]])
        loss, _ = soft_dice_loss(t, t)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_dice_loss_disjoint(self):
        p = np.array([[1.0, 1.0, 0.0, 0.0]])
        g = np.array([[0.0, 0.0, 1.0, 1.0]])
        assert soft_dice_loss(p, g)[0] == pytest.approx(1.0, abs=1e-6)

    def test_dice_loss_half_overlap(self):
        p = mask((1, 40), np.s_[0, :10])
        g = mask((1, 40), np.s_[0, 5:15])
        assert soft_dice_loss(p, g, smooth=0.0)[0] == pytest.approx(0.5, abs=1e-12)

    def test_dice_loss_gradient(self, np_rng):
        p = np_rng.uniform(size=(1, 12))
        g = (np_rng.uniform(size=(1, 12)) > 0.5).astype(float)
        _, grad = soft_dice_loss(p, g)
        fd = central_diff(lambda: soft_dice_loss(p, g)[0], p)
        assert rel_err(grad, fd) < 1e-7

    def test_multiclass_dice_gradient(self, np_rng):
        p = np_rng.uniform(size=(3, 10))
        g = np.eye(3)[:, np_rng.integers(0, 3, size=10)]
        _, grad = multiclass_dice_loss(p, g)
        fd = central_diff(lambda: multiclass_dice_loss(p, g)[0], p)
        assert rel_err(grad, fd) < 1e-7

    def test_dice_loss_range_and_overlap_monotone(self):
        g = mask((1, 20), np.s_[0, :8])
        losses = []
        for shift in range(9):
            p = mask((1, 20), np.s_[0, shift:shift + 8])
            loss, _ = soft_dice_loss(p, g)
            assert 0.0 <= loss <= 1.0
            losses.append(loss)
        assert all(a <= b for a, b in zip(losses, losses[1:]))

    def test_dice_shape_error(self):
        with pytest.raises(ShapeError):
            soft_dice_loss(np.ones((1, 3)), np.ones((1, 4)))

    def test_mse_examples(self, np_rng):
        a = np_rng.normal(size=(4, 4))
        assert mse_loss(a, a)[0] == 0.0
        assert mse_loss(a + 1.0, a)[0] == pytest.approx(1.0)
        b = np_rng.normal(size=(4, 4))
        expected = sum((a[i, j] - b[i, j]) ** 2 for i in range(4) for j in range(4)) / 16
        loss, grad = mse_loss(a, b)
        assert loss == pytest.approx(expected, rel=1e-12)
        np.testing.assert_allclose(grad, 2 * (a - b) / 16)

    def test_mse_shape_error(self):
        with pytest.raises(ShapeError):
            mse_loss(np.ones((2, 2)), np.ones((2, 3)))


class TestDiceScore:
    def test_examples(self):
        m = mask((10, 10), np.s_[:3])
        assert dice_score(m, m) == 1.0
        assert dice_score(m, 1 - m) == 0.0
        p = mask(400, np.s_[:100])
        g = mask(400, np.s_[50:150])
        assert dice_score(p, g) == 0.5

    def test_both_empty(self):
        assert dice_score(np.zeros(5), np.zeros(5)) == 1.0

    def test_non_binary(self):
        with pytest.raises(ContractError):
            dice_score(np.array([0.2, 1.0]), np.array([0, 1]))
