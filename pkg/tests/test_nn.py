import math

import numpy as np
import pytest

from spkembed import nn
from spkembed.nn import (
    Conv3x3,
    Dense,
    Dropout,
    EncoderConfig,
    LrSchedule,
    OptimizerState,
    Relu,
    ResidualBlock,
    TemporalAvgPool,
)

# --------------------------------------------------------------------------- reference implementation


def ref_conv(x, W, b, stride):
    B, C, H, Wd = x.shape
    O = W.shape[0]
    Ho, Wo = (H - 1) // stride + 1, (Wd - 1) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for di in range(3):
                            for dj in range(3):
                                r, s = i * stride + di - 1, j * stride + dj - 1
                                if 0 <= r < H and 0 <= s < Wd:
                                    acc += W[o, c, di, dj] * x[n, c, r, s]
                    out[n, o, i, j] = acc
    return out


def ref_forward(cfg, params, batch, dropout_masks=None):
    x = np.asarray(batch, dtype=float)[:, None]
    for i, layer in enumerate(cfg.layers):
        if isinstance(layer, Conv3x3):
            x = ref_conv(x, params[f"L{i}.W"], params[f"L{i}.b"], layer.stride)
        elif isinstance(layer, ResidualBlock):
            h = x
            for j in range(layer.n_convs):
                h = ref_conv(h, params[f"L{i}.conv{j}.W"], params[f"L{i}.conv{j}.b"], 1)
                if j < layer.n_convs - 1:
                    h = np.maximum(h, 0)
            if f"L{i}.proj.W" in params:
                P, pb = params[f"L{i}.proj.W"], params[f"L{i}.proj.b"]
                sc = np.zeros((x.shape[0], P.shape[0], *x.shape[2:]))
                for o in range(P.shape[0]):
                    sc[:, o] = pb[o] + sum(P[o, c] * x[:, c] for c in range(x.shape[1]))
            else:
                sc = x
            x = np.maximum(h + sc, 0)
        elif isinstance(layer, Relu):
            x = np.maximum(x, 0)
        elif isinstance(layer, TemporalAvgPool):
            x = x.sum(axis=2, keepdims=True) / x.shape[2]
        elif isinstance(layer, Dropout):
            pass
        elif isinstance(layer, Dense):
            flat = x.reshape(x.shape[0], -1)
            x = np.array([[params[f"L{i}.b"][o] + sum(params[f"L{i}.W"][o, k] * row[k] for k in range(row.size))
                           for o in range(layer.out_dim)] for row in flat])
    return x.reshape(x.shape[0], -1)


def random_encoder(rng):
    T, F = int(rng.integers(4, 8)), int(rng.integers(3, 7))
    layers = []
    shape_T, ch = T, 1
    for _ in range(int(rng.integers(1, 3))):
        kind = rng.integers(0, 2)
        if kind == 0:
            stride = int(rng.integers(1, 3))
            ch = int(rng.integers(1, 4))
            layers += [Conv3x3(ch, stride), Relu()]
            shape_T = (shape_T - 1) // stride + 1
        else:
            ch = int(rng.integers(1, 4))
            layers.append(ResidualBlock(ch, int(rng.integers(2, 4))))
    layers.append(TemporalAvgPool(shape_T))
    if rng.random() < 0.5:
        layers.append(Dropout(0.3))
    d = int(rng.integers(2, 6))
    layers.append(Dense(d))
    return EncoderConfig(layers, d, (T, F))


def perturbed_params(cfg, rng):
    params = nn.init_params(cfg, "he", rng)
    # non-zero biases so every code path carries signal
    return {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}


# --------------------------------------------------------------------------- shapes


class TestShapePropagate:
    def test_resnet20_output_sizes(self):
        cfg = nn.resnet20_config((300, 257), 512)
        shapes = nn.shape_propagate(cfg)
        sizes = []
        for s in shapes[1:]:
            hw = s[1:] if len(s) == 3 else s
            if not sizes or sizes[-1] != hw:
                sizes.append(hw)
        assert sizes == [(150, 129), (75, 65), (38, 33), (19, 17), (1, 17), (512,)]
        assert shapes[-2] == (512, 1, 17)

    def test_resnet20_has_twenty_convs(self):
        cfg = nn.resnet20_config()
        convs = sum(1 for l in cfg.layers if isinstance(l, Conv3x3)) + sum(
            l.n_convs for l in cfg.layers if isinstance(l, ResidualBlock))
        assert convs == 20

    def test_resnet20_stage_channels(self):
        shapes = nn.shape_propagate(nn.resnet20_config())
        assert {s[0] for s in shapes[1:-1]} == {64, 128, 256, 512}

    def test_identity_stack(self):
        assert nn.shape_propagate(EncoderConfig([], 1, (5, 6))) == [(1, 5, 6)]

    def test_stride2_halves(self):
        assert nn.shape_propagate(EncoderConfig([Conv3x3(1, 2)], 1, (10, 10)))[-1] == (1, 5, 5)

    def test_pool_mismatch(self):
        with pytest.raises(nn.ShapeError):
            nn.shape_propagate(EncoderConfig([TemporalAvgPool(4)], 1, (5, 5)))

    def test_spatial_after_dense(self):
        with pytest.raises(nn.ShapeError):
            nn.shape_propagate(EncoderConfig([Dense(3), Conv3x3(2)], 3, (4, 4)))

    def test_desk_default(self):
        cfg = nn.desk_config()
        assert nn.shape_propagate(cfg)[-3] == (64, 19, 17)

    def test_layer_text_roundtrip(self):
        cfg = nn.resnet20_config(dropout=0.5)
        assert nn.parse_layers(nn.format_layers(cfg.layers)) == cfg.layers


# --------------------------------------------------------------------------- forward


class TestForward:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_reference(self, seed):
        rng = np.random.default_rng(seed)
        cfg = random_encoder(rng)
        params = perturbed_params(cfg, rng)
        batch = rng.standard_normal((2, *cfg.input_shape))
        out, _ = nn.forward(cfg, params, batch, "eval")
        np.testing.assert_allclose(out, ref_forward(cfg, params, batch), rtol=0, atol=1e-10)

    def test_zero_weights_zero_embedding(self):
        cfg = nn.desk_config((20, 16), widths=(2, 3), embedding_dim=4)
        params = {k: np.zeros_like(v) for k, v in nn.init_params(cfg).items()}
        out, _ = nn.forward(cfg, params, np.random.default_rng(0).standard_normal((3, 20, 16)))
        assert np.all(out == 0)

    def test_dropout_zero_train_equals_eval(self):
        cfg = nn.desk_config((12, 10), widths=(2,), embedding_dim=3, dropout=0.0)
        cfg = EncoderConfig(cfg.layers[:-1] + (Dropout(0.0), cfg.layers[-1]), 3, (12, 10))
        params = nn.init_params(cfg)
        x = np.random.default_rng(1).standard_normal((4, 12, 10))
        a, _ = nn.forward(cfg, params, x, "train", np.random.default_rng(0))
        b, _ = nn.forward(cfg, params, x, "eval")
        np.testing.assert_array_equal(a, b)

    def test_inverted_dropout_preserves_mean(self):
        cfg = EncoderConfig([Relu(), TemporalAvgPool(4), Dropout(0.5), Dense(3)], 3, (4, 5))
        params = perturbed_params(cfg, np.random.default_rng(0))
        x = np.abs(np.random.default_rng(1).standard_normal((1, 4, 5))) + 0.5
        ev, _ = nn.forward(cfg, params, x, "eval")
        rng = np.random.default_rng(2)
        total = np.zeros_like(ev)
        n = 10_000
        for _ in range(n):
            total += nn.forward(cfg, params, x, "train", rng)[0]
        # relative to the size of the eval output; single near-zero coordinates
        # would make a per-element tolerance meaningless
        assert np.linalg.norm(total / n - ev) / np.linalg.norm(ev) <= 0.02

    def test_deterministic(self):
        cfg = nn.desk_config((12, 10), widths=(2, 2), embedding_dim=3, dropout=0.5)
        params = nn.init_params(cfg)
        x = np.random.default_rng(1).standard_normal((4, 12, 10))
        a, _ = nn.forward(cfg, params, x, "train", np.random.default_rng(7))
        b, _ = nn.forward(cfg, params, x, "train", np.random.default_rng(7))
        assert a.tobytes() == b.tobytes()

    def test_shape_mismatch(self):
        cfg = nn.desk_config((12, 10), widths=(2,), embedding_dim=3)
        with pytest.raises(nn.ShapeError):
            nn.forward(cfg, nn.init_params(cfg), np.zeros((2, 11, 10)))

    def test_nan_detected(self):
        cfg = nn.desk_config((12, 10), widths=(2,), embedding_dim=3)
        x = np.zeros((1, 12, 10))
        x[0, 3, 3] = np.nan
        with pytest.raises(nn.NonFiniteError):
            nn.forward(cfg, nn.init_params(cfg), x)

    def test_float32_stays_float32(self):
        cfg = nn.desk_config((12, 10), widths=(2,), embedding_dim=3)
        params = nn.init_params(cfg, dtype=np.float32)
        out, cache = nn.forward(cfg, params, np.ones((2, 12, 10), dtype=np.float32))
        assert out.dtype == np.float32
        assert all(g.dtype == np.float32 for g in nn.backward(cfg, params, cache, np.ones_like(out)).values())


# --------------------------------------------------------------------------- backward


def fd_max_rel_error(cfg, params, batch, G, h=1e-4, dropout_seed=3):
    """Worst relative error of backward() against central differences.

    With one activation pattern the objective is affine in any single
    parameter, so a non-zero second difference means the stencil straddles a
    ReLU kink, where the central difference is not a derivative. Those
    coordinates are re-checked with a step 100x smaller. Returns the worst
    error and the number of re-checked coordinates.
    """
    mode = "train" if any(isinstance(l, Dropout) for l in cfg.layers) else "eval"

    def objective(p):
        out, _ = nn.forward(cfg, p, batch, mode, np.random.default_rng(dropout_seed))
        return float(np.sum(out * G))

    def central(p, idx, step):
        orig = p[idx]
        p[idx] = orig + step
        fp = objective(params)
        p[idx] = orig - step
        fm = objective(params)
        p[idx] = orig
        return fp, fm

    f0 = objective(params)
    _, cache = nn.forward(cfg, params, batch, mode, np.random.default_rng(dropout_seed))
    grads = nn.backward(cfg, params, cache, G)
    worst, kinked = 0.0, 0
    for name, p in params.items():
        for idx in np.ndindex(p.shape):
            fp, fm = central(p, idx, h)
            if abs(fp - 2 * f0 + fm) > 1e-9 * (abs(fp) + abs(fm) + 1):
                kinked += 1
                fp, fm = central(p, idx, h / 100)
                num = (fp - fm) / (2 * h / 100)
            else:
                num = (fp - fm) / (2 * h)
            worst = max(worst, abs(grads[name][idx] - num) / max(abs(grads[name][idx]), abs(num), 1e-8))
    return worst, kinked


class TestBackward:
    def test_zero_upstream_gradient(self):
        cfg = random_encoder(np.random.default_rng(0))
        params = perturbed_params(cfg, np.random.default_rng(1))
        out, cache = nn.forward(cfg, params, np.ones((2, *cfg.input_shape)), "train", np.random.default_rng(0))
        grads = nn.backward(cfg, params, cache, np.zeros_like(out))
        assert set(grads) == set(params)
        assert all(np.all(g == 0) for g in grads.values())

    def test_dense_outer_product(self):
        cfg = EncoderConfig([TemporalAvgPool(1), Dense(3)], 3, (1, 4))
        params = perturbed_params(cfg, np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((1, 1, 4))
        g = np.array([[1.0, -2.0, 0.5]])
        _, cache = nn.forward(cfg, params, x)
        grads = nn.backward(cfg, params, cache, g)
        np.testing.assert_allclose(grads["L1.W"], np.outer(g[0], x.reshape(-1)), atol=1e-15)
        np.testing.assert_allclose(grads["L1.b"], g[0], atol=1e-15)

    def test_finite_differences_20_encoders(self):
        worst, kinked, total = 0.0, 0, 0
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            cfg = random_encoder(rng)
            params = perturbed_params(cfg, rng)
            batch = rng.standard_normal((2, *cfg.input_shape))
            G = rng.standard_normal((2, cfg.embedding_dim))
            err, k = fd_max_rel_error(cfg, params, batch, G)
            worst, kinked, total = max(worst, err), kinked + k, total + sum(v.size for v in params.values())
        assert worst <= 1e-4
        assert kinked <= 0.05 * total

    def test_stale_cache_rejected(self):
        cfg = random_encoder(np.random.default_rng(0))
        params = perturbed_params(cfg, np.random.default_rng(1))
        out, cache = nn.forward(cfg, params, np.ones((1, *cfg.input_shape)), "train", np.random.default_rng(0))
        newer, _ = nn.sgd_step(params, nn.backward(cfg, params, cache, np.ones_like(out)), OptimizerState(0.1))
        with pytest.raises(nn.StaleCacheError):
            nn.backward(cfg, newer, cache, np.ones_like(out))

    def test_grad_shape_checked(self):
        cfg = random_encoder(np.random.default_rng(0))
        params = perturbed_params(cfg, np.random.default_rng(1))
        out, cache = nn.forward(cfg, params, np.ones((1, *cfg.input_shape)), "train", np.random.default_rng(0))
        with pytest.raises(nn.ShapeError):
            nn.backward(cfg, params, cache, np.ones((2, out.shape[1])))


# --------------------------------------------------------------------------- init / optimizer / schedule


class TestInit:
    def test_biases_zero(self):
        params = nn.init_params(nn.desk_config((20, 16), widths=(2, 3), embedding_dim=4), rng=np.random.default_rng(0))
        assert all(np.all(v == 0) for k, v in params.items() if k.endswith(".b"))

    def test_he_std(self):
        cfg = EncoderConfig([Conv3x3(128), Conv3x3(100)], 1, (3, 3))
        W = nn.init_params(cfg, "he", np.random.default_rng(0))["L1.W"]
        assert W.size >= 100_000
        target = math.sqrt(2.0 / (128 * 9))
        assert abs(W.std() - target) / target < 0.05

    def test_dense_xavier_bound(self):
        cfg = EncoderConfig([TemporalAvgPool(2), Dense(30)], 30, (2, 10))
        W = nn.init_params(cfg, "he", np.random.default_rng(0))["L1.W"]
        assert np.abs(W).max() <= math.sqrt(6 / 40)

    def test_same_seed_same_params(self):
        cfg = nn.desk_config((20, 16), widths=(2, 3), embedding_dim=4)
        a = nn.init_params(cfg, "he", np.random.default_rng(5))
        b = nn.init_params(cfg, "he", np.random.default_rng(5))
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            nn.init_params(nn.desk_config((20, 16), widths=(2,), embedding_dim=4), "lecun")


class TestSgd:
    def test_vanilla(self):
        p = {"w": np.array([1.0, -2.0])}
        g = {"w": np.array([0.5, 0.25])}
        new, _ = nn.sgd_step(p, g, OptimizerState(0.1, momentum=0.0, weight_decay=0.0))
        np.testing.assert_allclose(new["w"], [0.95, -2.025])

    def test_fixed_point(self):
        p = {"w": np.array([1.0, -2.0])}
        new, _ = nn.sgd_step(p, {"w": np.zeros(2)}, OptimizerState(0.1, 0.93, 0.0))
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_two_step_recurrence(self):
        # v1 = 0.5 + 5e-4*1; p1 = 1 - 0.1 v1; v2 = 0.93 v1 + 0.5 + 5e-4 p1; p2 = p1 - 0.1 v2
        state = OptimizerState(0.1, 0.93, 0.0005)
        p = {"w": np.array(1.0)}
        g = {"w": np.array(0.5)}
        p, state = nn.sgd_step(p, g, state)
        assert float(p["w"]) == pytest.approx(0.94995, abs=1e-15)
        p, state = nn.sgd_step(p, g, state)
        assert float(p["w"]) == pytest.approx(0.8533560025, abs=1e-13)
        assert float(state.velocity["w"]) == pytest.approx(0.965939975, abs=1e-13)

    def test_inputs_untouched(self):
        p = {"w": np.array([1.0])}
        nn.sgd_step(p, {"w": np.array([1.0])}, OptimizerState(0.5))
        assert p["w"][0] == 1.0


class TestSchedule:
    def test_start(self):
        assert nn.lr_at(LrSchedule(0.05, 0.75, 8, 100), 0) == 0.05

    def test_first_step(self):
        assert nn.lr_at(LrSchedule(0.05, 0.75, 8, 100), 100) == pytest.approx(0.0375)
        assert nn.lr_at(LrSchedule(0.05, 0.75, 8, 100), 99) == 0.05

    def test_softmax_ladder_end(self):
        sched = LrSchedule(0.05, 0.75, 22, 2800)
        assert sched.total_iters == 61600
        assert nn.lr_at(sched, 61600) == pytest.approx(0.05 * 0.75**22, rel=1e-12)

    def test_clamped(self):
        sched = LrSchedule(1.0, 0.5, 2, 10)
        assert nn.lr_at(sched, 10_000) == 0.25

    def test_validation(self):
        with pytest.raises(ValueError):
            LrSchedule(0.1, 1.0, 2, 10)
        with pytest.raises(ValueError):
            nn.lr_at(LrSchedule(), -1)
