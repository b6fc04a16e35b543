"""Tests for the composable attack pipeline.

Oracles come first: a closed-form Gaussian weight table, a nested-loop
depthwise convolution, a float64 softmax cross-entropy with explicit
chain rule for linear models, and hand-replicated momentum arithmetic.
Reduction identities between method configurations are asserted bit for
bit, not within a tolerance.
"""

import math

import numpy as np
import pytest

from metagrad import attacks as atk
from metagrad import autodiff as ad
from metagrad.errors import ConfigError, ShapeError


# ---------------------------------------------------------------------------
# fixtures and reference implementations
# ---------------------------------------------------------------------------


class LinearModel:
    """Flatten + dense logits; small weights keep softmax unsaturated."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float32)
        self.w = ad.Tensor(w)
        self.b = ad.Tensor(np.zeros(w.shape[1], dtype=np.float32))

    def logits(self, x: ad.Tensor) -> ad.Tensor:
        flat = ad.reshape(x, (x.data.shape[0], self.w.data.shape[0]))
        return ad.dense(flat, self.w, self.b)


class SpyModel(LinearModel):
    """Records every input it is asked to score."""

    def __init__(self, weights):
        super().__init__(weights)
        self.seen = []

    def logits(self, x: ad.Tensor) -> ad.Tensor:
        self.seen.append(x.data.copy())
        return super().logits(x)


def make_image(seed=0, shape=(1, 3, 8, 8), low=30, high=226):
    rng = np.random.default_rng(seed)
    return rng.integers(low, high, size=shape).astype(np.float32)


def make_model(seed=1, in_dim=192, classes=4, scale=0.01, spy=False):
    rng = np.random.default_rng(seed)
    w = rng.normal(scale=scale, size=(in_dim, classes))
    return SpyModel(w) if spy else LinearModel(w)


def softmax64(logits):
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def ce64(logits, labels):
    p = softmax64(logits)
    n = logits.shape[0]
    return float(-np.log(p[np.arange(n), labels]).mean())


def linear_ce_grad64(model, x, labels):
    """Closed-form float64 input gradient of mean CE for a linear model:
    reshape(W (p - onehot(y)) / batch)."""
    w = model.w.data.astype(np.float64)
    flat = x.reshape(x.shape[0], -1).astype(np.float64)
    p = softmax64(flat @ w)
    p[np.arange(x.shape[0]), labels] -= 1.0
    return ((p @ w.T) / x.shape[0]).reshape(x.shape)


def depthwise_oracle(g, kernel):
    """Nested-loop zero-padded depthwise correlation in float64."""
    b, c, h, w = g.shape
    k = kernel.shape[0]
    half = k // 2
    out = np.zeros((b, c, h, w), dtype=np.float64)
    for bi in range(b):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for u in range(k):
                        for v in range(k):
                            ii, jj = i + u - half, j + v - half
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += float(g[bi, ci, ii, jj]) * float(kernel[u, v])
                    out[bi, ci, i, j] = acc
    return out


def fd_gradient64(f, x, h=1e-3):
    """Central differences of a float64-valued function of a float64 array."""
    x = x.astype(np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


BUDGET8 = atk.AttackBudget(8.0)


# ---------------------------------------------------------------------------
# configuration objects
# ---------------------------------------------------------------------------


class TestAttackBudget:
    def test_defaults(self):
        b = atk.AttackBudget(8.0)
        assert (b.pixel_min, b.pixel_max) == (0.0, 255.0)

    @pytest.mark.parametrize("eps", [0.0, -1.0, 255.5])
    def test_rejects_bad_epsilon(self, eps):
        with pytest.raises(ConfigError):
            atk.AttackBudget(eps)

    def test_full_range_epsilon_allowed(self):
        assert atk.AttackBudget(255.0).epsilon == 255.0


class TestMethodConfig:
    def test_rejects_unknown_base(self):
        with pytest.raises(ConfigError):
            atk.MethodConfig(base="PGD")

    def test_rejects_negative_momentum(self):
        with pytest.raises(ConfigError):
            atk.MethodConfig(momentum_decay=-0.5)

    @pytest.mark.parametrize("p", [-0.1, 1.1])
    def test_resize_pad_probability_range(self, p):
        with pytest.raises(ConfigError):
            atk.DimTransform(probability=p)

    @pytest.mark.parametrize("frac", [0.0, 1.2])
    def test_resize_fraction_range(self, frac):
        with pytest.raises(ConfigError):
            atk.DimTransform(min_resize_fraction=frac)

    @pytest.mark.parametrize("k", [0, 2, 4])
    def test_smoothing_kernel_must_be_odd_positive(self, k):
        with pytest.raises(ConfigError):
            atk.TimTransform(kernel_size=k)

    def test_smoothing_sigma_defaults_to_third_of_kernel(self):
        assert atk.TimTransform(kernel_size=7).resolved_sigma() == pytest.approx(7 / 3)
        assert atk.TimTransform(kernel_size=7, sigma=1.5).resolved_sigma() == 1.5

    def test_scale_copies_must_be_positive(self):
        with pytest.raises(ConfigError):
            atk.SimAggregation(copies=0)

    def test_preset_wiring(self):
        p = atk.METHOD_PRESETS
        assert p["fgsm"].momentum_decay == 0.0 and p["fgsm"].input_transform is None
        assert p["bim"].momentum_decay == 0.0
        assert p["mim"].momentum_decay == 1.0
        assert p["dim"].input_transform == atk.DimTransform(0.7, 0.9)
        assert p["tim"].gradient_transform.kernel_size == 7
        assert p["ti-dim"].input_transform is not None
        assert p["ti-dim"].gradient_transform is not None
        assert p["sim"].loss_aggregation.copies == 5
        assert p["si-ni"].base == "NI" and p["si-ni"].loss_aggregation.copies == 5

    def test_get_method_lookup_passthrough_and_unknown(self):
        cfg = atk.MethodConfig(base="MIM", momentum_decay=0.9)
        assert atk.get_method(cfg) is cfg
        assert atk.get_method("bim") is atk.METHOD_PRESETS["bim"]
        with pytest.raises(ConfigError):
            atk.get_method("carlini")


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


class TestClipToBall:
    def test_arithmetic_examples(self):
        anchor = np.full((1, 1, 1, 4), 90.0, dtype=np.float32)
        x = np.array([[[[100.0, 80.0, 95.0, 90.0]]]], dtype=np.float32)
        out = atk.clip_to_ball(x, anchor, BUDGET8)
        assert out.tolist() == [[[[98.0, 82.0, 95.0, 90.0]]]]

    def test_pixel_range_caps_the_ball(self):
        anchor = np.array([[[[250.0, 3.0]]]], dtype=np.float32)
        x = np.array([[[[260.0, -5.0]]]], dtype=np.float32)
        out = atk.clip_to_ball(x, anchor, BUDGET8)
        assert out.tolist() == [[[[255.0, 0.0]]]]

    def test_interior_points_pass_through_bitwise(self):
        anchor = make_image(3)
        x = anchor + np.float32(4.0)
        assert np.array_equal(atk.clip_to_ball(x, anchor, BUDGET8), x)

    def test_exact_on_integer_anchors(self):
        anchor = make_image(4)
        rng = np.random.default_rng(5)
        x = anchor + rng.integers(-20, 21, size=anchor.shape).astype(np.float32)
        out = atk.clip_to_ball(x, anchor, BUDGET8)
        delta = out.astype(np.float64) - anchor.astype(np.float64)
        assert np.abs(delta).max() <= 8.0
        assert out.min() >= 0.0 and out.max() <= 255.0

    def test_tensor_in_tensor_out(self):
        anchor = ad.Tensor(make_image(6))
        x = ad.Tensor(anchor.data + np.float32(20.0))
        out = atk.clip_to_ball(x, anchor, BUDGET8)
        assert isinstance(out, ad.Tensor)
        assert np.abs(out.data - anchor.data).max() <= 8.0

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            atk.clip_to_ball(
                np.zeros((1, 3, 4, 4), np.float32),
                np.zeros((1, 3, 5, 5), np.float32),
                BUDGET8,
            )


# ---------------------------------------------------------------------------
# Gaussian smoothing
# ---------------------------------------------------------------------------


class TestGaussianKernel:
    def test_matches_closed_form(self):
        k = atk.gaussian_kernel(3, 1.0).data
        raw = np.empty((3, 3), dtype=np.float64)
        for i in range(3):
            for j in range(3):
                raw[i, j] = math.exp(-((i - 1) ** 2 + (j - 1) ** 2) / 2.0)
        expected = raw / raw.sum()
        np.testing.assert_allclose(k, expected, rtol=1e-6)

    def test_normalized_and_symmetric(self):
        k = atk.gaussian_kernel(7, 7 / 3).data
        assert abs(float(k.sum()) - 1.0) < 1e-6
        np.testing.assert_array_equal(k, k.T)
        np.testing.assert_array_equal(k, k[::-1, ::-1])
        assert k[3, 3] == k.max()

    @pytest.mark.parametrize("k,sigma", [(2, 1.0), (0, 1.0), (3, 0.0), (3, -1.0)])
    def test_rejects_bad_parameters(self, k, sigma):
        with pytest.raises(ConfigError):
            atk.gaussian_kernel(k, sigma)


class TestTimSmooth:
    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(7)
        g = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        kernel = atk.gaussian_kernel(5, 5 / 3)
        out = atk.tim_smooth(g, kernel)
        expected = depthwise_oracle(g, kernel.data)
        np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-6)

    def test_identity_kernel_is_bitwise_identity(self):
        g = np.random.default_rng(8).normal(size=(1, 3, 6, 6)).astype(np.float32)
        out = atk.tim_smooth(g, atk.gaussian_kernel(1, 1.0))
        assert np.array_equal(out, g)

    def test_channels_stay_independent(self):
        g = np.zeros((1, 3, 6, 6), dtype=np.float32)
        g[0, 1] = 1.0
        out = atk.tim_smooth(g, atk.gaussian_kernel(3, 1.0))
        assert np.all(out[0, 0] == 0.0) and np.all(out[0, 2] == 0.0)
        assert out[0, 1].sum() > 0.0

    def test_tensor_in_tensor_out(self):
        g = ad.Tensor(np.ones((1, 1, 4, 4), dtype=np.float32))
        out = atk.tim_smooth(g, atk.gaussian_kernel(3, 1.0))
        assert isinstance(out, ad.Tensor)

    def test_rejects_non_square_kernel(self):
        with pytest.raises(ShapeError):
            atk.tim_smooth(
                np.zeros((1, 1, 4, 4), np.float32),
                np.ones((2, 3), np.float32),
            )


# ---------------------------------------------------------------------------
# loss aggregation and ensembles
# ---------------------------------------------------------------------------


class TestSimLoss:
    def test_single_copy_is_bitwise_plain_cross_entropy(self):
        model = make_model()
        x = ad.Tensor(make_image())
        y = np.array([2])
        with ad.ComputationRecord():
            plain = ad.softmax_cross_entropy(model.logits(x), y)
        with ad.ComputationRecord():
            agg = atk.sim_loss(model, x, y, 1)
        assert agg.data == plain.data

    @pytest.mark.parametrize("m", [2, 3])
    def test_value_matches_float64_average(self, m):
        model = make_model()
        x = make_image()
        y = np.array([1])
        with ad.ComputationRecord():
            loss = atk.sim_loss(model, ad.Tensor(x), y, m)
        flat = x.reshape(1, -1).astype(np.float64)
        w = model.w.data.astype(np.float64)
        expected = np.mean([ce64((flat * 0.5**i) @ w, y) for i in range(m)])
        assert loss.item() == pytest.approx(expected, rel=1e-5)

    def test_gradient_matches_finite_differences(self):
        model = make_model(in_dim=48, seed=9)
        x = make_image(10, shape=(1, 3, 4, 4))
        y = np.array([0])
        leaf = ad.Tensor(x, requires_grad=True)
        with ad.ComputationRecord() as rec:
            loss = atk.sim_loss(model, leaf, y, 3)
        ad.backward(rec, loss)
        w = model.w.data.astype(np.float64)

        def f(arr):
            flat = arr.reshape(1, -1)
            return np.mean([ce64((flat * 0.5**i) @ w, y) for i in range(3)])

        fd = fd_gradient64(f, x.astype(np.float64))
        np.testing.assert_allclose(leaf.grad, fd, rtol=1e-3, atol=1e-7)

    def test_rejects_nonpositive_copies(self):
        with pytest.raises(ConfigError):
            atk.sim_loss(make_model(), ad.Tensor(make_image()), np.array([0]), 0)


class TestLogitEnsemble:
    def test_rejects_bad_weights(self):
        models = [make_model(1), make_model(2)]
        with pytest.raises(ConfigError):
            atk.LogitEnsemble(models, [0.5, 0.6])
        with pytest.raises(ConfigError):
            atk.LogitEnsemble(models, [1.5, -0.5])
        with pytest.raises(ConfigError):
            atk.LogitEnsemble(models, [1.0])
        with pytest.raises(ConfigError):
            atk.LogitEnsemble([], [])

    def test_fused_logits_match_manual_mix(self):
        m1, m2 = make_model(11), make_model(12)
        x = make_image(13)
        fused = atk.ensemble_logits([m1, m2], [0.3, 0.7], ad.Tensor(x))
        flat = x.reshape(1, -1).astype(np.float64)
        expected = 0.3 * (flat @ m1.w.data.astype(np.float64)) + 0.7 * (
            flat @ m2.w.data.astype(np.float64)
        )
        np.testing.assert_allclose(fused.data, expected, rtol=1e-5, atol=1e-6)

    def test_single_member_weight_one_is_bitwise_passthrough(self):
        model = make_model(14)
        x = ad.Tensor(make_image(15))
        fused = atk.ensemble_logits([model], [1.0], x)
        assert np.array_equal(fused.data, model.logits(x).data)

    def test_gradient_mixes_member_chains(self):
        m1, m2 = make_model(16), make_model(17)
        x = make_image(18)
        y = np.array([3])
        leaf = ad.Tensor(x, requires_grad=True)
        with ad.ComputationRecord() as rec:
            loss = ad.softmax_cross_entropy(
                atk.ensemble_logits([m1, m2], [0.4, 0.6], leaf), y
            )
        ad.backward(rec, loss)
        w1 = m1.w.data.astype(np.float64)
        w2 = m2.w.data.astype(np.float64)
        flat = x.reshape(1, -1).astype(np.float64)
        fused = 0.4 * (flat @ w1) + 0.6 * (flat @ w2)
        p = softmax64(fused)
        p[0, y[0]] -= 1.0
        expected = (p @ (0.4 * w1 + 0.6 * w2).T).reshape(x.shape)
        np.testing.assert_allclose(leaf.grad, expected, rtol=1e-4, atol=1e-8)


# ---------------------------------------------------------------------------
# input transform
# ---------------------------------------------------------------------------


class TestDimTransform:
    def test_probability_zero_is_identity_and_consumes_no_randomness(self):
        x = ad.Tensor(make_image(20))
        rng = np.random.default_rng(21)
        before = rng.bit_generator.state
        out = atk.dim_transform(x, 0.0, 0.9, rng)
        assert out is x
        assert rng.bit_generator.state == before

    def test_always_fire_full_fraction_keeps_values_bitwise(self):
        x = ad.Tensor(make_image(22))
        rng = np.random.default_rng(23)
        out = atk.dim_transform(x, 1.0, 1.0, rng)
        assert np.array_equal(out.data, x.data)
        assert rng.bit_generator.state != np.random.default_rng(23).bit_generator.state

    def test_matches_manual_resize_and_pad(self):
        side = 8
        x = make_image(24, shape=(1, 3, side, side))
        rng = np.random.default_rng(25)
        out = atk.dim_transform(ad.Tensor(x), 1.0, 0.5, rng)

        replay = np.random.default_rng(25)
        assert replay.random() < 1.0
        r = int(replay.integers(math.ceil(0.5 * side), side + 1))
        top = int(replay.integers(0, side - r + 1))
        left = int(replay.integers(0, side - r + 1))
        resized = np.zeros((1, 3, r, r), dtype=np.float32)
        for i in range(r):
            for j in range(r):
                resized[:, :, i, j] = x[:, :, (i * side) // r, (j * side) // r]
        expected = np.zeros_like(x)
        expected[:, :, top : top + r, left : left + r] = resized
        assert np.array_equal(out.data, expected)

    def test_output_stays_in_pixel_range_and_shape(self):
        x = make_image(26)
        for trial in range(10):
            out = atk.dim_transform(
                ad.Tensor(x), 0.7, 0.9, np.random.default_rng(trial)
            )
            assert out.data.shape == x.shape
            assert out.data.min() >= 0.0 and out.data.max() <= 255.0

    def test_rejects_non_square_images(self):
        x = ad.Tensor(np.zeros((1, 3, 8, 9), dtype=np.float32))
        with pytest.raises(ShapeError):
            atk.dim_transform(x, 1.0, 0.9, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


class TestAttackGradient:
    def _state(self, x):
        return atk.initial_state(ad.Tensor(x))

    def test_plain_gradient_matches_closed_form(self):
        model = make_model()
        x = make_image()
        y = np.array([2])
        g = atk.attack_gradient(
            model, self._state(x), y, atk.METHOD_PRESETS["bim"], 1.0,
            np.random.default_rng(0),
        )
        np.testing.assert_allclose(
            g, linear_ce_grad64(model, x, y), rtol=1e-4, atol=1e-9
        )

    def test_plain_config_consumes_no_randomness(self):
        model = make_model()
        x = make_image()
        rng = np.random.default_rng(31)
        before = rng.bit_generator.state
        atk.attack_gradient(
            model, self._state(x), np.array([0]), atk.METHOD_PRESETS["mim"],
            1.0, rng,
        )
        assert rng.bit_generator.state == before

    def test_targeted_is_negated_cross_entropy_toward_target(self):
        model = make_model()
        x = make_image()
        state = self._state(x)
        rng = np.random.default_rng(0)
        cfg = atk.METHOD_PRESETS["bim"]
        toward = atk.attack_gradient(
            model, state, np.array([1]), cfg, 1.0, rng,
            targeted=True, target_labels=np.array([3]),
        )
        untargeted_at_target = atk.attack_gradient(
            model, state, np.array([3]), cfg, 1.0, rng
        )
        assert np.array_equal(toward, -untargeted_at_target)

    def test_targeted_requires_target_labels(self):
        with pytest.raises(ConfigError):
            atk.attack_gradient(
                make_model(), self._state(make_image()), np.array([0]),
                atk.METHOD_PRESETS["bim"], 1.0, np.random.default_rng(0),
                targeted=True,
            )

    def test_two_class_gradients_are_antiparallel(self):
        model = make_model(seed=33, classes=2, scale=0.0005)
        x = make_image(34)
        state = self._state(x)
        cfg = atk.METHOD_PRESETS["bim"]
        rng = np.random.default_rng(0)
        g0 = atk.attack_gradient(model, state, np.array([0]), cfg, 1.0, rng)
        g1 = atk.attack_gradient(model, state, np.array([1]), cfg, 1.0, rng)
        cosine = float(
            (g0 * g1).sum()
            / (np.linalg.norm(g0.ravel()) * np.linalg.norm(g1.ravel()))
        )
        assert cosine == pytest.approx(-1.0, abs=1e-5)
        mask = (np.abs(g0) > 1e-9) & (np.abs(g1) > 1e-9)
        assert mask.any()
        assert np.array_equal(np.sign(g0)[mask], -np.sign(g1)[mask])

    def test_nesterov_base_evaluates_at_lookahead(self):
        model = make_model(spy=True)
        x = make_image(35)
        state = self._state(x)
        momentum = np.random.default_rng(36).normal(size=x.shape).astype(np.float32)
        state.g = ad.Tensor(momentum)
        cfg = atk.MethodConfig(base="NI", momentum_decay=1.0)
        atk.attack_gradient(model, state, np.array([0]), cfg, 2.0,
                            np.random.default_rng(0))
        expected = x + np.float32(2.0) * np.float32(1.0) * momentum
        assert np.array_equal(model.seen[-1], expected)

    def test_momentum_base_evaluates_at_current_iterate(self):
        model = make_model(spy=True)
        x = make_image(37)
        state = self._state(x)
        state.g = ad.Tensor(np.ones_like(x))
        cfg = atk.MethodConfig(base="MIM", momentum_decay=1.0)
        atk.attack_gradient(model, state, np.array([0]), cfg, 2.0,
                            np.random.default_rng(0))
        assert np.array_equal(model.seen[-1], x)

    def test_smoothing_applies_to_the_raw_gradient(self):
        model = make_model()
        x = make_image(38)
        state = self._state(x)
        rng = np.random.default_rng(0)
        plain = atk.attack_gradient(
            model, state, np.array([1]), atk.METHOD_PRESETS["bim"], 1.0, rng
        )
        cfg = atk.MethodConfig(
            base="BIM", gradient_transform=atk.TimTransform(kernel_size=3)
        )
        smoothed = atk.attack_gradient(model, state, np.array([1]), cfg, 1.0, rng)
        expected = atk.tim_smooth(plain, atk.gaussian_kernel(3, 1.0))
        assert np.array_equal(smoothed, expected)


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


class TestAttackStep:
    def test_plain_step_moves_by_alpha_sign(self):
        x = make_image(40)
        anchor = ad.Tensor(x)
        state = atk.initial_state(anchor)
        raw = np.random.default_rng(41).normal(size=x.shape).astype(np.float32)
        new = atk.attack_step(state, raw, 1.0, atk.METHOD_PRESETS["bim"],
                              anchor, BUDGET8)
        assert np.array_equal(new.x_adv.data, x + np.sign(raw))
        assert new.t == 1 and not new.degenerate
        assert np.array_equal(new.g.data, np.zeros_like(x))

    def test_momentum_accumulation_matches_hand_arithmetic(self):
        x = make_image(42)
        anchor = ad.Tensor(x)
        cfg = atk.MethodConfig(base="MIM", momentum_decay=1.0)
        rng = np.random.default_rng(43)
        raw1 = rng.normal(size=x.shape).astype(np.float32)
        raw2 = rng.normal(size=x.shape).astype(np.float32)

        state = atk.initial_state(anchor)
        state = atk.attack_step(state, raw1, 1.0, cfg, anchor, BUDGET8)
        state = atk.attack_step(state, raw2, 1.0, cfg, anchor, BUDGET8)

        n1 = raw1 / np.abs(raw1).sum(dtype=np.float32)
        g1 = np.float32(1.0) * np.zeros_like(x) + n1
        x1 = atk.clip_to_ball(x + np.float32(1.0) * np.sign(g1), x, BUDGET8)
        n2 = raw2 / np.abs(raw2).sum(dtype=np.float32)
        g2 = np.float32(1.0) * g1 + n2
        x2 = atk.clip_to_ball(x1 + np.float32(1.0) * np.sign(g2), x, BUDGET8)

        assert np.array_equal(state.g.data, g2)
        assert np.array_equal(state.x_adv.data, x2)

    def test_zero_gradient_stalls_position_and_decays_momentum(self):
        x = make_image(44)
        anchor = ad.Tensor(x)
        cfg = atk.MethodConfig(base="MIM", momentum_decay=0.5)
        state = atk.initial_state(anchor)
        state.g = ad.Tensor(np.full_like(x, 2.0))
        log = atk.RunLog()
        new = atk.attack_step(state, np.zeros_like(x), 1.0, cfg, anchor,
                              BUDGET8, log=log)
        assert new.degenerate
        assert log.degenerate_steps == 1
        assert np.array_equal(new.x_adv.data, x)
        assert np.array_equal(new.g.data, np.full_like(x, 1.0))

    def test_zero_gradient_without_momentum_stalls_too(self):
        x = make_image(45)
        anchor = ad.Tensor(x)
        state = atk.initial_state(anchor)
        new = atk.attack_step(state, np.zeros_like(x), 1.0,
                              atk.METHOD_PRESETS["bim"], anchor, BUDGET8)
        assert new.degenerate and np.array_equal(new.x_adv.data, x)

    def test_rejects_nonpositive_alpha(self):
        x = make_image(46)
        anchor = ad.Tensor(x)
        state = atk.initial_state(anchor)
        for alpha in (0.0, -1.0):
            with pytest.raises(ConfigError):
                atk.attack_step(state, np.ones_like(x), alpha,
                                atk.METHOD_PRESETS["bim"], anchor, BUDGET8)

    def test_oversized_step_lands_exactly_on_the_ball_boundary(self):
        x = make_image(47, low=30, high=220)
        anchor = ad.Tensor(x)
        state = atk.initial_state(anchor)
        raw = np.where(np.indices(x.shape).sum(axis=0) % 2 == 0, 1.0, -1.0)
        raw = raw.astype(np.float32)
        new = atk.attack_step(state, raw, 100.0, atk.METHOD_PRESETS["bim"],
                              anchor, BUDGET8)
        delta = new.x_adv.data.astype(np.float64) - x.astype(np.float64)
        assert np.all(np.abs(delta) == 8.0)


# ---------------------------------------------------------------------------
# full runs and reductions
# ---------------------------------------------------------------------------


class TestRunAttack:
    def test_rejects_nonpositive_steps(self):
        with pytest.raises(ConfigError):
            atk.run_attack(
                make_model(), make_image(), np.array([0]),
                atk.METHOD_PRESETS["bim"], 0, 1.0, BUDGET8,
                np.random.default_rng(0),
            )

    def test_constraints_hold_and_log_fills(self):
        model = make_model()
        x = make_image(50)
        y = np.array([1])
        log = atk.RunLog()
        adv = atk.run_attack(model, x, y, atk.METHOD_PRESETS["mim"], 10, 1.0,
                             BUDGET8, np.random.default_rng(0), log=log)
        delta = adv.data.astype(np.float64) - x.astype(np.float64)
        assert np.abs(delta).max() <= 8.0
        assert adv.data.min() >= 0.0 and adv.data.max() <= 255.0
        assert log.steps == 10
        assert 0.0 < log.max_linf <= 8.0

    def test_untargeted_run_increases_the_loss(self):
        model = make_model(seed=51)
        x = make_image(52)
        logits0 = model.logits(ad.Tensor(x)).data
        y = np.array([int(logits0.argmax())])
        adv = atk.run_attack(model, x, y, atk.METHOD_PRESETS["bim"], 5, 1.0,
                             BUDGET8, np.random.default_rng(0))
        before = ce64(logits0, y)
        after = ce64(model.logits(adv).data, y)
        assert after > before

    def test_targeted_run_decreases_loss_toward_target(self):
        model = make_model(seed=53)
        x = make_image(54)
        logits0 = model.logits(ad.Tensor(x)).data
        y = np.array([int(logits0.argmax())])
        target = np.array([(y[0] + 1) % 4])
        adv = atk.run_attack(model, x, y, atk.METHOD_PRESETS["bim"], 5, 1.0,
                             BUDGET8, np.random.default_rng(0),
                             targeted=True, target_labels=target)
        assert ce64(model.logits(adv).data, target) < ce64(logits0, target)

    def test_single_step_of_size_epsilon_is_the_one_step_attack(self):
        model = make_model(seed=55)
        x = make_image(56)
        y = np.array([2])
        one = atk.fgsm(model, x, y, 8.0)
        iterated = atk.run_attack(model, x, y, atk.METHOD_PRESETS["bim"], 1,
                                  8.0, BUDGET8, np.random.default_rng(0))
        assert np.array_equal(one.data, iterated.data)

    def test_one_step_attack_matches_manual_sign_step(self):
        model = make_model(seed=57)
        x = make_image(58)
        y = np.array([1])
        adv = atk.fgsm(model, x, y, 8.0)
        state = atk.initial_state(ad.Tensor(x))
        g = atk.attack_gradient(model, state, y, atk.METHOD_PRESETS["fgsm"],
                                8.0, np.random.default_rng(0))
        expected = atk.clip_to_ball(x + np.float32(8.0) * np.sign(g), x, BUDGET8)
        assert np.array_equal(adv.data, expected)

    def test_zero_momentum_reduces_to_plain_iteration_bitwise(self):
        model = make_model(seed=59)
        x = make_image(60)
        y = np.array([0])
        bim = atk.run_attack(model, x, y, atk.METHOD_PRESETS["bim"], 5, 1.0,
                             BUDGET8, np.random.default_rng(0))
        mim0 = atk.run_attack(model, x, y,
                              atk.MethodConfig(base="MIM", momentum_decay=0.0),
                              5, 1.0, BUDGET8, np.random.default_rng(0))
        assert np.array_equal(bim.data, mim0.data)

    def test_identity_transforms_reduce_to_plain_gradient_bitwise(self):
        model = make_model(seed=61)
        x = make_image(62)
        y = np.array([3])
        decorated_cfg = atk.MethodConfig(
            base="BIM",
            input_transform=atk.DimTransform(probability=0.0),
            gradient_transform=atk.TimTransform(kernel_size=1),
            loss_aggregation=atk.SimAggregation(copies=1),
        )
        rng_plain = np.random.default_rng(63)
        rng_dec = np.random.default_rng(63)
        plain = atk.run_attack(model, x, y, atk.METHOD_PRESETS["bim"], 5, 1.0,
                               BUDGET8, rng_plain)
        decorated = atk.run_attack(model, x, y, decorated_cfg, 5, 1.0,
                                   BUDGET8, rng_dec)
        assert np.array_equal(plain.data, decorated.data)
        assert rng_plain.bit_generator.state == rng_dec.bit_generator.state

    def test_full_fraction_resize_pad_changes_nothing_but_the_stream(self):
        model = make_model(seed=64)
        x = make_image(65)
        y = np.array([1])
        cfg = atk.MethodConfig(
            base="BIM",
            input_transform=atk.DimTransform(probability=1.0, min_resize_fraction=1.0),
        )
        plain = atk.run_attack(model, x, y, atk.METHOD_PRESETS["bim"], 3, 1.0,
                               BUDGET8, np.random.default_rng(66))
        padded = atk.run_attack(model, x, y, cfg, 3, 1.0, BUDGET8,
                                np.random.default_rng(66))
        assert np.array_equal(plain.data, padded.data)

    def test_same_seed_same_output_with_random_transform(self):
        model = make_model(seed=67)
        x = make_image(68)
        y = np.array([2])
        cfg = atk.METHOD_PRESETS["dim"]
        a = atk.run_attack(model, x, y, cfg, 4, 2.0, BUDGET8,
                           np.random.default_rng(69))
        b = atk.run_attack(model, x, y, cfg, 4, 2.0, BUDGET8,
                           np.random.default_rng(69))
        assert np.array_equal(a.data, b.data)
