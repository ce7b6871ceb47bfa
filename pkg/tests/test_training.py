import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nwcrf.autodiff import Variable, gradcheck
from nwcrf.config import (ExperimentConfig, LossConfig, build_config, load_config, parse_lines,
                          to_lines)
from nwcrf.data import (DepthSample, downsample_target, make_dataset, split_seeds, synth_scene,
                        upsample_nearest)
from nwcrf.errors import ConfigError, ContractError, DomainError, ShapeError
from nwcrf.metrics import CSV_HEADER, MetricsReport, evaluate, read_metrics_csv
from nwcrf.optim import OptimizerState, adam_step, lr_at
from nwcrf.train import silog_loss, train

TINY_OVERRIDES = {
    "model.heads": "2, 2, 1, 1", "model.head_dim": "4", "model.encoder_widths": "4, 6, 8, 8",
    "model.window_size": "2", "data.height": "32", "data.width": "32",
    "data.train_size": "6", "data.val_size": "3", "train.batch_size": "2", "train.eval_every": "2",
}


def sample(depth, mask=None):
    depth = np.asarray(depth, dtype=float)
    mask = np.ones(depth.shape, bool) if mask is None else mask
    return DepthSample(np.zeros(depth.shape + (3,)), np.where(mask, depth, 0.0), mask)


class TestSilog:
    gt = np.random.default_rng(0).uniform(0.5, 10.0, size=(8, 8))

    def test_perfect(self):
        assert silog_loss(self.gt, self.gt, np.ones((8, 8), bool)).value == 0.0

    def test_e_fold_scaling(self):
        loss = silog_loss(np.e * self.gt, self.gt, np.ones((8, 8), bool)).value
        assert loss == pytest.approx(10 * np.sqrt(0.15), abs=1e-9)

    def test_full_scale_invariance(self):
        loss = silog_loss(3.7 * self.gt, self.gt, np.ones((8, 8), bool), LossConfig(lam=1.0)).value
        assert loss == pytest.approx(0.0, abs=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-2, 2), st.floats(0, 1), st.floats(0.1, 20))
    def test_constant_log_error_closed_form(self, mu, lam, alpha):
        loss = silog_loss(np.exp(mu) * self.gt, self.gt, np.ones((8, 8), bool), LossConfig(lam, alpha)).value
        assert loss == pytest.approx(alpha * np.sqrt(1 - lam) * abs(mu), abs=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (4, 4), elements=st.floats(0.1, 10)), st.floats(0, 1))
    def test_nonnegative(self, pred, lam):
        assert silog_loss(pred, self.gt[:4, :4], np.ones((4, 4), bool), LossConfig(lam=lam)).value >= 0

    def test_ignores_invalid_pixels(self):
        mask = np.random.default_rng(1).random((8, 8)) > 0.3
        pred = np.random.default_rng(2).uniform(1, 5, size=(8, 8))
        changed = np.where(mask, pred, 123.0)
        assert silog_loss(pred, self.gt, mask).value == silog_loss(changed, self.gt, mask).value

    def test_gradient(self):
        rng = np.random.default_rng(3)
        pred = Variable(rng.uniform(0.5, 8.0, size=(2, 6, 6)))
        gt = rng.uniform(0.5, 8.0, size=(2, 6, 6))
        mask = rng.random((2, 6, 6)) > 0.2
        assert gradcheck(lambda: silog_loss(pred, gt, mask), [pred]) < 1e-4

    def test_batch_is_mean_of_images(self):
        rng = np.random.default_rng(4)
        pred, gt = rng.uniform(1, 5, size=(2, 4, 4)), rng.uniform(1, 5, size=(2, 4, 4))
        m = np.ones((2, 4, 4), bool)
        singles = [silog_loss(pred[i], gt[i], m[i]).value for i in range(2)]
        assert silog_loss(pred, gt, m).value == pytest.approx(np.mean(singles), abs=1e-14)

    def test_errors(self):
        with pytest.raises(ContractError):
            silog_loss(self.gt, self.gt, np.zeros((8, 8), bool))
        with pytest.raises(ContractError):
            silog_loss(self.gt[:4], self.gt, np.ones((8, 8), bool))
        with pytest.raises(DomainError):
            silog_loss(-self.gt, self.gt, np.ones((8, 8), bool))

    def test_invalid_loss_config(self):
        with pytest.raises(ContractError):
            LossConfig(lam=1.5)
        with pytest.raises(ContractError):
            LossConfig(alpha=0.0)


class TestAdam:
    def test_first_step_magnitude(self):
        p = {"w": np.zeros(3)}
        adam_step(p, {"w": np.ones(3)}, OptimizerState(), lr=1e-3)
        assert np.allclose(p["w"], -1e-3 / (1 + 1e-8), rtol=0, atol=1e-15)

    def test_zero_gradient_fixed_point(self):
        p = {"w": np.array([1.0, -2.0])}
        state = OptimizerState()
        for _ in range(5):
            adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
        assert np.array_equal(p["w"], [1.0, -2.0])

    def test_sign_symmetry(self):
        g = np.array([0.3, -1.2, 5.0])
        p = {"a": np.zeros(3), "b": np.zeros(3)}
        state = OptimizerState()
        for _ in range(3):
            adam_step(p, {"a": g, "b": -g}, state, lr=0.01)
        assert np.array_equal(p["a"], -p["b"])

    def test_against_reference_recurrence(self):
        rng = np.random.default_rng(5)
        grads = rng.normal(size=(4, 2))
        p = {"w": np.zeros(2)}
        state = OptimizerState(beta1=0.8, beta2=0.95, eps=1e-6)
        m = v = np.zeros(2)
        ref = np.zeros(2)
        for t, g in enumerate(grads, 1):
            adam_step(p, {"w": g}, state, lr=0.05)
            m = 0.8 * m + 0.2 * g
            v = 0.95 * v + 0.05 * g * g
            ref = ref - 0.05 * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.95**t)) + 1e-6)
        assert np.allclose(p["w"], ref, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState(), 0.1)

    def test_schedule(self):
        assert lr_at(0, 2000) == 1e-4
        assert lr_at(2000, 2000) == pytest.approx(1e-5, abs=1e-20)
        assert lr_at(1000, 2000) == pytest.approx(5.5e-5, abs=1e-20)


class TestMetrics:
    gt = np.random.default_rng(6).uniform(0.5, 9.0, size=(8, 8))

    def test_identity(self):
        r = evaluate(self.gt, sample(self.gt), cap=10)
        assert r.abs_rel == r.sq_rel == r.rmse == r.rmse_log == r.log10 == r.silog == r.irmse == 0.0
        assert r.delta1 == r.delta2 == r.delta3 == 1.0

    def test_uniform_ten_percent(self):
        r = evaluate(1.1 * self.gt, sample(self.gt), cap=80)
        assert r.abs_rel == pytest.approx(0.1, abs=1e-12)
        assert r.delta1 == 1.0

    def test_strict_threshold(self):
        gt = np.full((4, 4), 2.0)
        assert evaluate(1.25 * gt, sample(gt), cap=80).delta1 == 0.0
        assert evaluate(gt / 1.25, sample(gt), cap=80).delta1 == 0.0

    def test_closed_form_values(self):
        gt = np.array([[1.0, 2.0], [4.0, 8.0]])
        pred = np.array([[2.0, 2.0], [2.0, 2.0]])
        r = evaluate(pred, sample(gt), cap=80)
        assert r.abs_rel == pytest.approx((1 + 0 + 0.5 + 0.75) / 4)
        assert r.sq_rel == pytest.approx((1 + 0 + 1 + 4.5) / 4)
        assert r.rmse == pytest.approx(np.sqrt((1 + 0 + 4 + 36) / 4))
        # ratios 2, 1, 2, 4: only the exact match beats 1.25^3 = 1.953
        assert r.delta1 == r.delta2 == r.delta3 == 0.25

    def test_cap_clamps_before_metrics(self):
        gt = np.full((2, 2), 50.0)
        assert evaluate(np.full((2, 2), 30.0), sample(gt), cap=10).abs_rel == 0.0
        assert evaluate(np.full((2, 2), 30.0), sample(gt), cap=80).abs_rel > 0

    def test_delta_symmetric_abs_rel_not(self):
        rng = np.random.default_rng(7)
        a, b = rng.uniform(1, 5, (6, 6)), rng.uniform(1, 5, (6, 6))
        ab, ba = evaluate(a, sample(b), 10), evaluate(b, sample(a), 10)
        assert (ab.delta1, ab.delta2, ab.delta3) == (ba.delta1, ba.delta2, ba.delta3)
        assert ab.abs_rel != ba.abs_rel

    def test_permutation_and_invalid_pixels(self):
        rng = np.random.default_rng(8)
        pred = rng.uniform(1, 5, (6, 6))
        mask = rng.random((6, 6)) > 0.3
        base = evaluate(pred, sample(self.gt[:6, :6], mask), 10)
        perm = rng.permutation(36)
        shuffled = evaluate(pred.reshape(-1)[perm].reshape(6, 6),
                            sample(self.gt[:6, :6].reshape(-1)[perm].reshape(6, 6),
                                   mask.reshape(-1)[perm].reshape(6, 6)), 10)
        assert np.allclose(base.values(), shuffled.values(), rtol=1e-12)
        changed = np.where(mask, pred, 99.0)
        assert evaluate(changed, sample(self.gt[:6, :6], mask), 10) == base

    def test_upsamples_quarter_prediction(self):
        gt = upsample_nearest(np.random.default_rng(9).uniform(1, 5, (4, 4)), 4)
        low = gt[::4, ::4]
        assert evaluate(low, sample(gt), 10).abs_rel == 0.0
        with pytest.raises(ShapeError):
            evaluate(np.ones((3, 3)), sample(gt), 10)

    def test_csv_round_trip(self):
        r = evaluate(1.1 * self.gt, sample(self.gt), cap=10)
        text = r.to_csv()
        assert CSV_HEADER in text.splitlines()
        assert read_metrics_csv(text) == MetricsReport(*[float(f"{v:.9g}") for v in r.values()])


class TestData:
    def test_deterministic(self):
        a, b = synth_scene(5, 64, 64), synth_scene(5, 64, 64)
        assert np.array_equal(a.image, b.image) and np.array_equal(a.depth, b.depth)

    def test_depth_range(self):
        for seed in range(10):
            s = synth_scene(seed, 32, 64)
            d = s.depth[s.mask]
            assert d.min() >= 0.5 and d.max() <= 10.0
            assert np.all(s.depth[~s.mask] == 0)

    def test_different_seeds_differ(self):
        for seed in range(100):
            a, b = synth_scene(2 * seed, 32, 32), synth_scene(2 * seed + 1, 32, 32)
            differs = np.any(np.abs(a.image - b.image) > 1e-6, axis=-1)
            assert differs.mean() >= 0.01

    def test_extents_checked(self):
        with pytest.raises(ContractError):
            synth_scene(0, 40, 64)

    def test_split_seeds_disjoint(self):
        tr, va = split_seeds(0, 200, 50)
        assert len(set(tr) | set(va)) == 250
        assert split_seeds(1, 3, 1) != split_seeds(0, 3, 1)

    def test_downsample_masked_mean(self):
        depth = np.array([[1.0, 3.0], [0.0, 5.0]])
        mask = np.array([[True, True], [False, True]])
        d, m = downsample_target(depth, mask, 2)
        assert d[0, 0] == pytest.approx(3.0) and not m[0, 0]
        d, m = downsample_target(depth, np.ones((2, 2), bool), 2)
        assert d[0, 0] == pytest.approx(2.25) and m[0, 0]


class TestConfig:
    def test_defaults(self):
        cfg = build_config({})
        assert (cfg.data.height, cfg.data.train_size, cfg.train.steps, cfg.train.batch_size) == (64, 200, 2000, 4)
        assert cfg.adam.beta2 == 0.999 and cfg.loss.lam == 0.85

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            build_config({"model.windw_size": "3"})
        assert info.value.key == "model.windw_size"

    def test_bad_value_names_key(self):
        with pytest.raises(ConfigError) as info:
            build_config({"train.steps": "many"})
        assert info.value.key == "train.steps"

    def test_out_of_range_value(self):
        with pytest.raises(ConfigError):
            build_config({"loss.lambda": "2"})

    def test_bare_key_resolves_uniquely(self):
        assert build_config({"steps": "10"}).train.steps == 10
        with pytest.raises(ConfigError):
            build_config({"beta": "1"})

    def test_round_trip(self):
        cfg = build_config({"model.heads": "3, 2, 1, 1", "train.lr_start": "0.0003", "seed": "4"})
        assert build_config(parse_lines(to_lines(cfg))) == cfg
        assert cfg.model.seed == 4

    def test_file_and_override_precedence(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("# comment\ntrain.steps = 50  # trailing\nseed = 2\n", encoding="utf-8")
        assert load_config(path).train.steps == 50
        assert load_config(path, ["steps=10"]).train.steps == 10

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")

    def test_malformed_line(self):
        with pytest.raises(ConfigError):
            parse_lines(["no equals sign here"])


class TestTrain:
    def cfg(self, **extra) -> ExperimentConfig:
        return build_config({**TINY_OVERRIDES, **extra})

    def test_zero_steps_keeps_initialization(self):
        from nwcrf.model import DepthNet
        cfg = self.cfg()
        result = train(cfg, steps=0)
        init = DepthNet.init(cfg.model).state_dict()
        assert result.losses == [] and result.checkpoint.optimizer is None
        assert all(np.array_equal(result.checkpoint.tensors[k], v) for k, v in init.items())

    def test_deterministic(self):
        a, b = train(self.cfg(), steps=3), train(self.cfg(), steps=3)
        assert a.losses == b.losses
        assert all(a.checkpoint.tensors[k].tobytes() == v.tobytes() for k, v in b.checkpoint.tensors.items())

    def test_eval_schedule_and_state(self):
        result = train(self.cfg(), steps=5)
        assert [s for s, _ in result.metrics] == [2, 4, 5]
        assert result.checkpoint.optimizer.step == 5 and result.checkpoint.step == 5
        assert [lr for _, lr, _ in result.losses][0] == 1e-4

    def test_loss_decreases_on_repeated_batch(self):
        cfg = self.cfg(**{"data.train_size": "2", "data.val_size": "0",
                          "train.lr_start": "3e-3", "train.lr_end": "3e-3"})
        losses = [l for _, _, l in train(cfg, steps=40).losses]
        assert np.mean(losses[-5:]) < 0.7 * np.mean(losses[:5])
