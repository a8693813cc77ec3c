import math

import numpy as np
import pytest
from scipy import stats

from implicit_depth.synth import Sequence, generate_dataset
from implicit_depth.training import (FrameData, TrainConfig, corrupt_previous, sample_queries, sample_query,
                                     sample_virtual_depths, train_implicit, train_regression,
                                     write_history_csv)


@pytest.fixture(scope="module")
def one_frame():
    seq = generate_dataset(11, 1, 2)[0]
    return [Sequence(seq.frames[:1], seq.intrinsics)]


class TestVirtualDepthSampling:
    def test_gaussian_branch_std(self):
        rng = np.random.default_rng(0)
        real = np.full(10_000, 3.0)
        d, gauss = sample_virtual_depths(real, 0.5, 6.0, rng, q=1.0, variance=0.05)
        assert gauss.all()
        assert np.std(d - 3.0) == pytest.approx(math.sqrt(0.05), rel=0.05)

    def test_uniform_branch_distribution(self):
        rng = np.random.default_rng(1)
        d, gauss = sample_virtual_depths(np.full(5000, 2.0), 1.0, 4.0, rng, q=0.0, variance=0.05)
        assert not gauss.any()
        assert stats.kstest(d, stats.uniform(loc=1.0, scale=3.0).cdf).pvalue > 0.01

    def test_gaussian_resamples_non_positive(self):
        rng = np.random.default_rng(2)
        d, _ = sample_virtual_depths(np.full(20_000, 0.1), 0.1, 0.2, rng, q=1.0, variance=0.05)
        assert d.min() > 0.05

    def test_branch_fraction(self):
        rng = np.random.default_rng(3)
        _, gauss = sample_virtual_depths(np.full(100_000, 2.0), 0.5, 5.0, rng, q=0.25, variance=0.05)
        assert gauss.mean() == pytest.approx(0.25, abs=0.01)


class TestCorruptPrevious:
    def test_sentinel_always(self):
        out = corrupt_previous(np.ones(100), np.random.default_rng(0), p1=0.0, p2=1.0)
        assert np.all(out == -1.0)

    def test_pass_through(self):
        out = corrupt_previous(np.ones(50), np.random.default_rng(0), p1=0.0, p2=0.0, noise=0.0)
        np.testing.assert_array_equal(out, 1.0)

    def test_forced_flip(self):
        out = corrupt_previous(np.ones(50), np.random.default_rng(0), p1=1.0, p2=0.0, noise=0.0)
        np.testing.assert_array_equal(out, 0.0)

    def test_soft_values_stay_on_their_side(self):
        rng = np.random.default_rng(4)
        y = rng.integers(0, 2, 10_000).astype(float)
        out = corrupt_previous(y, rng, p1=0.0, p2=0.0)
        assert np.all(np.abs(out - y) <= 0.3)

    def test_fractions(self):
        out = corrupt_previous(np.ones(100_000), np.random.default_rng(5))
        sentinel = out == -1
        assert sentinel.mean() == pytest.approx(0.25, abs=0.01)
        assert (out[~sentinel] < 0.5).mean() == pytest.approx(0.25, abs=0.01)


class TestQueries:
    def test_label_definition(self, one_frame):
        frame = one_frame[0].frames[0]
        data = FrameData(frame)
        s = sample_queries(data, np.random.default_rng(0), 2000, TrainConfig())
        real = frame.depth_gt.values[s["v"].astype(int), s["u"].astype(int)]
        np.testing.assert_array_equal(s["label"], (s["depth"] > real).astype(float))

    def test_one_metre_behind_is_positive(self, one_frame):
        frame = one_frame[0].frames[0]
        data = FrameData(frame)
        data.d_min = data.d_max = float(data.depth_values.max()) + 1.0   # uniform branch lands behind everything
        cfg = TrainConfig(q=0.0)
        s = sample_queries(data, np.random.default_rng(0), 200, cfg)
        assert np.all(s["label"] == 1.0)

    def test_edges_match_sobel_mask(self, one_frame):
        data = FrameData(one_frame[0].frames[0])
        s = sample_queries(data, np.random.default_rng(0), 5000, TrainConfig())
        np.testing.assert_array_equal(s["is_edge"], data.edges[s["v"].astype(int), s["u"].astype(int)])
        assert 0 < s["is_edge"].mean() < 0.2

    def test_non_temporal_uses_sentinel(self, one_frame):
        s = sample_queries(FrameData(one_frame[0].frames[0]), np.random.default_rng(0), 100,
                           TrainConfig(temporal=False))
        assert np.all(s["prev"] == -1.0)

    def test_single_query(self, one_frame):
        q = sample_query(one_frame[0].frames[0], np.random.default_rng(0))
        assert q.label in (0, 1) and q.d_virtual > 0


class TestConfig:
    def test_lr_schedule(self):
        cfg = TrainConfig(steps=100, lr=1e-3)
        assert cfg.lr_at(0) == 1e-3 and cfg.lr_at(59) == 1e-3
        assert cfg.lr_at(60) == pytest.approx(1e-4) and cfg.lr_at(85) == pytest.approx(1e-5)

    def test_round_trip(self):
        cfg = TrainConfig(steps=7, encoder_strides=(2, 1, 1, 1))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("bad", [{"q": 1.5}, {"lambda_reg": -1}, {"steps": 0}, {"bogus": 1}])
    def test_rejects_bad_values(self, bad):
        with pytest.raises(ValueError):
            TrainConfig.from_dict(bad)


class TestTraining:
    def test_implicit_overfit_200_steps(self, one_frame):
        # threshold calibrated on this generator: 0.18-0.36 over eight probe frames
        cfg = TrainConfig(steps=200, images_per_step=1, samples_per_image=512, seed=0)
        hist = train_implicit(one_frame, cfg).history
        first = np.mean([h["bce"] for h in hist[:10]])
        last = np.mean([h["bce"] for h in hist[-20:]])
        assert last < 0.4 and last < 0.5 * first

    def test_implicit_overfit_400_steps(self, one_frame):
        cfg = TrainConfig(steps=400, images_per_step=1, samples_per_image=512, seed=0)
        hist = train_implicit(one_frame, cfg).history
        assert np.mean([h["bce"] for h in hist[-20:]]) < 0.25

    def test_zero_lambda_is_pure_bce(self, one_frame):
        from implicit_depth.nn import ImplicitModel, QueryBatch, implicit_loss
        cfg = TrainConfig(samples_per_image=256)
        frame = one_frame[0].frames[0]
        s = sample_queries(FrameData(frame), np.random.default_rng(0), 256, cfg)
        assert s["is_edge"].any()
        batch = QueryBatch(frame.rgb[None], np.zeros(256, int), s["u"], s["v"], s["depth"], s["prev"],
                           s["label"], s["is_edge"])
        model = ImplicitModel(cfg.model_config("implicit"))
        total, bce, _ = implicit_loss(model, batch, lambda_reg=0.0)
        assert float(total.data) == float(bce.data)
        total, bce, reg = implicit_loss(model, batch, lambda_reg=0.5)
        assert float(total.data) == pytest.approx(float(bce.data) + 0.5 * float(reg.data))

    def test_regression_overfits_single_frame(self, one_frame):
        cfg = TrainConfig(steps=200, images_per_step=1, seed=0)
        hist = train_regression(one_frame, cfg).history
        assert np.mean([h["total"] for h in hist[-20:]]) < 0.1

    def test_regression_output_range(self, one_frame, rng):
        model = train_regression(one_frame, TrainConfig(steps=2, images_per_step=1)).model
        for w in (0.0, 50.0, -50.0):
            model.head_bias.data[...] = w
            d = model.predict_depth(rng.random((64, 96, 3)))
            assert d.min() >= 0.25 * (1 - 1e-6) and d.max() <= 10.0 * (1 + 1e-6)

    def test_same_seed_same_history(self, one_frame, tmp_path):
        cfg = TrainConfig(steps=15, images_per_step=1, samples_per_image=64, seed=3)
        a = train_implicit(one_frame, cfg).history
        b = train_implicit(one_frame, cfg).history
        assert a == b
        write_history_csv(a, tmp_path / "a.csv")
        write_history_csv(b, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_different_seed_different_history(self, one_frame):
        base = dict(steps=5, images_per_step=1, samples_per_image=64)
        a = train_implicit(one_frame, TrainConfig(seed=0, **base)).history
        b = train_implicit(one_frame, TrainConfig(seed=1, **base)).history
        assert a != b

    def test_warm_start_copies_encoder(self, one_frame, tmp_path):
        cfg = TrainConfig(steps=3, images_per_step=1, samples_per_image=32, checkpoint=str(tmp_path / "r.ckpt"))
        reg = train_regression(one_frame, cfg).model
        cfg2 = TrainConfig(steps=1, images_per_step=1, samples_per_image=32, lr=1e-12,
                           warm_start=str(tmp_path / "r.ckpt"))
        imp = train_implicit(one_frame, cfg2).model
        for a, b in zip(reg.encoder.parameters(), imp.encoder.parameters()):
            np.testing.assert_allclose(a.data, b.data, atol=1e-9)
