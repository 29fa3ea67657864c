import numpy as np
import pytest

from ddrnerf import checkpoint as ck
from ddrnerf import trainer
from ddrnerf.errors import ShapeMismatchError, TrainingAborted
from ddrnerf.trainer import AdamState, TrainConfig, adam_step


def small_cfg(**kw):
    base = dict(iterations=12, batch_size=64, samples_per_ray=16, lr_field=0.05, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small(toy):
    _, ds, _ = toy
    return ds, trainer.init_field(ds, 8)


class TestAdam:
    def test_zero_gradient(self, rng):
        p = rng.normal(size=5).astype(np.float32)
        q = p.copy()
        adam_step({"a": q}, {"a": np.zeros(5)}, AdamState(), 0.1)
        np.testing.assert_array_equal(q, p)

    def test_first_step_is_signed_lr(self):
        p = np.zeros(4, np.float32)
        g = np.array([3.0, -0.2, 1e-2, -50.0])
        adam_step({"a": p}, {"a": g}, AdamState(), 0.01)
        # m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
        np.testing.assert_allclose(p, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-6)

    def test_hand_evaluated_second_step(self):
        p = np.array([1.0], np.float32)
        st = AdamState()
        for g in (2.0, -1.0):
            adam_step({"a": p}, {"a": np.array([g])}, st, 0.1)
        m = 0.9 * 0.1 * 2.0 + 0.1 * -1.0
        v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0
        step2 = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
        assert p[0] == pytest.approx(1.0 - 0.1 - step2, rel=1e-6)
        assert st.step == 2

    def test_groups_scale_with_rate(self):
        a, b = np.zeros(3, np.float32), np.zeros(3, np.float32)
        g = np.ones(3)
        adam_step({"a": a, "b": b}, {"a": g, "b": g}, AdamState(), {"a": 0.1, "b": 0.01})
        np.testing.assert_allclose(a, 10 * b, rtol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            adam_step({"a": np.zeros(3)}, {"a": np.zeros(4)}, AdamState(), 0.1)


class TestConfig:
    def test_round_trip(self):
        c = small_cfg(lambdas=(1, 0, 0, 0, 0))
        assert TrainConfig.from_dict(c.to_dict()) == c

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"itterations": 3})

    @pytest.mark.parametrize("kw", [{"iterations": 0}, {"lr_field": 0}, {"lr_camera": -1}, {"batch_size": 48}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            small_cfg(**kw)


def test_batches_are_pixel_runs(small):
    ds, _ = small
    b = trainer.sample_batch(ds, small_cfg(), 5)
    px = b.pixels.reshape(2, 32, 2)
    assert np.all(np.diff(px[..., 0], axis=1) == 1) and np.all(np.ptp(px[..., 1], axis=1) == 0)
    b2 = trainer.sample_batch(ds, small_cfg(), 5)
    np.testing.assert_array_equal(b.pixels, b2.pixels)


def test_same_seed_bitwise_identical(small, tmp_path):
    ds, fld = small
    for d in ("a", "b"):
        trainer.train(ds, fld, ds.rig, small_cfg(), tmp_path / d)
    for name in ("metrics.csv", "checkpoint.bin", "config.resolved.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seed_differs(small, tmp_path):
    ds, fld = small
    trainer.train(ds, fld, ds.rig, small_cfg(), tmp_path / "a")
    trainer.train(ds, fld, ds.rig, small_cfg(seed=4), tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_resume_matches_uninterrupted(small, tmp_path):
    ds, fld = small
    cfg = small_cfg(iterations=20)
    trainer.train(ds, fld, ds.rig, cfg, tmp_path / "full")
    trainer.train(ds, fld, ds.rig, small_cfg(iterations=10), tmp_path / "part")
    trainer.resume(ds, ds.rig, cfg, tmp_path / "part")
    assert (tmp_path / "full" / "metrics.csv").read_text() == (tmp_path / "part" / "metrics.csv").read_text()
    assert (tmp_path / "full" / "checkpoint.bin").read_bytes() == (tmp_path / "part" / "checkpoint.bin").read_bytes()


def test_zero_camera_rate_equals_frozen(small):
    ds, fld = small
    a = trainer.train(ds, fld, ds.rig, small_cfg(lr_camera=0.0, lr_focal=0.0))
    b = trainer.train(ds, fld, ds.rig, small_cfg(learn_camera=False))
    np.testing.assert_array_equal(a.field.params, b.field.params)
    assert a.history == b.history
    assert not np.any(a.rig.xi) and not np.any(a.rig.delta_f)


def test_camera_learning_moves_residuals(small):
    ds, fld = small
    r = trainer.train(ds, fld, ds.rig, small_cfg(iterations=3, lr_camera=1e-3))
    assert np.any(r.rig.xi != 0)


def test_nan_aborts_with_checkpoint(small, tmp_path):
    ds, fld = small
    bad = fld.params.copy()
    bad[...] = np.nan
    from ddrnerf.field import GridField

    with pytest.raises(TrainingAborted) as e:
        trainer.train(ds, GridField(bad, fld.bbox), ds.rig, small_cfg(), tmp_path)
    assert e.value.checkpoint is not None
    assert ck.load(e.value.checkpoint).extra.get("aborted") is True


def test_metrics_csv_columns(small, tmp_path):
    ds, fld = small
    trainer.train(ds, fld, ds.rig, small_cfg(iterations=3), tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "iteration,rgb,depth,weight,density,grad,total"
    assert len(lines) == 4 and lines[1].startswith("0,")


def test_frame_count_mismatch(small):
    ds, fld = small
    from ddrnerf.field import GridField

    with pytest.raises(ShapeMismatchError):
        trainer.train(ds, GridField(np.zeros((2, 4, 4, 4, 4))), ds.rig, small_cfg())


@pytest.mark.slow
def test_rgb_only_fit_psnr():
    from ddrnerf import experiments, metrics, viz

    setup = experiments.ToySetup(iterations=2000)
    _, ds = experiments.toy_dataset(setup)
    res = experiments.fit(ds, (1, 0, 0, 0, 0), setup)
    for k in range(ds.frame_count):
        img = np.clip(viz.render_view(res.field, res.rig, k, setup.samples).image, 0, 1)
        assert metrics.psnr(img, ds.images[k]) > 30


@pytest.mark.slow
def test_default_loss_trend_non_increasing():
    from ddrnerf import experiments
    from ddrnerf.losses import DEFAULT_LAMBDAS

    setup = experiments.ToySetup(iterations=2000)
    _, ds = experiments.toy_dataset(setup)
    res = experiments.fit(ds, DEFAULT_LAMBDAS, setup)
    total = np.array([h["total"] for h in res.history])
    means = total.reshape(-1, 500).mean(axis=1)
    assert np.median(np.diff(means)) <= 0


def test_published_defaults():
    from ddrnerf.ddr import GumbelConfig
    g = GumbelConfig()
    assert g.epsilon == 2.0 and g.n_samples == 30
    c = trainer.TrainConfig()
    assert c.samples_per_ray == 128 and c.lr_camera == 1e-3 and c.ddr_samples == 30
