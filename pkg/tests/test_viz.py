import json

import numpy as np
import pytest

from ddrnerf import io, scenes, viz
from ddrnerf.errors import OutOfBoundsError
from ddrnerf.field import GridField, NDC_BBOX
from ddrnerf.geometry import PoseResidual


@pytest.fixture(scope="module")
def gt_field(toy):
    spec, _, cam = toy
    return scenes.voxelize(spec, cam, resolution=64)


def empty_field():
    return GridField.create((4, 4, 4), NDC_BBOX, sigma_init=-60.0)


class TestWeightMap:
    def test_empty_field(self, toy):
        _, ds, _ = toy
        wm = viz.weight_map(empty_field(), ds.rig, 0, 5, 32)
        assert wm.shape == (ds.width, 32)
        assert wm.values.max() < 1e-20 or not np.any(wm.normalized > 1e-12)

    def test_slab_band(self):
        spec = scenes.SceneSpec([], background_depth=3.0)
        rig = scenes.small_baseline_rig(32, 24, frame_count=1, n_views=1, baseline=0)
        cam = scenes.reference_camera(rig)
        fld = scenes.voxelize(spec, cam, resolution=64)
        n = 64
        wm = viz.weight_map(fld, rig, 0, 12, n)
        # z = -3 maps to t' = 1 - near/3, in bin floor(t'·N) for every column
        band = int(np.floor((1 - 1 / 3) * n))
        assert np.all(np.abs(np.argmax(wm.values, axis=1) - band) <= 1)
        assert np.all(wm.normalized <= 1) and np.all(wm.normalized >= 0)

    def test_sphere_row_tracks_analytic_depth(self, toy, gt_field):
        _, ds, _ = toy
        n = 128
        row = int(np.argmax((ds.hits[0] == 0).sum(axis=1)))
        wm = viz.weight_map(gt_field, ds.rig, 0, row, n)
        px = np.stack([np.arange(ds.width) + 0.5, np.full(ds.width, row + 0.5)], axis=1)
        target = viz.depth_bin(ds.rig, 0, px, ds.depths[0, row], n)
        peak = np.argmax(wm.values, axis=1)
        on_sphere = ds.hits[0, row] == 0
        assert on_sphere.sum() >= 5
        assert np.all(np.abs(peak - target) <= 1)
        # the sphere sits in front of the wall band
        assert np.all(peak[on_sphere] < np.min(peak[~on_sphere]))

    def test_conservation_per_column(self, toy, gt_field):
        _, ds, _ = toy
        wm = viz.weight_map(gt_field, ds.rig, 1, 20, 64)
        np.testing.assert_allclose(wm.values.sum(axis=1) + wm.residual, 1.0, atol=1e-6)

    def test_row_out_of_range(self, toy):
        _, ds, _ = toy
        with pytest.raises(OutOfBoundsError):
            viz.weight_map(empty_field(), ds.rig, 0, ds.height, 8)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            viz.make_weight_map(np.array([[0.1, -0.1]]))


class TestPGM:
    def test_all_zero_black(self, tmp_path):
        viz.export_pgm(viz.make_weight_map(np.zeros((4, 6))), tmp_path / "z.pgm")
        assert not np.any(io.read_pgm(tmp_path / "z.pgm"))

    def test_one_hot(self, tmp_path):
        w = np.zeros((4, 6))
        w[2, 3] = 0.4
        viz.export_pgm(viz.make_weight_map(w), tmp_path / "o.pgm")
        img = io.read_pgm(tmp_path / "o.pgm")
        assert img.shape == (6, 4)  # N rows, W columns
        assert img[3, 2] == 255 and np.count_nonzero(img) == 1

    def test_round_trip_and_sidecar(self, tmp_path, rng):
        wm = viz.make_weight_map(rng.random((10, 16)) ** 3, row=4, frame=1)
        viz.export_pgm(wm, tmp_path / "w.pgm")
        back = io.read_pgm(tmp_path / "w.pgm").T / 255.0
        assert np.abs(back - wm.normalized).max() <= 0.5 / 255 + 1e-12
        meta = json.loads((tmp_path / "w.json").read_text())
        assert meta["normalization"] == "per-map max" and meta["row"] == 4
        assert meta["max_weight"] == pytest.approx(wm.scale)

    def test_byte_stable(self, tmp_path, rng):
        wm = viz.make_weight_map(rng.random((5, 7)))
        viz.export_pgm(wm, tmp_path / "a.pgm")
        viz.export_pgm(wm, tmp_path / "b.pgm")
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


class TestUnimodality:
    def test_one_hot(self):
        w = np.zeros(32)
        w[9] = 0.9
        r = viz.unimodality_from_weights(w)
        assert r.modality[0] == 1 and r.mass_ratio[0] == 1 and r.peak[0] == 9

    def test_two_peaks(self):
        w = np.zeros(32)
        w[[5, 15]] = 0.4
        assert viz.unimodality_from_weights(w).modality[0] == 2

    def test_triangular_bump(self):
        w = np.zeros(32)
        w[10:17] = [1, 2, 3, 4, 3, 2, 1]
        w /= w.sum()
        r = viz.unimodality_from_weights(w)
        assert r.modality[0] == 1 and r.peak[0] == 13
        assert r.mass_ratio[0] == pytest.approx(w[11:16].sum())

    def test_small_side_lobe_ignored(self):
        w = np.zeros(32)
        w[10] = 1.0
        w[20] = 0.05
        assert viz.count_modes(w) == 1

    def test_plateau_counts_once(self):
        assert viz.count_modes(np.array([0, 1, 1, 1, 0.0])) == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            viz.unimodality_from_weights(np.zeros((0, 4)))

    def test_on_field(self, toy, gt_field):
        _, ds, _ = toy
        rep = viz.unimodality(gt_field, ds.rig, 0, np.array([[24.5, 18.5], [3.5, 3.5]]), 64)
        assert np.all(rep.modality >= 1) and np.all((rep.mass_ratio >= 0) & (rep.mass_ratio <= 1))


class TestRenderView:
    def test_empty_field_background(self, toy):
        _, ds, _ = toy
        v = viz.render_view(empty_field(), ds.rig, 0, 16, background=(0.2, 0.3, 0.4))
        np.testing.assert_allclose(v.image, np.broadcast_to([0.2, 0.3, 0.4], v.image.shape), atol=1e-12)
        assert np.abs(v.depth).max() < 1e-12 and np.abs(v.distance).max() < 1e-9

    def test_gt_field_psnr(self, toy, gt_field):
        from ddrnerf.metrics import psnr

        _, ds, _ = toy
        v = viz.render_view(gt_field, ds.rig, 0, 128)
        assert psnr(np.clip(v.image, 0, 1), ds.images[0]) > 30
        # PFM export carries world distance close to the analytic depth on the sphere
        m = ds.hits[0] == 0
        assert np.median(np.abs(v.distance[m] - ds.depths[0][m]) / ds.depths[0][m]) < 0.02

    def test_held_out_camera_finite(self, toy, gt_field):
        _, ds, _ = toy
        rig = ds.rig.copy()
        rig.xi[0] = PoseResidual([0.01, -0.02, 0.0, 0.02, 0.01, 0.0]).xi
        v = viz.render_view(gt_field, rig, 0, 32)
        assert np.all(np.isfinite(v.image)) and np.all(np.isfinite(v.depth))

    def test_export(self, toy, tmp_path):
        _, ds, _ = toy
        v = viz.render_view(empty_field(), ds.rig, 0, 8)
        png, pfm = v.export(tmp_path / "out" / "view")
        assert io.read_png(png).shape == (ds.height, ds.width, 3)
        np.testing.assert_array_equal(io.read_pfm(pfm), v.distance.astype(np.float32))
