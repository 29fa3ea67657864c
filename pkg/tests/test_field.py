import numpy as np
import pytest

from ddrnerf.errors import OutOfBoundsError
from ddrnerf.field import AnalyticField, GridField, Sphere, analytic_depth, query, query_gradient, softplus
from ddrnerf.gradcheck import fd_check
from ddrnerf.geometry import Ray

BOX = ((-1, -1, -1), (1, 1, 1))


def random_grid(rng, frames=1, res=4):
    return GridField(rng.normal(size=(frames, res, res, res, 4)), BOX)


def test_large_negative_sigma_is_empty(rng):
    fld = GridField.create((4, 4, 4), BOX, sigma_init=-50.0)
    s = query(fld, rng.uniform(-1, 1, 3))
    assert s.sigma < 1e-20


def test_lattice_point_reads_one_voxel(rng):
    fld = random_grid(rng)
    # lattice i maps to -1 + 2 i / 3
    x = np.array([-1 + 2 / 3, 1 / 3, 1.0])
    s = query(fld, x)
    p = fld.params[0, 1, 2, 3]
    assert s.sigma == pytest.approx(softplus(p[0]), rel=1e-12)


def test_cell_centre_of_constant_cell():
    params = np.zeros((1, 2, 2, 2, 4))
    params[..., 0] = 0.7
    s = query(GridField(params, BOX), np.zeros(3))
    assert s.sigma == pytest.approx(softplus(0.7))


def test_invalid_frame(rng):
    fld = random_grid(rng, frames=2)
    with pytest.raises(OutOfBoundsError):
        query(fld, np.zeros(3), frame=2)


def test_static_field_clamps_frames(rng):
    fld = random_grid(rng)
    x = rng.uniform(-1, 1, 3)
    a, b = query(fld, x, 0), query(fld, x, 7)
    assert a.sigma == b.sigma and np.array_equal(a.color, b.color)


def test_sigma_nonnegative(rng):
    fld = GridField(rng.normal(scale=30, size=(1, 4, 4, 4, 4)), BOX)
    sig, _ = fld.query_many(rng.uniform(-1, 1, (500, 3)))
    assert np.all(sig >= 0)


def test_continuity_across_face(rng):
    fld = random_grid(rng, res=5)
    # the x = 0 face separates cells; sample 1000 points straddling it
    xs = np.linspace(-0.01, 0.01, 1000)
    pts = np.c_[xs, np.full(1000, 0.13), np.full(1000, -0.4)]
    raw, _, spatial = fld.gather(np.zeros(1, int), pts[None], want_spatial=True)
    jumps = np.abs(np.diff(raw[0, :, 0]))
    bound = np.abs(spatial[0, :, 0, 0]).max() * (xs[1] - xs[0]) * 1.0001
    assert jumps.max() <= bound


def test_zero_upstream_zero_gradient(rng):
    fld = random_grid(rng)
    buf = query_gradient(fld, rng.uniform(-1, 1, 3), 0, (0.0, np.zeros(3)))
    assert not np.any(buf)


def test_corner_gradient_single_voxel(rng):
    fld = random_grid(rng)
    buf = query_gradient(fld, np.array([-1.0, -1 + 2 / 3, 1 / 3]), 0, (1.0, np.ones(3)))
    assert np.count_nonzero(buf[..., 0]) == 1
    assert np.count_nonzero(buf[0, 0, 1, 2]) == 4


def test_query_gradient_fd(rng):
    worst = 0.0
    for _ in range(100):
        fld = random_grid(rng, frames=2)
        x = rng.uniform(-0.95, 0.95, 3)
        frame = int(rng.integers(2))
        ups, upc = rng.normal(), rng.normal(size=3)

        def f(p):
            s = query(GridField(p, BOX), x, frame)
            return ups * s.sigma + upc @ s.color

        rep = fd_check(f, fld.params, 1e-5, analytic=query_gradient(fld, x, frame, (ups, upc)).ravel())
        worst = max(worst, rep.max_rel_error)
    assert worst < 1e-6


class TestAnalyticDepth:
    fld = AnalyticField([Sphere((0, 0, -5), 1.0)])

    def test_through_centre(self):
        assert analytic_depth(self.fld, Ray([0, 0, 0], [0, 0, -1], 0, 100)) == pytest.approx(4.0)

    def test_miss(self):
        assert analytic_depth(self.fld, Ray([0, 0, 0], [0, 1, 0], 0, 100)) == 100

    def test_tangent(self):
        d, r = 5.0, 1.0
        # a hair inside the tangent so roundoff cannot turn it into a miss
        a = np.arcsin(r / d) * (1 - 1e-10)
        ray = Ray([0, 0, 0], [np.sin(a), 0, -np.cos(a)], 0, 100)
        assert analytic_depth(self.fld, ray) == pytest.approx(d * np.cos(a), rel=1e-4)
