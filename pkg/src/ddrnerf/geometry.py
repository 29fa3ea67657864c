"""Cameras, rays, residual pose/focal parameterisation and the NDC warp.

Conventions: poses are camera-to-world, ``x_world = R @ x_cam + t``.  The
camera looks down its local -z axis with +y up, so image rows grow towards
-y.  Pixel ``(u, v)`` is a continuous coordinate; the centre of pixel
``(col, row)`` is ``(col + 0.5, row + 0.5)``.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidCameraError, InvalidRayError, OutOfBoundsError

_ORTHO_TOL = 1e-9
_UNIT_TOL = 1e-9


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    # NDC rays carry an unnormalised direction with t in [0, 1].
    ndc: bool = False

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        if not (np.all(np.isfinite(o)) and np.all(np.isfinite(d))):
            raise InvalidRayError("ray has non-finite components")
        if not self.ndc and abs(np.linalg.norm(d) - 1.0) > _UNIT_TOL:
            raise InvalidRayError(f"direction norm {np.linalg.norm(d)!r} is not 1")
        if not (self.t_near >= 0 and self.t_far > self.t_near):
            raise InvalidRayError(f"bad bounds ({self.t_near}, {self.t_far})")

    def at(self, t):
        t = np.asarray(t, dtype=float)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class PinholeCamera:
    width: int
    height: int
    f_init: float
    delta_f: float = 0.0
    principal_point: tuple = None

    def __post_init__(self):
        if self.principal_point is None:
            object.__setattr__(self, "principal_point", (self.width / 2.0, self.height / 2.0))
        cx, cy = self.principal_point
        if not (0 <= cx <= self.width and 0 <= cy <= self.height):
            raise InvalidCameraError("principal point lies outside the image")
        if self.f_init + self.delta_f <= 0:
            raise InvalidCameraError(f"non-positive focal {self.f_init + self.delta_f}")

    @property
    def focal(self):
        return effective_focal(self)


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def validate(self, tol=_ORTHO_TOL):
        R = self.rotation
        if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
            raise InvalidCameraError("rotation is not a proper orthonormal matrix")
        return self

    @property
    def center(self):
        return self.translation

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class PoseResidual:
    xi: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float).reshape(6)
        if not np.all(np.isfinite(xi)):
            raise InvalidCameraError("pose residual has non-finite entries")
        object.__setattr__(self, "xi", xi)


def effective_focal(cam):
    f = cam.f_init + cam.delta_f
    if not f > 0:
        raise InvalidCameraError(f"non-positive focal {f}")
    return float(f)


def skew(w):
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(omega):
    """Rodrigues rotation for an axis-angle vector."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def so3_exp_jacobian(omega):
    """Return dR/domega_i for i = 0..2, shape (3, 3, 3) indexed [i, row, col]."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    E = np.eye(3)
    out = np.empty((3, 3, 3))
    if theta2 < 1e-10:
        K = skew(omega)
        for i in range(3):
            Ei = skew(E[i])
            out[i] = Ei + 0.5 * (Ei @ K + K @ Ei)
        return out
    R = so3_exp(omega)
    K = skew(omega)
    I_R = np.eye(3) - R
    for i in range(3):
        out[i] = (omega[i] * K + skew(np.cross(omega, I_R[:, i]))) @ R / theta2
    return out


def residual_transform(xi):
    xi = np.asarray(xi, dtype=float).reshape(6)
    return so3_exp(xi[:3]), xi[3:].copy()


def compose_pose(p, r):
    """Right-compose ``p`` with the rigid transform exp(xi).

    The residual translation is applied in the camera frame of ``p``.
    """
    xi = r.xi if isinstance(r, PoseResidual) else np.asarray(r, dtype=float)
    if not np.any(xi):
        return p
    dR, dt = residual_transform(xi)
    return Pose(p.rotation @ dR, p.rotation @ dt + p.translation)


def _camera_dirs(cam, px):
    f = effective_focal(cam)
    cx, cy = cam.principal_point
    px = np.atleast_2d(np.asarray(px, dtype=float))
    d = np.empty((px.shape[0], 3))
    d[:, 0] = (px[:, 0] - cx) / f
    d[:, 1] = -(px[:, 1] - cy) / f
    d[:, 2] = -1.0
    return d


def _check_pixels(cam, px):
    px = np.atleast_2d(np.asarray(px, dtype=float))
    bad = (px[:, 0] < 0) | (px[:, 0] > cam.width) | (px[:, 1] < 0) | (px[:, 1] > cam.height)
    if np.any(bad):
        raise OutOfBoundsError(f"pixel {px[np.argmax(bad)]} outside {cam.width}x{cam.height} image")
    return px


def pixel_rays(cam, pose, px):
    """Vectorised back-projection.  Returns (origins, unit directions), each (M, 3)."""
    px = _check_pixels(cam, px)
    d_cam = _camera_dirs(cam, px)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    dirs = d_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs


def pixel_ray(cam, pose, px, bounds=(0.0, 1e3)):
    o, d = pixel_rays(cam, pose, px)
    return Ray(o[0], d[0], float(bounds[0]), float(bounds[1]))


def pixel_rays_backward(cam, pose_init, xi, px, grad_origins, grad_dirs):
    """Chain rule from world-ray gradients to (xi, delta_f).

    ``grad_origins`` / ``grad_dirs`` are dL/d(origin), dL/d(direction) for the
    rays produced by ``pixel_rays(cam, compose_pose(pose_init, xi), px)``.
    Returns ``(grad_xi (6,), grad_delta_f)``.
    """
    xi = np.asarray(xi, dtype=float).reshape(6)
    px = np.atleast_2d(np.asarray(px, dtype=float))
    go = np.atleast_2d(grad_origins)
    gd = np.atleast_2d(grad_dirs)
    f = effective_focal(cam)
    cx, cy = cam.principal_point

    Rp = pose_init.rotation
    dR = so3_exp(xi[:3])
    Jw = so3_exp_jacobian(xi[:3])

    d_cam = _camera_dirs(cam, px)
    norm = np.linalg.norm(d_cam, axis=1, keepdims=True)
    n = d_cam / norm

    grad_xi = np.zeros(6)
    # origin = Rp @ v + tp
    grad_xi[3:] = Rp.T @ go.sum(axis=0)
    # direction = Rp @ dR(omega) @ n
    gd_local = gd @ Rp  # rows: Rp^T gd
    for i in range(3):
        grad_xi[i] = np.einsum("mi,ij,mj->", gd_local, Jw[i], n)

    # dL/dn = (Rp dR)^T gd; n = d/|d|
    g_n = gd_local @ dR
    g_dcam = (g_n - n * np.sum(g_n * n, axis=1, keepdims=True)) / norm
    dd_df = np.zeros_like(d_cam)
    dd_df[:, 0] = -(px[:, 0] - cx) / f**2
    dd_df[:, 1] = (px[:, 1] - cy) / f**2
    grad_df = float(np.sum(g_dcam * dd_df))
    return grad_xi, grad_df


# --- NDC ---------------------------------------------------------------------
#
# Forward-facing warp of the reference frustum into [-1, 1]^3.  With
# a = -f / (W/2), b = -f / (H/2) and near plane n, a world point (x, y, z), z < 0,
# maps to
#     x' = a x / z,   y' = b y / z,   z' = 1 + 2 n / z
# and the inverse is
#     z = 2 n / (z' - 1),   x = x' z / a,   y = y' z / b.
# A ray is first advanced to the near plane (origin z = -n); its NDC parameter
# t' in [0, 1] then corresponds to world depth z through t' = 1 + n / z.


def _ndc_scales(cam):
    f = effective_focal(cam)
    return -f / (cam.width / 2.0), -f / (cam.height / 2.0)


def ndc_rays(origins, dirs, cam, near):
    """Batched NDC warp; returns (origins', dirs')."""
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    d = np.atleast_2d(np.asarray(dirs, dtype=float))
    if np.any(d[:, 2] >= 0):
        raise InvalidRayError("ray does not travel towards -z")
    if np.any(o[:, 2] < -near):
        raise InvalidRayError("ray origin lies behind the near plane")
    a, b = _ndc_scales(cam)
    s = -(near + o[:, 2]) / d[:, 2]
    p = o + s[:, None] * d
    pz = p[:, 2]
    o_ndc = np.stack([a * p[:, 0] / pz, b * p[:, 1] / pz, 1.0 + 2.0 * near / pz], axis=1)
    d_ndc = np.stack(
        [
            a * (d[:, 0] / d[:, 2] - p[:, 0] / pz),
            b * (d[:, 1] / d[:, 2] - p[:, 1] / pz),
            -2.0 * near / pz,
        ],
        axis=1,
    )
    return o_ndc, d_ndc


def ndc_rays_backward(origins, dirs, cam, near, grad_o_ndc, grad_d_ndc):
    """Gradients of the NDC warp w.r.t. the world origin and direction."""
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    d = np.atleast_2d(np.asarray(dirs, dtype=float))
    go = np.atleast_2d(grad_o_ndc)
    gd = np.atleast_2d(grad_d_ndc)
    a, b = _ndc_scales(cam)
    s = -(near + o[:, 2]) / d[:, 2]
    px = o[:, 0] + s * d[:, 0]
    py = o[:, 1] + s * d[:, 1]
    # p_z == -near identically, so o'_z and d'_z are constants.
    gpx = -(a / near) * go[:, 0] + (a / near) * gd[:, 0]
    gpy = -(b / near) * go[:, 1] + (b / near) * gd[:, 1]
    g_dx_direct = a * gd[:, 0] / d[:, 2]
    g_dy_direct = b * gd[:, 1] / d[:, 2]
    g_dz_direct = -(a * gd[:, 0] * d[:, 0] + b * gd[:, 1] * d[:, 1]) / d[:, 2] ** 2

    g_s = gpx * d[:, 0] + gpy * d[:, 1]
    grad_o = np.zeros_like(o)
    grad_d = np.zeros_like(d)
    grad_o[:, 0] = gpx
    grad_o[:, 1] = gpy
    grad_o[:, 2] = g_s * (-1.0 / d[:, 2])
    grad_d[:, 0] = g_dx_direct + gpx * s
    grad_d[:, 1] = g_dy_direct + gpy * s
    grad_d[:, 2] = g_dz_direct + g_s * (near + o[:, 2]) / d[:, 2] ** 2
    return grad_o, grad_d


def to_ndc(ray, cam, near):
    """Warp a world ray into NDC space; the result spans t in [0, 1]."""
    o, d = ndc_rays(ray.origin[None], ray.direction[None], cam, near)
    return Ray(o[0], d[0], 0.0, 1.0, ndc=True)


def ndc_to_world(points, cam, near):
    p = np.atleast_2d(np.asarray(points, dtype=float))
    a, b = _ndc_scales(cam)
    z = 2.0 * near / (p[:, 2] - 1.0)
    return np.stack([p[:, 0] * z / a, p[:, 1] * z / b, z], axis=1)


def world_to_ndc(points, cam, near):
    p = np.atleast_2d(np.asarray(points, dtype=float))
    a, b = _ndc_scales(cam)
    z = p[:, 2]
    return np.stack([a * p[:, 0] / z, b * p[:, 1] / z, 1.0 + 2.0 * near / z], axis=1)


def world_distance_to_ndc_t(origins, dirs, dist, near):
    """NDC ray parameter of the point ``origin + dist * dir`` (t' = 1 + n / z)."""
    o = np.atleast_2d(origins)
    d = np.atleast_2d(dirs)
    z = o[:, 2] + np.asarray(dist, dtype=float) * d[:, 2]
    return 1.0 + near / z


def ndc_t_to_world_distance(origins, dirs, t_ndc, near):
    o = np.atleast_2d(origins)
    d = np.atleast_2d(dirs)
    z = near / (np.asarray(t_ndc, dtype=float) - 1.0)
    return (z - o[:, 2]) / d[:, 2]


@dataclass
class CameraRig:
    """Per-frame initial intrinsics/extrinsics plus learnable residuals."""

    width: int
    height: int
    f_init: np.ndarray
    principal_point: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    xi: np.ndarray = None
    delta_f: np.ndarray = None

    def __post_init__(self):
        self.f_init = np.asarray(self.f_init, dtype=float).reshape(-1)
        n = self.f_init.shape[0]
        self.principal_point = np.asarray(self.principal_point, dtype=float).reshape(n, 2)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(n, 3, 3)
        self.translations = np.asarray(self.translations, dtype=float).reshape(n, 3)
        # zero-initialised residuals
        if self.xi is None:
            self.xi = np.zeros((n, 6))
        if self.delta_f is None:
            self.delta_f = np.zeros(n)
        self.xi = np.asarray(self.xi, dtype=float).reshape(n, 6)
        self.delta_f = np.asarray(self.delta_f, dtype=float).reshape(n)

    @classmethod
    def from_cameras(cls, cams, poses):
        c0 = cams[0]
        return cls(
            c0.width,
            c0.height,
            [c.f_init for c in cams],
            [c.principal_point for c in cams],
            [p.rotation for p in poses],
            [p.translation for p in poses],
            delta_f=[c.delta_f for c in cams],
        )

    def __len__(self):
        return self.f_init.shape[0]

    def copy(self):
        return CameraRig(
            self.width, self.height, self.f_init.copy(), self.principal_point.copy(),
            self.rotations.copy(), self.translations.copy(), self.xi.copy(), self.delta_f.copy(),
        )

    def init_camera(self, k):
        return PinholeCamera(self.width, self.height, float(self.f_init[k]), 0.0, tuple(self.principal_point[k]))

    def camera(self, k):
        return PinholeCamera(
            self.width, self.height, float(self.f_init[k]), float(self.delta_f[k]), tuple(self.principal_point[k])
        )

    def init_pose(self, k):
        return Pose(self.rotations[k], self.translations[k])

    def pose(self, k):
        return compose_pose(self.init_pose(k), PoseResidual(self.xi[k]))

    def with_residuals(self, xi, delta_f):
        out = self.copy()
        out.xi = np.asarray(xi, dtype=float).reshape(out.xi.shape).copy()
        out.delta_f = np.asarray(delta_f, dtype=float).reshape(out.delta_f.shape).copy()
        return out

    def rays(self, k, px):
        return pixel_rays(self.camera(k), self.pose(k), px)

    def rays_backward(self, k, px, grad_o, grad_d):
        return pixel_rays_backward(self.camera(k), self.init_pose(k), self.xi[k], px, grad_o, grad_d)


def pixel_centers(width, height):
    cols, rows = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return np.stack([cols.ravel(), rows.ravel()], axis=1)


def with_delta_f(cam, delta_f):
    return replace(cam, delta_f=float(delta_f))
