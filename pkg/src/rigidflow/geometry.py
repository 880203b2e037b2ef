"""Pinhole camera model, point-cloud lifting, SE(3) algebra, and the
mask-weighted rigid transformation layer with its analytic flow and
occlusion outputs.

Conventions used throughout the package:

* images are indexed ``[row, col]``; a pixel coordinate ``(x, y)`` means
  ``x`` = column, ``y`` = row,
* the camera looks down +Z; projection is ``u = fx*X/Z + cx``,
  ``v = fy*Y/Z + cy`` with ``(u, v)`` in (column, row) order,
* every operation is a pure function; the ``*_backward`` companions
  consume a cache returned by the forward pass and propagate cotangents
  without any global state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, ValidationError

# Guards perspective division; points with Z below this cannot project.
Z_MIN = 1e-4
# Below this rotation angle the Rodrigues coefficients switch to their
# Taylor expansions to keep values and gradients finite.
SMALL_ANGLE = 1e-8

MASK_SUM_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics for a fixed H x W frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the frame")
        if self.width < 1 or self.height < 1:
            raise ValidationError("frame size must be at least 1x1")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass
class RgbdFrame:
    """One RGB-D observation: color in [0,1], metric depth, validity.

    ``valid`` is true where the depth value is an actual measurement;
    depth values under invalid pixels are unspecified.  ``intr`` is
    optional so plain image containers stay lightweight, but the fitting
    and prediction pipelines require it.
    """

    rgb: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    intr: CameraIntrinsics | None = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValidationError("rgb must be HxWx3")
        h, w = self.rgb.shape[:2]
        if self.depth.shape != (h, w) or self.valid.shape != (h, w):
            raise ValidationError("rgb, depth, and valid must share HxW")
        if not np.all(np.isfinite(self.rgb)):
            raise ValidationError("rgb must be finite")
        if self.rgb.min() < -1e-9 or self.rgb.max() > 1 + 1e-9:
            raise ValidationError("rgb must lie in [0, 1]")
        d = self.depth[self.valid]
        if d.size and (not np.all(np.isfinite(d)) or d.min() <= 0):
            raise ValidationError("depth must be positive and finite where valid")
        if self.intr is not None and self.intr.shape != (h, w):
            raise ValidationError("intrinsics frame size does not match planes")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class PointCloud:
    """Per-pixel 3D points in the camera frame.

    ``ordered`` is true for clouds lifted straight from a depth map,
    where projecting the point at pixel (x, y) lands back on (x, y).
    Rigid transformation destroys that property, so transformed clouds
    carry ``ordered=False`` and may contain points with Z <= 0.
    """

    points: np.ndarray
    valid: np.ndarray
    ordered: bool = True

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValidationError("points must be HxWx3")
        if self.valid.shape != self.points.shape[:2]:
            raise ValidationError("valid must match points HxW")
        if self.ordered:
            z = self.points[..., 2][self.valid]
            if z.size and z.min() <= 0:
                raise ValidationError("ordered cloud must have Z > 0 where valid")

    @property
    def shape(self) -> tuple[int, int]:
        return self.points.shape[:2]


@dataclass
class Se3:
    """Rigid motion as an axis-angle rotation plus a translation."""

    omega: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64).reshape(3)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.omega)) and np.all(np.isfinite(self.trans))):
            raise ValidationError("Se3 components must be finite")

    @classmethod
    def identity(cls) -> "Se3":
        return cls(np.zeros(3), np.zeros(3))


@dataclass
class MaskStack:
    """K soft object masks (background included) summing to one per pixel."""

    masks: np.ndarray

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float64)
        if self.masks.ndim != 3:
            raise ValidationError("masks must be KxHxW")
        if self.masks.min() < -1e-12:
            raise ValidationError("masks must be non-negative")
        s = self.masks.sum(axis=0)
        if np.abs(s - 1.0).max() > MASK_SUM_TOL:
            raise ValidationError("masks must sum to 1 per pixel")

    @property
    def K(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape[1:]


@dataclass
class RigidMotionSet:
    """One time step of scene motion: K masks with K rigid motions."""

    masks: MaskStack
    motions: list[Se3]

    def __post_init__(self):
        if len(self.motions) != self.masks.K:
            raise ValidationError("need exactly one motion per mask")


@dataclass
class FlowFields:
    """Scene flow, optical flow, and the disocclusion mask of one step.

    ``valid`` marks pixels where the flows are defined (source point
    valid and its transformed position in front of the camera).
    """

    scene_flow: np.ndarray
    optical_flow: np.ndarray
    occlusion: np.ndarray
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.scene_flow = np.asarray(self.scene_flow, dtype=np.float64)
        self.optical_flow = np.asarray(self.optical_flow, dtype=np.float64)
        self.occlusion = np.asarray(self.occlusion, dtype=bool)
        h, w = self.occlusion.shape
        if self.scene_flow.shape != (h, w, 3) or self.optical_flow.shape != (h, w, 2):
            raise ValidationError("flow planes must share HxW")
        if self.valid is None:
            self.valid = np.ones((h, w), dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != (h, w):
                raise ValidationError("valid must match flow HxW")


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (x, y) coordinate planes; x runs along columns."""
    ys, xs = np.mgrid[0:height, 0:width]
    return xs.astype(np.float64), ys.astype(np.float64)


# ---------------------------------------------------------------------------
# lifting and projection


def depth_to_pointcloud(frame: RgbdFrame, intr: CameraIntrinsics) -> PointCloud:
    """Lift a depth map into an ordered camera-frame point cloud."""
    if frame.shape != intr.shape:
        raise ValidationError(
            f"frame {frame.shape} does not match intrinsics {intr.shape}"
        )
    xs, ys = pixel_grid(intr.height, intr.width)
    z = np.where(frame.valid, frame.depth, 0.0)
    points = np.stack(
        [(xs - intr.cx) * z / intr.fx, (ys - intr.cy) * z / intr.fy, z], axis=-1
    )
    return PointCloud(points=points, valid=frame.valid.copy(), ordered=True)


def depth_to_pointcloud_backward(
    grad_points: np.ndarray, intr: CameraIntrinsics, valid: np.ndarray
) -> np.ndarray:
    """Cotangent of the lift w.r.t. the depth map."""
    xs, ys = pixel_grid(intr.height, intr.width)
    grad_depth = (
        grad_points[..., 0] * (xs - intr.cx) / intr.fx
        + grad_points[..., 1] * (ys - intr.cy) / intr.fy
        + grad_points[..., 2]
    )
    return np.where(valid, grad_depth, 0.0)


def project_point(p, intr: CameraIntrinsics) -> tuple[float, float]:
    """Project one camera-frame point to sub-pixel (u, v)."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if p[2] <= 0:
        raise BehindCameraError(f"cannot project point with Z={p[2]}")
    u = intr.fx * p[0] / p[2] + intr.cx
    v = intr.fy * p[1] / p[2] + intr.cy
    return float(u), float(v)


def project_points(
    points: np.ndarray, intr: CameraIntrinsics, z_min: float = Z_MIN
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of an (..., 3) array.

    Returns (uv, in_front) where uv has shape (..., 2) and ``in_front``
    flags points with Z > z_min; uv under the flag's complement is 0.
    """
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    in_front = z > z_min
    safe_z = np.where(in_front, z, 1.0)
    u = intr.fx * points[..., 0] / safe_z + intr.cx
    v = intr.fy * points[..., 1] / safe_z + intr.cy
    uv = np.stack([u, v], axis=-1)
    uv[~in_front] = 0.0
    return uv, in_front


def project_points_backward(
    grad_uv: np.ndarray,
    points: np.ndarray,
    intr: CameraIntrinsics,
    in_front: np.ndarray,
) -> np.ndarray:
    """Cotangent of project_points w.r.t. the points."""
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    safe_z = np.where(in_front, z, 1.0)
    gu, gv = grad_uv[..., 0], grad_uv[..., 1]
    gx = gu * intr.fx / safe_z
    gy = gv * intr.fy / safe_z
    gz = -(gu * intr.fx * x + gv * intr.fy * y) / (safe_z * safe_z)
    grad = np.stack([gx, gy, gz], axis=-1)
    grad[~in_front] = 0.0
    return grad


# ---------------------------------------------------------------------------
# SO(3) / SE(3)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(omega: np.ndarray) -> np.ndarray:
    """Rotation matrix of an axis-angle vector via the Rodrigues formula."""
    omega = np.asarray(omega, dtype=np.float64).reshape(3)
    theta2 = float(omega @ omega)
    theta = np.sqrt(theta2)
    K = skew(omega)
    if theta < SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def rodrigues_batch(omegas: np.ndarray) -> np.ndarray:
    """Rotation matrices for a (..., 3) array of axis-angle vectors."""
    omegas = np.asarray(omegas, dtype=np.float64)
    shape = omegas.shape[:-1]
    w = omegas.reshape(-1, 3)
    theta2 = (w * w).sum(axis=1)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
    b = np.where(
        small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2)
    )
    K = np.zeros((w.shape[0], 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -w[:, 2], w[:, 1]
    K[:, 1, 0], K[:, 1, 2] = w[:, 2], -w[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -w[:, 1], w[:, 0]
    R = np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * (K @ K)
    return R.reshape(*shape, 3, 3)


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3), used by the rotation backward pass."""
    omega = np.asarray(omega, dtype=np.float64).reshape(3)
    theta2 = float(omega @ omega)
    theta = np.sqrt(theta2)
    K = skew(omega)
    if theta < SMALL_ANGLE:
        b = 0.5 - theta2 / 24.0
        c = 1.0 / 6.0 - theta2 / 120.0
    else:
        b = (1.0 - np.cos(theta)) / theta2
        c = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + b * K + c * (K @ K)


def se3_realize(m: Se3) -> tuple[np.ndarray, np.ndarray]:
    """Realize a twist as (rotation matrix, translation vector)."""
    return rodrigues(m.omega), m.trans.copy()


def se3_apply(m: Se3, p: np.ndarray) -> np.ndarray:
    """Apply a rigid motion to one point or an (..., 3) array of points."""
    R, t = se3_realize(m)
    p = np.asarray(p, dtype=np.float64)
    return p @ R.T + t


def se3_compose(a: Se3, b: Se3) -> tuple[np.ndarray, np.ndarray]:
    """Realized composition a∘b: first apply b, then a."""
    Ra, ta = se3_realize(a)
    Rb, tb = se3_realize(b)
    return Ra @ Rb, Ra @ tb + ta


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle in radians of an orthonormal matrix."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of an orthonormal matrix (inverse of rodrigues)."""
    vee = 0.5 * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )
    s = np.linalg.norm(vee)  # sin(theta)
    c = (np.trace(R) - 1.0) / 2.0
    theta = np.arctan2(s, c)
    if theta < SMALL_ANGLE:
        return vee
    if s > 1e-6:
        return vee * (theta / s)
    # near pi: sin collapses, take the axis from the dominant column of
    # R + I (proportional to the axis there), oriented along vee
    A = R + np.eye(3)
    i = int(np.argmax(np.diag(A)))
    axis = A[:, i] / np.linalg.norm(A[:, i])
    if s > 0 and vee @ axis < 0:
        axis = -axis
    return axis * theta


# ---------------------------------------------------------------------------
# transformation layer


def transform_points(
    points: np.ndarray,
    masks: np.ndarray,
    omegas: np.ndarray,
    trans: np.ndarray,
) -> tuple[np.ndarray, dict]:
    """Mask-weighted application of K rigid motions to an HxWx3 grid.

    Returns the blended points and a cache for the backward pass.
    """
    K = masks.shape[0]
    rots = np.stack([rodrigues(omegas[k]) for k in range(K)])
    # moved[k] = R_k p + T_k per pixel
    moved = np.einsum("kij,hwj->khwi", rots, points) + trans[:, None, None, :]
    phat = np.einsum("khw,khwi->hwi", masks, moved)
    cache = {
        "points": points,
        "masks": masks,
        "omegas": omegas,
        "rots": rots,
        "moved": moved,
    }
    return phat, cache


def transform_points_backward(
    cache: dict, grad_phat: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cotangents of transform_points w.r.t. (masks, omegas, trans).

    The rotation gradient uses d(R(w)x)/dw = -[R x]_x J_l(w), i.e. the
    left Jacobian of SO(3); translation does not enter that term.
    """
    points, masks = cache["points"], cache["masks"]
    rots, moved = cache["rots"], cache["moved"]
    K = masks.shape[0]

    grad_masks = np.einsum("hwi,khwi->khw", grad_phat, moved)
    grad_trans = np.einsum("khw,hwi->ki", masks, grad_phat)

    grad_omegas = np.zeros((K, 3))
    for k in range(K):
        rp = points @ rots[k].T  # R_k p, without translation
        weighted = masks[k][..., None] * grad_phat
        torque = np.cross(rp.reshape(-1, 3), weighted.reshape(-1, 3)).sum(axis=0)
        grad_omegas[k] = so3_left_jacobian(cache["omegas"][k]).T @ torque
    return grad_masks, grad_omegas, grad_trans


def transform_pointcloud(P: PointCloud, motion: RigidMotionSet) -> PointCloud:
    """Move an ordered cloud by mask-weighted rigid motions.

    The result keeps the pixel layout of the source but is no longer
    ordered: points have left their own pixel rays.
    """
    if not P.ordered:
        raise ValidationError("transform_pointcloud expects an ordered cloud")
    if motion.masks.shape != P.shape:
        raise ValidationError("mask planes must match the cloud")
    omegas = np.stack([m.omega for m in motion.motions])
    trans = np.stack([m.trans for m in motion.motions])
    phat, _ = transform_points(P.points, motion.masks.masks, omegas, trans)
    return PointCloud(points=phat, valid=P.valid.copy(), ordered=False)


# ---------------------------------------------------------------------------
# flows and occlusion


def scene_flow(P_hat: PointCloud, P: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel 3D motion P_hat - P and the pixels where it is defined."""
    if P_hat.shape != P.shape:
        raise ValidationError("clouds must share HxW")
    if not P.ordered:
        raise ValidationError("source cloud must be ordered")
    valid = P_hat.valid & P.valid
    V = np.where(valid[..., None], P_hat.points - P.points, 0.0)
    return V, valid


def optical_flow(
    V: np.ndarray, P: PointCloud, intr: CameraIntrinsics, z_min: float = Z_MIN
) -> tuple[np.ndarray, np.ndarray]:
    """Project scene flow onto the image plane.

    U(x,y) = project(P + V) - (x,y); pixels whose displaced point falls
    behind z_min (or whose source is invalid) are flagged invalid.
    """
    if V.shape[:2] != P.shape:
        raise ValidationError("flow and cloud must share HxW")
    if not P.ordered:
        raise ValidationError("source cloud must be ordered")
    target = P.points + V
    uv, in_front = project_points(target, intr, z_min)
    xs, ys = pixel_grid(*P.shape)
    U = uv - np.stack([xs, ys], axis=-1)
    valid = P.valid & in_front
    U[~valid] = 0.0
    return U, valid


def optical_flow_backward(
    grad_U: np.ndarray,
    V: np.ndarray,
    P: PointCloud,
    intr: CameraIntrinsics,
    valid: np.ndarray,
    z_min: float = Z_MIN,
) -> np.ndarray:
    """Cotangent of optical_flow w.r.t. the displaced point P+V.

    The same array is the gradient w.r.t. V and w.r.t. P.points, since
    the projection only sees their sum.
    """
    target = P.points + V
    g = project_points_backward(grad_U, target, intr, target[..., 2] > z_min)
    g[~valid] = 0.0
    return g


def landing_cells(
    points: np.ndarray,
    valid: np.ndarray,
    intr: CameraIntrinsics,
    z_min: float = Z_MIN,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Round projections to pixel cells.

    Returns (col, row, landed) where ``landed`` flags points that are
    valid, in front of the camera, and land inside the frame.  Rounding
    is half-up, so a projection at u = x + 0.5 belongs to cell x + 1.
    """
    uv, in_front = project_points(points, intr, z_min)
    col = np.floor(uv[..., 0] + 0.5).astype(np.int64)
    row = np.floor(uv[..., 1] + 0.5).astype(np.int64)
    landed = (
        valid
        & in_front
        & (col >= 0)
        & (col < intr.width)
        & (row >= 0)
        & (row < intr.height)
    )
    return col, row, landed


def occlusion_mask(
    P_hat: PointCloud, intr: CameraIntrinsics, z_min: float = Z_MIN
) -> np.ndarray:
    """Disocclusion test: mark pixels no transformed point lands in.

    A point lands in the cell its projection rounds to; marked pixels
    become visible in the next frame and must be inpainted.
    """
    if P_hat.shape != intr.shape:
        raise ValidationError("cloud must match intrinsics frame size")
    col, row, landed = landing_cells(P_hat.points, P_hat.valid, intr, z_min)
    covered = np.zeros(intr.shape, dtype=bool)
    covered[row[landed], col[landed]] = True
    return ~covered


def compute_flow_fields(
    P: PointCloud,
    P_hat: PointCloud,
    intr: CameraIntrinsics,
    z_min: float = Z_MIN,
) -> FlowFields:
    """Assemble scene flow, optical flow, and occlusion for one step."""
    V, v_valid = scene_flow(P_hat, P)
    U, u_valid = optical_flow(V, P, intr, z_min)
    O = occlusion_mask(P_hat, intr, z_min)
    return FlowFields(
        scene_flow=V, optical_flow=U, occlusion=O, valid=v_valid & u_valid
    )
