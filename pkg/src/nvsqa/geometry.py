"""Camera models, rigid poses, projection, and point-centered spherical frames.

Conventions: poses map world to camera (p_cam = R p_world + t), quaternions
are (w, x, y, z), and continuous image coordinates put texel (row r, col c)
at (u=c, v=r), so bilinear sampling is valid for 0 <= u <= W-1, 0 <= v <= H-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image extents")


@dataclass(frozen=True)
class RigidPose:
    """World-to-camera rotation (unit quaternion, wxyz) and translation."""

    qvec: np.ndarray
    tvec: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.qvec, dtype=np.float64)
        t = np.asarray(self.tvec, dtype=np.float64)
        if q.shape != (4,) or t.shape != (3,):
            raise ValueError("qvec must have 4 entries and tvec 3")
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {norm} deviates from 1 beyond 1e-6")
        object.__setattr__(self, "qvec", q / norm)
        object.__setattr__(self, "tvec", t)

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.qvec
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )


@dataclass
class PosedView:
    """An image with its pinhole intrinsics, rigid pose, and path ordinal."""

    image: np.ndarray  # H x W x 3, values in [0, 1]
    camera: PinholeCamera
    pose: RigidPose
    path_index: int
    image_id: int = -1  # COLMAP image id when known
    name: str = ""

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if (h, w) != (self.camera.height, self.camera.width):
            raise ValueError(
                f"image {h}x{w} does not match camera extents "
                f"{self.camera.height}x{self.camera.width}"
            )


@dataclass
class ObservationRay:
    """One view of a surface point: viewpoint, color, and spherical angles."""

    viewpoint: np.ndarray
    pixel_value: np.ndarray
    azimuth: float
    polar: float
    path_index: int = -1


def quaternion_from_matrix(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix, w >= 0."""
    rxx, ryx, rzx, rxy, ryy, rzy, rxz, ryz, rzz = rot.flat
    k = (
        np.array(
            [
                [rxx - ryy - rzz, 0, 0, 0],
                [ryx + rxy, ryy - rxx - rzz, 0, 0],
                [rzx + rxz, rzy + ryz, rzz - rxx - ryy, 0],
                [ryz - rzy, rzx - rxz, rxy - ryx, rxx + ryy + rzz],
            ]
        )
        / 3.0
    )
    eigvals, eigvecs = np.linalg.eigh(k)
    q = eigvecs[[3, 0, 1, 2], np.argmax(eigvals)]
    return -q if q[0] < 0 else q


def camera_center(pose: RigidPose) -> np.ndarray:
    """Camera center in world coordinates, -R^T t."""
    return -pose.rotation_matrix().T @ pose.tvec


def project(point: np.ndarray, view: PosedView):
    """Pinhole projection of a world point; None when out of view.

    Out of view means non-positive depth or a projection outside the
    samplable extents [0, W-1] x [0, H-1].
    """
    point = np.asarray(point, dtype=np.float64)
    cam = view.camera
    p_c = view.pose.rotation_matrix() @ point + view.pose.tvec
    if np.allclose(p_c, 0.0, atol=1e-12):
        raise ValueError("point coincides with the camera center")
    z = p_c[2]
    if z <= 0:
        return None
    u = cam.fx * p_c[0] / z + cam.cx
    v = cam.fy * p_c[1] / z + cam.cy
    if not (0.0 <= u <= cam.width - 1 and 0.0 <= v <= cam.height - 1):
        return None
    return u, v


def sample_pixel(view: PosedView, u: float, v: float) -> np.ndarray:
    """Bilinear interpolation of the four texels around (u, v)."""
    cam = view.camera
    if not (0.0 <= u <= cam.width - 1 and 0.0 <= v <= cam.height - 1):
        raise ValueError(f"sample coordinates ({u}, {v}) out of range")
    c0 = int(np.floor(u))
    r0 = int(np.floor(v))
    c1 = min(c0 + 1, cam.width - 1)
    r1 = min(r0 + 1, cam.height - 1)
    fu = u - c0
    fv = v - r0
    img = view.image
    top = (1 - fu) * img[r0, c0].astype(np.float64) + fu * img[r0, c1]
    bottom = (1 - fu) * img[r1, c0].astype(np.float64) + fu * img[r1, c1]
    return (1 - fv) * top + fv * bottom


def observation_frame(viewpoints, origin) -> np.ndarray:
    """Orthonormal frame (rows x, y, z) centered on a surface point.

    z is the mean direction toward the observing viewpoints, x the projection
    of world-up onto the tangent plane (world-x fallback when parallel). Keeps
    typical observations away from the polar singularity.
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(viewpoints, dtype=np.float64) - origin
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("viewpoint coincides with the surface point")
    dirs = dirs / norms[:, None]
    z = dirs.mean(axis=0)
    zn = np.linalg.norm(z)
    z = dirs[0] if zn < 1e-9 else z / zn  # antipodal rigs cancel the mean
    x = WORLD_UP - np.dot(WORLD_UP, z) * z
    if np.linalg.norm(x) < 1e-8:
        x = np.array([1.0, 0.0, 0.0]) - z[0] * z
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def to_spherical(viewpoint, origin, frame: np.ndarray):
    """(azimuth, polar) of the direction origin->viewpoint in `frame`.

    Polar is the angle from the frame z-axis in [0, pi]; azimuth the atan2
    angle in the frame xy-plane, in [-pi, pi).
    """
    d = np.asarray(viewpoint, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    n = np.linalg.norm(d)
    if n < 1e-15:
        raise ValueError("zero-length direction")
    local = frame @ (d / n)
    polar = float(np.arccos(np.clip(local[2], -1.0, 1.0)))
    azimuth = float(np.arctan2(local[1], local[0]))
    if azimuth == np.pi:
        azimuth = -np.pi
    return azimuth, polar


def from_spherical(azimuth: float, polar: float, frame: np.ndarray) -> np.ndarray:
    """Unit direction for (azimuth, polar); inverse of to_spherical."""
    local = np.array(
        [
            np.sin(polar) * np.cos(azimuth),
            np.sin(polar) * np.sin(azimuth),
            np.cos(polar),
        ]
    )
    return frame.T @ local


def angular_disparity(a, b, o) -> float:
    """Angle in [0, pi] subtended at o by points a and b.

    Computed as atan2(|cross|, dot), which equals the arccos of the clamped
    unit dot product but stays exact for coincident directions and is well
    conditioned near 0 and pi.
    """
    da = np.asarray(a, dtype=np.float64) - np.asarray(o, dtype=np.float64)
    db = np.asarray(b, dtype=np.float64) - np.asarray(o, dtype=np.float64)
    if np.linalg.norm(da) < 1e-15 or np.linalg.norm(db) < 1e-15:
        raise ValueError("degenerate angular disparity: endpoint equals origin")
    return float(np.arctan2(np.linalg.norm(np.cross(da, db)), np.dot(da, db)))


def visibility_filter(point, views, track_image_ids=None, frame=None):
    """Collate the pixels observing a surface point.

    point may be a 3-vector or anything with .xyz / .track; when the point
    carries a COLMAP track (or track_image_ids is given) only those views are
    considered, otherwise every view is tested geometrically. Returns one
    ObservationRay per view with positive depth and an in-bounds projection,
    ordered by path_index; spherical angles use `frame` (built from the
    accepted viewpoints when not supplied).
    """
    xyz = np.asarray(getattr(point, "xyz", point), dtype=np.float64)
    if track_image_ids is None and hasattr(point, "track"):
        track_image_ids = {image_id for image_id, _ in point.track}
    hits = []
    for view in sorted(views, key=lambda v: v.path_index):
        if track_image_ids is not None and view.image_id not in track_image_ids:
            continue
        uv = project(xyz, view)
        if uv is None:
            continue
        hits.append((view, uv, camera_center(view.pose)))
    if not hits:
        return []
    if frame is None:
        frame = observation_frame([c for _, _, c in hits], xyz)
    rays = []
    for view, (u, v), center in hits:
        azimuth, polar = to_spherical(center, xyz, frame)
        rays.append(
            ObservationRay(
                viewpoint=center,
                pixel_value=sample_pixel(view, u, v),
                azimuth=azimuth,
                polar=polar,
                path_index=view.path_index,
            )
        )
    return rays
