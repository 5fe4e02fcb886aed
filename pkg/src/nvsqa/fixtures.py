"""Analytic synthetic scenes with closed-form shading.

The renderer intersects pinhole rays with a plane or sphere and shades each
hit from the true spherical angles of the camera about the hit point, so
every pixel has a known ground-truth value. Exported bundles (images plus a
COLMAP sparse model with exact poses, points, and visibility tracks) feed the
same loaders as real scenes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import colmap
from .geometry import (
    PinholeCamera,
    PosedView,
    RigidPose,
    camera_center,
    project,
    quaternion_from_matrix,
)
from .images import write_ppm

BACKGROUND = 0.5  # mid-gray keeps MSCN statistics non-degenerate


@dataclass(frozen=True)
class Plane:
    """Bounded square patch: |u|, |v| <= half_extent around `origin`."""

    origin: np.ndarray
    normal: np.ndarray
    half_extent: float = 1.0

    def axes(self):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        seed = np.array([0.0, 1.0, 0.0]) if abs(n[0]) > 0.9 else np.array([1.0, 0.0, 0.0])
        u = seed - np.dot(seed, n) * n
        u /= np.linalg.norm(u)
        return u, np.cross(n, u), n

    def intersect(self, origins, dirs):
        u, v, n = self.axes()
        o = np.asarray(self.origin, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((o - origins) @ n) / denom
        points = origins + t[:, None] * dirs
        rel = points - o
        hit = (
            (np.abs(denom) > 1e-12)
            & (t > 1e-9)
            & (np.abs(rel @ u) <= self.half_extent)
            & (np.abs(rel @ v) <= self.half_extent)
        )
        return t, points, hit


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def intersect(self, origins, dirs):
        c = np.asarray(self.center, dtype=np.float64)
        oc = origins - c
        b = np.einsum("ij,ij->i", oc, dirs)
        disc = b * b - (np.einsum("ij,ij->i", oc, oc) - self.radius**2)
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t = np.where(-b - sq > 1e-9, -b - sq, -b + sq)
        hit = ok & (t > 1e-9)
        points = origins + t[:, None] * dirs
        return t, points, hit


def world_spherical(points, viewpoint):
    """(azimuth, polar) of each point->viewpoint direction in world axes."""
    d = np.asarray(viewpoint, dtype=np.float64) - points
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    polar = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    azimuth = np.arctan2(d[:, 1], d[:, 0])
    return azimuth, polar


@dataclass(frozen=True)
class Shading:
    """Color = albedo(point) + k_azi * (azi - ref_azi) + k_pol * (pol - ref_pol).

    Angles are the world-frame spherical angles of the camera about the hit
    point, so pixel differences across views are exactly linear in the
    angular offsets. k = 0 is the view-independent (lambertian) case.
    """

    albedo: object  # RGB triple or callable(points (n,3)) -> (n,3)
    k_azi: np.ndarray = field(default_factory=lambda: np.zeros(3))
    k_pol: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ref_azimuth: float = 0.0
    ref_polar: float = np.pi / 2

    @classmethod
    def lambertian(cls, albedo):
        return cls(albedo=albedo)

    @classmethod
    def angular_linear(cls, base, k_azi=0.0, k_pol=0.0, ref_azimuth=0.0, ref_polar=np.pi / 2):
        return cls(
            albedo=base,
            k_azi=np.broadcast_to(np.asarray(k_azi, dtype=np.float64), (3,)).copy(),
            k_pol=np.broadcast_to(np.asarray(k_pol, dtype=np.float64), (3,)).copy(),
            ref_azimuth=ref_azimuth,
            ref_polar=ref_polar,
        )

    @property
    def view_independent(self) -> bool:
        return not (np.any(self.k_azi) or np.any(self.k_pol))

    def base_color(self, points):
        if callable(self.albedo):
            return np.asarray(self.albedo(points), dtype=np.float64)
        return np.broadcast_to(np.asarray(self.albedo, dtype=np.float64), (len(points), 3))

    def color(self, points, viewpoint):
        out = self.base_color(points).copy()
        if not self.view_independent:
            azimuth, polar = world_spherical(points, viewpoint)
            out = out + np.outer(azimuth - self.ref_azimuth, self.k_azi)
            out = out + np.outer(polar - self.ref_polar, self.k_pol)
        return out


def sinusoid_texture(seed: int, base=0.5, contrast=0.2, frequency=2.0):
    """Smooth random texture: low sampling error under bilinear interpolation."""
    rng = np.random.default_rng(seed)
    freqs = rng.uniform(0.5, 1.0, size=(3, 3)) * frequency
    phases = rng.uniform(0, 2 * np.pi, size=3)
    base = np.broadcast_to(np.asarray(base, dtype=np.float64), (3,))

    def albedo(points):
        phase = points @ freqs.T + phases
        return base + contrast * np.sin(phase)

    return albedo


def look_at_pose(center, target, up_hint=None) -> RigidPose:
    """World-to-camera pose for a camera at `center` looking at `target`."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward = forward / np.linalg.norm(forward)
    if up_hint is None:
        up_hint = np.array([0.0, 0.0, 1.0])
        if abs(np.dot(up_hint, forward)) > 0.99:
            up_hint = np.array([0.0, 1.0, 0.0])
    x_cam = np.cross(up_hint, forward)
    x_cam = x_cam / np.linalg.norm(x_cam)
    y_cam = np.cross(forward, x_cam)
    rot = np.stack([x_cam, y_cam, forward])
    return RigidPose(qvec=quaternion_from_matrix(rot), tvec=-rot @ center)


def default_camera(size: int = 64, focal: float | None = None) -> PinholeCamera:
    focal = focal if focal is not None else 1.2 * size
    return PinholeCamera(
        fx=focal, fy=focal, cx=(size - 1) / 2.0, cy=(size - 1) / 2.0,
        width=size, height=size,
    )


def orbit_rig(target, radius, n_views, camera=None, azimuth_range=(0.0, 2 * np.pi),
              polar=1.0, endpoint=False):
    """Poses on a circle of constant polar angle about `target` (world z up)."""
    camera = camera or default_camera()
    azimuths = np.linspace(*azimuth_range, n_views, endpoint=endpoint)
    rig = []
    for az in azimuths:
        offset = radius * np.array(
            [np.sin(polar) * np.cos(az), np.sin(polar) * np.sin(az), np.cos(polar)]
        )
        rig.append((camera, look_at_pose(np.asarray(target) + offset, target)))
    return rig


def polar_arc_rig(target, radius, n_views, camera=None, azimuth=0.0,
                  polar_range=(0.35, 1.15)):
    """Poses on a meridian arc: azimuth fixed, polar angle swept."""
    camera = camera or default_camera()
    rig = []
    for pol in np.linspace(*polar_range, n_views):
        offset = radius * np.array(
            [np.sin(pol) * np.cos(azimuth), np.sin(pol) * np.sin(azimuth), np.cos(pol)]
        )
        rig.append((camera, look_at_pose(np.asarray(target) + offset, target)))
    return rig


def grid_rig(target, distance, rows, cols, spacing, camera=None):
    """Poses on a planar gantry at height `distance`, all aimed at `target`."""
    camera = camera or default_camera()
    target = np.asarray(target, dtype=np.float64)
    rig = []
    for r in range(rows):
        for c in range(cols):
            offset = np.array(
                [(c - (cols - 1) / 2) * spacing, (r - (rows - 1) / 2) * spacing, distance]
            )
            rig.append((camera, look_at_pose(target + offset, target)))
    return rig


@dataclass
class AnalyticScene:
    surface: object  # Plane or Sphere
    shading: Shading
    rig: list  # [(PinholeCamera, RigidPose), ...]
    background: float = BACKGROUND

    def surface_center(self):
        return np.asarray(
            self.surface.origin if isinstance(self.surface, Plane) else self.surface.center,
            dtype=np.float64,
        )


def render(scene: AnalyticScene, camera: PinholeCamera, pose: RigidPose,
           path_index: int = 0) -> PosedView:
    """Ray-cast one view of the scene; misses get the background color."""
    h, w = camera.height, camera.width
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    d_cam = np.stack(
        [
            (cols.ravel() - camera.cx) / camera.fx,
            (rows.ravel() - camera.cy) / camera.fy,
            np.ones(h * w),
        ],
        axis=1,
    )
    rot = pose.rotation_matrix()
    center = camera_center(pose)
    dirs = d_cam @ rot  # row-vector form of R^T d
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(center, dirs.shape)
    _, points, hit = scene.surface.intersect(origins, dirs)
    image = np.full((h * w, 3), scene.background, dtype=np.float64)
    if np.any(hit):
        image[hit] = scene.shading.color(points[hit], center)
    if image.min() < -1e-9 or image.max() > 1 + 1e-9:
        raise ValueError(
            f"shading left [0,1]: range [{image.min():.4f}, {image.max():.4f}]; "
            "reduce angular coefficients or the rig span"
        )
    return PosedView(
        image=np.clip(image, 0.0, 1.0).reshape(h, w, 3).astype(np.float32),
        camera=camera,
        pose=pose,
        path_index=path_index,
    )


def render_views(scene: AnalyticScene) -> list:
    return [
        render(scene, camera, pose, path_index=i)
        for i, (camera, pose) in enumerate(scene.rig)
    ]


def sample_surface_points(scene: AnalyticScene, n: int, seed: int,
                          margin: float = 0.9) -> np.ndarray:
    """Random points on the surface; `margin` < 1 keeps plane samples away
    from the boundary (bilinear sampling needs an on-surface neighborhood)."""
    rng = np.random.default_rng(seed)
    if isinstance(scene.surface, Plane):
        u, v, _ = scene.surface.axes()
        uv = rng.uniform(-margin, margin, size=(n, 2)) * scene.surface.half_extent
        return np.asarray(scene.surface.origin) + uv[:, :1] * u + uv[:, 1:] * v
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.asarray(scene.surface.center) + scene.surface.radius * d


def export_bundle(scene: AnalyticScene, out_dir, n_points: int = 64, seed: int = 0,
                  views=None, min_track: int = 2, maxval: int = 65535):
    """Write images + a COLMAP sparse model with exact ground truth.

    Each exported point's track lists exactly the views where it projects
    in-bounds with positive depth. Returns (bundle, image_paths).
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    sparse_dir = out_dir / "sparse" / "0"
    image_dir.mkdir(parents=True, exist_ok=True)
    sparse_dir.mkdir(parents=True, exist_ok=True)

    views = render_views(scene) if views is None else views
    cameras = {}
    camera_ids = []
    for camera, _ in scene.rig:
        if camera not in cameras.values():
            cameras[len(cameras) + 1] = camera
        camera_ids.append(next(k for k, v in cameras.items() if v == camera))

    image_paths = []
    for view in views:
        view.image_id = view.path_index + 1
        view.name = f"view{view.path_index:03d}.ppm"
        path = image_dir / view.name
        write_ppm(path, view.image, maxval=maxval)
        image_paths.append(path)

    xyz = sample_surface_points(scene, n_points, seed)
    per_view_xy = {view.image_id: [] for view in views}
    per_view_pid = {view.image_id: [] for view in views}
    points = []
    for i, p in enumerate(xyz):
        track = []
        for view in views:
            uv = project(p, view)
            if uv is None:
                continue
            track.append((view.image_id, len(per_view_xy[view.image_id])))
            per_view_xy[view.image_id].append(uv)
            per_view_pid[view.image_id].append(i + 1)
        if len(track) >= min_track:
            rgb = np.clip(scene.shading.base_color(p[None])[0], 0, 1)
            points.append(
                colmap.SparsePoint(
                    id=i + 1,
                    xyz=p,
                    rgb=np.rint(rgb * 255).astype(np.uint8),
                    reproj_error=0.0,
                    track=track,
                )
            )
        else:
            # drop the tentative 2-D entries of a rejected point
            for image_id, idx in track:
                per_view_xy[image_id].pop(idx)
                per_view_pid[image_id].pop(idx)
    # re-number tracks after removals
    index_of = {}
    for view in views:
        for slot, pid in enumerate(per_view_pid[view.image_id]):
            index_of[(view.image_id, pid)] = slot
    for pt in points:
        pt.track = [(img, index_of[(img, pt.id)]) for img, _ in pt.track]

    records = []
    for view in views:
        n2d = len(per_view_xy[view.image_id])
        records.append(
            colmap.ImageRecord(
                image_id=view.image_id,
                pose=view.pose,
                camera_id=camera_ids[view.path_index],
                name=view.name,
                points2d=np.array(per_view_xy[view.image_id], dtype=np.float64).reshape(n2d, 2),
                point3d_ids=np.array(per_view_pid[view.image_id], dtype=np.uint64).reshape(n2d),
            )
        )
    colmap.write_cameras(sparse_dir / "cameras.bin", cameras)
    colmap.write_images(sparse_dir / "images.bin", records)
    colmap.write_points3d(sparse_dir / "points3D.bin", points)
    bundle = colmap.SceneBundle(cameras=cameras, views=views, points=points)
    return bundle, image_paths
