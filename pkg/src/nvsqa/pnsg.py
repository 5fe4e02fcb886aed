"""Normalized spherical gradients of surface-point observations.

For a surface point o observed at pixels x_i, x_j, the gradient is
(I(x_i) - I(x_j)) divided by the angle subtended at o. Per point, gradients
are taken between spherically adjacent observations along two sweeps:
azimuthal (rays grouped into polar-angle bins, sorted by azimuth) and polar
(rays grouped into azimuth bins, sorted by polar angle). The per-scene
collection of both sweeps for all sampled points is the pointwise feature
set, resampled to a fixed tensor for the learned distiller.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .colmap import SparsePoint
from .geometry import ObservationRay, angular_disparity, observation_frame, visibility_filter

EPS_ANGLE = 1e-6  # rad; below this, a pair is numerically coincident

DUMP_MAGIC = b"NQAPNSG1"
DUMP_VERSION = 1


@dataclass
class SurfacePointObservations:
    point: SparsePoint
    rays: list  # of ObservationRay
    frame: np.ndarray  # 3x3 orthonormal, rows x/y/z


@dataclass
class NsgSample:
    gradient: np.ndarray  # RGB per radian
    mid_azimuth: float
    mid_polar: float


@dataclass
class PnsgFeature:
    azi_bins: list  # b lists of NsgSample (azimuthal sweep)
    pol_bins: list  # b lists of NsgSample (polar sweep)
    point_xyz: np.ndarray


@dataclass
class PnsgTensor:
    values: np.ndarray  # (2, b, L, 3) float32; axis 0 = azi sweep, 1 = pol sweep
    mask: np.ndarray  # (2, b) float32, 0 where a bin had < 2 rays
    point_xyz: np.ndarray


def observe_point(point: SparsePoint, views, use_track: bool = True) -> SurfacePointObservations:
    """Gather a point's observing rays and its data-driven spherical frame."""
    track_ids = {img for img, _ in point.track} if use_track and point.track else None
    rays = visibility_filter(point.xyz, views, track_image_ids=track_ids)
    frame = (
        observation_frame([r.viewpoint for r in rays], point.xyz)
        if rays
        else np.eye(3)
    )
    return SurfacePointObservations(point=point, rays=rays, frame=frame)


def nsg(x_i: ObservationRay, x_j: ObservationRay, o) -> NsgSample:
    """Pixel-value difference per radian of angular disparity about o."""
    disparity = angular_disparity(x_i.viewpoint, x_j.viewpoint, np.asarray(o, dtype=np.float64))
    if disparity <= EPS_ANGLE:
        raise ValueError(
            f"angular disparity {disparity:.2e} below {EPS_ANGLE:.0e}; pair rejected"
        )
    gradient = (np.asarray(x_i.pixel_value, dtype=np.float64) - x_j.pixel_value) / disparity
    return NsgSample(
        gradient=gradient,
        mid_azimuth=0.5 * (x_i.azimuth + x_j.azimuth),
        mid_polar=0.5 * (x_i.polar + x_j.polar),
    )


def _nearest_bin(value: float, lo: float, hi: float, b: int) -> int:
    """Index of the nearest of b evenly spaced bins over [lo, hi].

    Bin centers sit mid-interval; a value exactly between two centers goes
    to the lower-index bin.
    """
    t = (value - lo) * b / (hi - lo)
    idx = int(np.floor(t))
    if idx > 0 and idx == t:  # exactly on a boundary: tie to the lower bin
        idx -= 1
    return min(max(idx, 0), b - 1)


def bin_rays(obs: SurfacePointObservations, b: int):
    """Group rays for both sweeps.

    Azimuthal sweep: b bins partition polar in [0, pi]; rays sorted by
    azimuth within each bin. Polar sweep mirrors it: bins over azimuth in
    [-pi, pi), sorted by polar. Equal sort keys fall back to path_index.
    """
    if b < 1:
        raise ValueError("bin count must be >= 1")
    azi_bins = [[] for _ in range(b)]
    pol_bins = [[] for _ in range(b)]
    for ray in obs.rays:
        azi_bins[_nearest_bin(ray.polar, 0.0, np.pi, b)].append(ray)
        pol_bins[_nearest_bin(ray.azimuth, -np.pi, np.pi, b)].append(ray)
    for rays in azi_bins:
        rays.sort(key=lambda r: (r.azimuth, r.path_index))
    for rays in pol_bins:
        rays.sort(key=lambda r: (r.polar, r.path_index))
    return azi_bins, pol_bins


def nsg_axis(bins, origin, wrap_azimuth: bool = False):
    """Adjacent-pair gradients per sorted bin; m rays give m - 1 samples.

    With wrap_azimuth, the azimuthal sweep also pairs last-with-first to
    close the loop across +-pi (off by default).
    """
    out = []
    for rays in bins:
        samples = []
        pairs = list(zip(rays[:-1], rays[1:]))
        if wrap_azimuth and len(rays) > 2:
            pairs.append((rays[-1], rays[0]))
        for a, b_ in pairs:
            try:
                samples.append(nsg(a, b_, origin))
            except ValueError:
                continue  # numerically coincident viewpoints
        out.append(samples)
    return out


def pnsg_point(obs: SurfacePointObservations, b: int, wrap_azimuth: bool = False) -> PnsgFeature:
    azi_bins, pol_bins = bin_rays(obs, b)
    origin = obs.point.xyz
    return PnsgFeature(
        azi_bins=nsg_axis(azi_bins, origin, wrap_azimuth=wrap_azimuth),
        pol_bins=nsg_axis(pol_bins, origin),
        point_xyz=np.asarray(origin, dtype=np.float64),
    )


def pnsg_scene(points_obs, b: int, wrap_azimuth: bool = False):
    """Per-point azimuthal and polar gradient bins for a whole scene.

    Input order does not matter: points are processed in point-id order and
    each point's rays are already path-ordered.
    """
    if not points_obs:
        raise ValueError("pnsg_scene needs at least one observed point")
    ordered = sorted(points_obs, key=lambda o: o.point.id)
    return [pnsg_point(obs, b, wrap_azimuth=wrap_azimuth) for obs in ordered]


def _resample(samples, coords, length: int) -> np.ndarray:
    """Linear resampling of (m, 3) gradients against their mid-angle coords."""
    values = np.asarray([s.gradient for s in samples], dtype=np.float64)
    m = len(samples)
    if m == length:
        return values
    if m == 1:
        return np.repeat(values, length, axis=0)
    span = coords[-1] - coords[0]
    if span <= 0:  # degenerate coordinates: fall back to index spacing
        coords = np.arange(m, dtype=np.float64)
        span = m - 1.0
    targets = np.linspace(coords[0], coords[-1], length)
    return np.stack([np.interp(targets, coords, values[:, c]) for c in range(3)], axis=1)


def to_tensor(feature: PnsgFeature, length: int) -> PnsgTensor:
    """Fixed-shape (2, b, L, 3) encoding of a point's gradient bins.

    Bins without samples are zero rows with mask 0; populated bins are
    linearly resampled to L positions along their mid-angle coordinate.
    """
    if length < 1:
        raise ValueError("resample length must be >= 1")
    b = len(feature.azi_bins)
    values = np.zeros((2, b, length, 3), dtype=np.float32)
    mask = np.zeros((2, b), dtype=np.float32)
    for axis, bins, coord in (
        (0, feature.azi_bins, "mid_azimuth"),
        (1, feature.pol_bins, "mid_polar"),
    ):
        for i, samples in enumerate(bins):
            if not samples:
                continue
            coords = np.asarray([getattr(s, coord) for s in samples], dtype=np.float64)
            values[axis, i] = _resample(samples, coords, length).astype(np.float32)
            mask[axis, i] = 1.0
    return PnsgTensor(values=values, mask=mask, point_xyz=feature.point_xyz)


def scene_tensors(points_obs, b: int, length: int, wrap_azimuth: bool = False):
    return [to_tensor(f, length) for f in pnsg_scene(points_obs, b, wrap_azimuth=wrap_azimuth)]


def write_dump(path, tensors, point_ids=None):
    """Serialize per-point tensors: 16-byte header (magic + version), then
    u32 b, u32 L, u64 count, and per point u64 id, 3 x f64 xyz, (2*b) f32
    mask, 2*b*L*3 f32 values. Little-endian throughout.
    """
    if not tensors:
        raise ValueError("nothing to write")
    b = tensors[0].values.shape[1]
    length = tensors[0].values.shape[2]
    if point_ids is None:
        point_ids = range(1, len(tensors) + 1)
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC + struct.pack("<II", DUMP_VERSION, 0))
        fh.write(struct.pack("<IIQ", b, length, len(tensors)))
        for pid, t in zip(point_ids, tensors):
            if t.values.shape != (2, b, length, 3):
                raise ValueError(f"inconsistent tensor shape {t.values.shape}")
            fh.write(struct.pack("<Q", int(pid)))
            fh.write(struct.pack("<ddd", *t.point_xyz))
            fh.write(t.mask.astype("<f4").tobytes())
            fh.write(t.values.astype("<f4").tobytes())


def read_dump(path):
    """Inverse of write_dump; returns (point_ids, tensors)."""
    raw = Path(path).read_bytes()
    if raw[:8] != DUMP_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}")
    version, _ = struct.unpack_from("<II", raw, 8)
    if version != DUMP_VERSION:
        raise ValueError(f"{path}: unsupported dump version {version}")
    b, length, count = struct.unpack_from("<IIQ", raw, 16)
    offset = 32
    ids, tensors = [], []
    for _ in range(count):
        (pid,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        xyz = np.array(struct.unpack_from("<ddd", raw, offset))
        offset += 24
        mask = np.frombuffer(raw, dtype="<f4", count=2 * b, offset=offset).reshape(2, b)
        offset += 8 * b
        n_vals = 2 * b * length * 3
        values = np.frombuffer(raw, dtype="<f4", count=n_vals, offset=offset).reshape(
            2, b, length, 3
        )
        offset += 4 * n_vals
        ids.append(pid)
        tensors.append(PnsgTensor(values=values.copy(), mask=mask.copy(), point_xyz=xyz))
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after {offset}")
    return ids, tensors
