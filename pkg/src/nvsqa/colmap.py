"""Readers and writers for COLMAP sparse-reconstruction files.

Binary layouts (all little-endian):
  cameras.bin   u64 count; per camera: u32 id, i32 model_id, u64 width,
                u64 height, f64 params[n] with n fixed by the model.
  images.bin    u64 count; per image: u32 id, 4 x f64 qvec (w,x,y,z),
                3 x f64 tvec, u32 camera_id, name bytes + NUL, u64 n2d,
                then n2d x (f64 x, f64 y, u64 point3d_id; 2^64-1 = none).
  points3D.bin  u64 count; per point: u64 id, 3 x f64 xyz, 3 x u8 rgb,
                f64 error, u64 track_len, track_len x (u32 image_id,
                u32 point2d_idx).

The text variants are the standard `cameras.txt` / `images.txt` /
`points3D.txt` with `#` comment lines. Only SIMPLE_PINHOLE (0) and
PINHOLE (1) camera models are supported.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import PinholeCamera, RigidPose

INVALID_POINT3D_ID = 2**64 - 1

CAMERA_MODELS = {
    0: ("SIMPLE_PINHOLE", 3),
    1: ("PINHOLE", 4),
}
CAMERA_MODEL_IDS = {name: mid for mid, (name, _) in CAMERA_MODELS.items()}


class ColmapError(ValueError):
    pass


class TruncatedFileError(ColmapError):
    pass


class UnsupportedCameraModelError(ColmapError):
    pass


@dataclass
class ImageRecord:
    image_id: int
    pose: RigidPose
    camera_id: int
    name: str
    points2d: np.ndarray  # (n, 2) float64
    point3d_ids: np.ndarray  # (n,) uint64, INVALID_POINT3D_ID when unmatched


@dataclass
class SparsePoint:
    id: int
    xyz: np.ndarray
    rgb: np.ndarray  # 3 x uint8
    reproj_error: float
    track: list  # [(image_id, point2d_idx), ...]

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64)
        if not np.all(np.isfinite(self.xyz)):
            raise ColmapError(f"point {self.id} has non-finite coordinates")
        self.rgb = np.asarray(self.rgb, dtype=np.uint8)


@dataclass
class SceneBundle:
    cameras: dict  # id -> PinholeCamera
    views: list  # of geometry.PosedView
    points: list  # of SparsePoint

    def __post_init__(self):
        ids = {v.image_id for v in self.views}
        for point in self.points:
            for image_id, _ in point.track:
                if image_id not in ids:
                    raise ColmapError(
                        f"track of point {point.id} references unknown image {image_id}"
                    )


class _Reader:
    """Length-checked cursor over a byte buffer."""

    def __init__(self, data: bytes, path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        if self.offset + size > len(self.data):
            raise TruncatedFileError(
                f"{self.path}: truncated at byte {self.offset} "
                f"(needed {size} more, {len(self.data) - self.offset} available)"
            )
        values = struct.unpack_from("<" + fmt, self.data, self.offset)
        self.offset += size
        return values

    def take_cstring(self) -> str:
        end = self.data.find(b"\x00", self.offset)
        if end < 0:
            raise TruncatedFileError(
                f"{self.path}: unterminated string at byte {self.offset}"
            )
        raw = self.data[self.offset : end]
        self.offset = end + 1
        return raw.decode("utf-8")

    def expect_end(self):
        if self.offset != len(self.data):
            raise ColmapError(
                f"{self.path}: {len(self.data) - self.offset} trailing bytes "
                f"after byte {self.offset}"
            )


def _data_lines(path):
    with open(path, "r") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                yield line


def _camera_from_params(camera_id, model_name, width, height, params):
    if model_name == "SIMPLE_PINHOLE":
        f, cx, cy = params
        fx = fy = f
    else:
        fx, fy, cx, cy = params
    try:
        return PinholeCamera(fx=fx, fy=fy, cx=cx, cy=cy, width=int(width), height=int(height))
    except ValueError as exc:
        raise ColmapError(f"camera {camera_id}: {exc}") from exc


def _pose_from_qvec(qvec, tvec, context):
    q = np.asarray(qvec, dtype=np.float64)
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > 1e-3:
        raise ColmapError(f"{context}: quaternion norm {norm:.6f} deviates beyond 1e-3")
    if abs(norm - 1.0) > 1e-6:
        warnings.warn(f"{context}: normalizing quaternion with norm {norm:.8f}")
        q = q / norm
    return RigidPose(qvec=q, tvec=np.asarray(tvec, dtype=np.float64))


def read_cameras(path) -> dict:
    """Parse cameras.bin or cameras.txt into {id: PinholeCamera}."""
    path = Path(path)
    if path.suffix == ".txt":
        return _read_cameras_text(path)
    reader = _Reader(path.read_bytes(), path)
    (count,) = reader.take("Q")
    cameras = {}
    for _ in range(count):
        camera_id, model_id, width, height = reader.take("IiQQ")
        if model_id not in CAMERA_MODELS:
            raise UnsupportedCameraModelError(
                f"{path}: camera {camera_id} uses unsupported model id {model_id}"
            )
        name, n_params = CAMERA_MODELS[model_id]
        params = reader.take("d" * n_params)
        cameras[camera_id] = _camera_from_params(camera_id, name, width, height, params)
    reader.expect_end()
    return cameras


def _read_cameras_text(path) -> dict:
    cameras = {}
    for line in _data_lines(path):
        elems = line.split()
        camera_id = int(elems[0])
        model_name = elems[1]
        if model_name not in CAMERA_MODEL_IDS:
            raise UnsupportedCameraModelError(
                f"{path}: camera {camera_id} uses unsupported model {model_name}"
            )
        width, height = int(elems[2]), int(elems[3])
        params = [float(x) for x in elems[4:]]
        expected = CAMERA_MODELS[CAMERA_MODEL_IDS[model_name]][1]
        if len(params) != expected:
            raise ColmapError(
                f"{path}: camera {camera_id} has {len(params)} params, expected {expected}"
            )
        cameras[camera_id] = _camera_from_params(camera_id, model_name, width, height, params)
    return cameras


def read_images(path) -> list:
    """Parse images.bin or images.txt into ImageRecord objects."""
    path = Path(path)
    if path.suffix == ".txt":
        return _read_images_text(path)
    reader = _Reader(path.read_bytes(), path)
    (count,) = reader.take("Q")
    images = []
    for _ in range(count):
        (image_id,) = reader.take("I")
        qvec = reader.take("dddd")
        tvec = reader.take("ddd")
        (camera_id,) = reader.take("I")
        name = reader.take_cstring()
        (n2d,) = reader.take("Q")
        xy = np.empty((n2d, 2), dtype=np.float64)
        p3d = np.empty(n2d, dtype=np.uint64)
        for j in range(n2d):
            x, y, pid = reader.take("ddQ")
            xy[j] = (x, y)
            p3d[j] = pid
        pose = _pose_from_qvec(qvec, tvec, f"{path}: image {image_id}")
        images.append(ImageRecord(image_id, pose, camera_id, name, xy, p3d))
    reader.expect_end()
    return images


def _read_images_text(path) -> list:
    images = []
    with open(path, "r") as fh:
        while True:
            line = fh.readline()
            if not line:
                break
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            elems = line.split()
            image_id = int(elems[0])
            qvec = [float(x) for x in elems[1:5]]
            tvec = [float(x) for x in elems[5:8]]
            camera_id = int(elems[8])
            name = elems[9]
            # the very next line holds the 2-D points; it may be blank
            pts = fh.readline().split()
            images.append(
                _image_from_text(path, image_id, qvec, tvec, camera_id, name, pts)
            )
    return images


def _image_from_text(path, image_id, qvec, tvec, camera_id, name, pts):
    xy = np.array(
        [[float(x), float(y)] for x, y in zip(pts[0::3], pts[1::3])],
        dtype=np.float64,
    ).reshape(-1, 2)
    p3d = np.array(
        [INVALID_POINT3D_ID if int(p) < 0 else int(p) for p in pts[2::3]],
        dtype=np.uint64,
    )
    pose = _pose_from_qvec(qvec, tvec, f"{path}: image {image_id}")
    return ImageRecord(image_id, pose, camera_id, name, xy, p3d)


def read_points3d(path) -> list:
    """Parse points3D.bin or points3D.txt into SparsePoint objects."""
    path = Path(path)
    if path.suffix == ".txt":
        return _read_points3d_text(path)
    reader = _Reader(path.read_bytes(), path)
    (count,) = reader.take("Q")
    points = []
    for _ in range(count):
        pid, x, y, z, r, g, b, error = reader.take("QdddBBBd")
        (track_len,) = reader.take("Q")
        track = [reader.take("II") for _ in range(track_len)]
        points.append(
            SparsePoint(id=pid, xyz=(x, y, z), rgb=(r, g, b), reproj_error=error, track=track)
        )
    reader.expect_end()
    return points


def _read_points3d_text(path) -> list:
    points = []
    for line in _data_lines(path):
        elems = line.split()
        pid = int(elems[0])
        xyz = [float(v) for v in elems[1:4]]
        rgb = [int(v) for v in elems[4:7]]
        error = float(elems[7])
        track = [(int(i), int(j)) for i, j in zip(elems[8::2], elems[9::2])]
        points.append(SparsePoint(id=pid, xyz=xyz, rgb=rgb, reproj_error=error, track=track))
    return points


def write_cameras(path, cameras: dict):
    path = Path(path)
    if path.suffix == ".txt":
        with open(path, "w") as fh:
            fh.write("# Camera list with one line of data per camera:\n")
            fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
            for cid in sorted(cameras):
                cam = cameras[cid]
                fh.write(
                    f"{cid} PINHOLE {cam.width} {cam.height} "
                    f"{float(cam.fx)!r} {float(cam.fy)!r} {float(cam.cx)!r} {float(cam.cy)!r}\n"
                )
        return
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(cameras)))
        for cid in sorted(cameras):
            cam = cameras[cid]
            fh.write(struct.pack("<IiQQ", cid, 1, cam.width, cam.height))
            fh.write(struct.pack("<dddd", cam.fx, cam.fy, cam.cx, cam.cy))


def write_images(path, images: list):
    path = Path(path)
    if path.suffix == ".txt":
        with open(path, "w") as fh:
            fh.write("# Image list with two lines of data per image:\n")
            fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
            fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
            for rec in images:
                q, t = rec.pose.qvec, rec.pose.tvec
                head = [rec.image_id, *(repr(float(v)) for v in q), *(repr(float(v)) for v in t)]
                fh.write(" ".join(str(v) for v in head) + f" {rec.camera_id} {rec.name}\n")
                parts = []
                for (x, y), pid in zip(rec.points2d, rec.point3d_ids):
                    shown = -1 if pid == INVALID_POINT3D_ID else int(pid)
                    parts.append(f"{float(x)!r} {float(y)!r} {shown}")
                fh.write(" ".join(parts) + "\n")
        return
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(images)))
        for rec in images:
            fh.write(struct.pack("<I", rec.image_id))
            fh.write(struct.pack("<dddd", *rec.pose.qvec))
            fh.write(struct.pack("<ddd", *rec.pose.tvec))
            fh.write(struct.pack("<I", rec.camera_id))
            fh.write(rec.name.encode("utf-8") + b"\x00")
            fh.write(struct.pack("<Q", len(rec.points2d)))
            for (x, y), pid in zip(rec.points2d, rec.point3d_ids):
                fh.write(struct.pack("<ddQ", x, y, int(pid)))


def write_points3d(path, points: list):
    path = Path(path)
    if path.suffix == ".txt":
        with open(path, "w") as fh:
            fh.write("# 3D point list with one line of data per point:\n")
            fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
            for pt in points:
                track = " ".join(f"{i} {j}" for i, j in pt.track)
                xyz = " ".join(repr(float(v)) for v in pt.xyz)
                rgb = " ".join(str(int(v)) for v in pt.rgb)
                fh.write(f"{pt.id} {xyz} {rgb} {float(pt.reproj_error)!r} {track}".strip() + "\n")
        return
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(points)))
        for pt in points:
            fh.write(struct.pack("<Qddd", pt.id, *pt.xyz))
            fh.write(struct.pack("<BBB", *(int(v) for v in pt.rgb)))
            fh.write(struct.pack("<d", pt.reproj_error))
            fh.write(struct.pack("<Q", len(pt.track)))
            for image_id, p2d_idx in pt.track:
                fh.write(struct.pack("<II", image_id, p2d_idx))


def read_model(model_dir):
    """Read (cameras, images, points) from a COLMAP model directory.

    Prefers the binary files; falls back to text when absent.
    """
    model_dir = Path(model_dir)

    def pick(stem):
        binary = model_dir / f"{stem}.bin"
        text = model_dir / f"{stem}.txt"
        if binary.exists():
            return binary
        if text.exists():
            return text
        raise FileNotFoundError(f"{model_dir} has neither {stem}.bin nor {stem}.txt")

    cameras = read_cameras(pick("cameras"))
    images = read_images(pick("images"))
    points = read_points3d(pick("points3D"))
    for rec in images:
        if rec.camera_id not in cameras:
            raise ColmapError(f"image {rec.image_id} references unknown camera {rec.camera_id}")
    return cameras, images, points


def sample_points(points: list, count: int, seed: int, round: int,
                  max_reproj_error: float = np.inf) -> list:
    """Uniform random subset without replacement, stable-sorted by point id.

    Deterministic for a given (seed, round); distinct rounds with one seed
    produce independent draws. When count >= available, all points return.
    """
    eligible = [p for p in points if p.reproj_error <= max_reproj_error]
    eligible.sort(key=lambda p: p.id)
    if count >= len(eligible):
        return list(eligible)
    rng = np.random.default_rng([seed, round])
    chosen = rng.choice(len(eligible), size=count, replace=False)
    return [eligible[i] for i in sorted(chosen)]
