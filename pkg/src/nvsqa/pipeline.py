"""Scene manifests and the manifest -> features -> training-example path.

A manifest is a JSON file naming the scene's views (with their order along
the camera path), the COLMAP sparse model directory, and an optional JOD
label. Paths are resolved relative to the manifest's directory.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import colmap, pnsg
from .geometry import PosedView
from .images import read_ppm
from .model import TrainingExample
from .viewwise import view_sequence_features

REQUIRED_KEYS = ("scene_id", "views", "colmap_dir")


@dataclass
class SceneManifest:
    scene_id: str
    views: list  # [{"path": str, "path_index": int}, ...]
    colmap_dir: Path
    dataset: str = "default"
    method_id: str = "unknown"
    jod: float | None = None
    root: Path = Path(".")

    def view_paths(self):
        ordered = sorted(self.views, key=lambda v: v["path_index"])
        return [(v["path_index"], self.root / v["path"]) for v in ordered]


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    raw = json.loads(path.read_text())
    for key in REQUIRED_KEYS:
        if key not in raw:
            raise ValueError(f"{path}: manifest missing required key {key!r}")
    views = raw["views"]
    if not views:
        raise ValueError(f"{path}: manifest lists no views")
    indices = [v.get("path_index") for v in views]
    if sorted(indices) != list(range(len(views))):
        raise ValueError(
            f"{path}: path_index values must cover 0..{len(views) - 1} exactly"
        )
    root = path.parent
    manifest = SceneManifest(
        scene_id=raw["scene_id"],
        views=views,
        colmap_dir=root / raw["colmap_dir"],
        dataset=raw.get("dataset", "default"),
        method_id=raw.get("method_id", "unknown"),
        jod=raw.get("jod"),
        root=root,
    )
    for _, view_path in manifest.view_paths():
        if not view_path.exists():
            raise FileNotFoundError(f"{path}: view image {view_path} not found")
    if not manifest.colmap_dir.exists():
        raise FileNotFoundError(f"{path}: colmap dir {manifest.colmap_dir} not found")
    return manifest


def write_manifest(path, scene_id, view_names, colmap_dir, dataset="default",
                   method_id="unknown", jod=None):
    payload = {
        "scene_id": scene_id,
        "dataset": dataset,
        "method_id": method_id,
        "views": [{"path": name, "path_index": i} for i, name in enumerate(view_names)],
        "colmap_dir": str(colmap_dir),
    }
    if jod is not None:
        payload["jod"] = jod
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_scene(manifest: SceneManifest) -> colmap.SceneBundle:
    """Assemble a SceneBundle from the manifest's images and COLMAP model.

    COLMAP image records are matched to manifest views by file name.
    """
    cameras, records, points = colmap.read_model(manifest.colmap_dir)
    by_name = {rec.name: rec for rec in records}
    views = []
    for path_index, view_path in manifest.view_paths():
        rec = by_name.get(view_path.name)
        if rec is None:
            raise ValueError(
                f"view {view_path.name} has no matching image in the COLMAP model"
            )
        views.append(
            PosedView(
                image=read_ppm(view_path),
                camera=cameras[rec.camera_id],
                pose=rec.pose,
                path_index=path_index,
                image_id=rec.image_id,
                name=rec.name,
            )
        )
    return colmap.SceneBundle(cameras=cameras, views=views, points=points)


def scene_point_tensors(bundle: colmap.SceneBundle, bins: int, resample: int,
                        n_points: int, seed: int, round: int):
    """Sample points, gather observations, and tensorize their gradients."""
    chosen = colmap.sample_points(bundle.points, n_points, seed=seed, round=round)
    if not chosen:
        raise ValueError("scene has no sparse points to sample")
    observations = [pnsg.observe_point(p, bundle.views) for p in chosen]
    tensors = pnsg.scene_tensors(observations, b=bins, length=resample)
    ids = [o.point.id for o in sorted(observations, key=lambda o: o.point.id)]
    xyz = np.stack([t.point_xyz for t in tensors])
    return ids, tensors, xyz


def example_from_bundle(bundle, manifest: SceneManifest, bins, resample,
                        n_points, seed, round) -> TrainingExample:
    _, tensors, xyz = scene_point_tensors(bundle, bins, resample, n_points, seed, round)
    return TrainingExample(
        scene_id=manifest.scene_id,
        view_features=view_sequence_features(bundle.views).astype(np.float32),
        point_values=np.stack([t.values for t in tensors]),
        point_masks=np.stack([t.mask for t in tensors]),
        point_xyz=xyz,
        label=manifest.jod,
        method_id=manifest.method_id,
        dataset=manifest.dataset,
    )


def examples_from_manifest(manifest: SceneManifest, bins, resample, n_points,
                           seed, rounds) -> list:
    bundle = load_scene(manifest)
    return [
        example_from_bundle(bundle, manifest, bins, resample, n_points, seed, r)
        for r in range(rounds)
    ]


def max_workers_from_env() -> int:
    """Parallelism cap from NQA_THREADS (default 1)."""
    value = os.environ.get("NQA_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        raise ValueError(f"NQA_THREADS must be an integer, got {value!r}") from None


def examples_from_manifests(manifests, bins, resample, n_points, seed, rounds,
                            max_workers=None) -> list:
    """Feature extraction across scenes, optionally thread-parallel."""
    workers = max_workers or max_workers_from_env()
    if workers <= 1 or len(manifests) <= 1:
        batches = [
            examples_from_manifest(m, bins, resample, n_points, seed, rounds)
            for m in manifests
        ]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(
                pool.map(
                    lambda m: examples_from_manifest(m, bins, resample, n_points, seed, rounds),
                    manifests,
                )
            )
    return [ex for batch in batches for ex in batch]
