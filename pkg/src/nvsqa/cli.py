"""Batch command-line interface.

Subcommands: synth (write a synthetic fixture scene), extract (PNSG and
per-view feature dumps), train, predict, and evaluate. Every command is
deterministic given --seed; NQA_THREADS caps internal parallelism. Errors
exit nonzero with one machine-parsable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import fixtures, metrics, pipeline, pnsg
from .model import ModelConfig, load_model, save_model, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nvsqa", description="No-reference quality assessment for NVS scenes"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic fixture scene to disk")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--scene-id", default="fixture")
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--method-id", default="analytic")
    p.add_argument("--shading", choices=["lambertian", "angular"], default="lambertian")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--points", type=int, default=64)
    p.add_argument("--k-pol", type=float, default=0.3)
    p.add_argument("--k-azi", type=float, default=0.0)
    p.add_argument("--texture-contrast", type=float, default=0.15)
    p.add_argument("--jod", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("extract", help="dump PNSG tensors and per-view features")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--bins", type=int, default=8)
    p.add_argument("--resample", type=int, default=16)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rounds", type=int, default=10)

    p = sub.add_parser("train", help="train a quality model from labeled manifests")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--manifests", required=True, nargs="+", type=Path)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--bins", type=int, default=8)
    p.add_argument("--resample", type=int, default=16)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ablate-pointwise", action="store_true")
    p.add_argument("--log", type=Path, default=None, help="training log CSV")

    p = sub.add_parser("predict", help="estimate JOD scores for manifests")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--manifests", required=True, nargs="+", type=Path)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("evaluate", help="score predictions against labels")
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--truth", required=True, type=Path)
    p.add_argument("--json", type=Path, default=None, help="write the report JSON here")
    p.add_argument("--table", action="store_true", help="print the aligned table")
    return parser


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    camera = fixtures.default_camera(size=args.image_size, focal=4.5 * args.image_size)
    albedo = fixtures.sinusoid_texture(
        seed=args.seed, base=0.5, contrast=args.texture_contrast
    )
    if args.shading == "lambertian":
        shading = fixtures.Shading.lambertian(albedo)
    else:
        shading = fixtures.Shading(
            albedo=albedo,
            k_azi=np.full(3, args.k_azi),
            k_pol=np.full(3, args.k_pol),
            ref_polar=0.75,
        )
    scene = fixtures.AnalyticScene(
        surface=fixtures.Plane(
            origin=np.zeros(3), normal=np.array([0.0, 0.0, 1.0]), half_extent=0.4
        ),
        shading=shading,
        rig=fixtures.orbit_rig(
            np.zeros(3), radius=6.0, n_views=args.views, polar=0.7, camera=camera
        ),
    )
    out = Path(args.out)
    bundle, image_paths = fixtures.export_bundle(
        scene, out, n_points=args.points, seed=args.seed
    )
    pipeline.write_manifest(
        out / "manifest.json",
        scene_id=args.scene_id,
        view_names=[str(p.relative_to(out)) for p in image_paths],
        colmap_dir="sparse/0",
        dataset=args.dataset,
        method_id=args.method_id,
        jod=args.jod,
    )
    print(f"wrote {len(image_paths)} views, {len(bundle.points)} points to {out}")
    return 0


def cmd_extract(args) -> int:
    manifest = pipeline.load_manifest(args.manifest)
    bundle = pipeline.load_scene(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .viewwise import view_sequence_features

    feats = view_sequence_features(bundle.views)
    view_csv = out / f"{manifest.scene_id}_viewwise.csv"
    with open(view_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path_index"] + [f"f{i:02d}" for i in range(feats.shape[0])])
        for idx in range(feats.shape[1]):
            writer.writerow([idx] + [repr(v) for v in feats[:, idx]])
    for round_ in range(args.rounds):
        ids, tensors, _ = pipeline.scene_point_tensors(
            bundle, args.bins, args.resample, args.points, args.seed, round_
        )
        pnsg.write_dump(
            out / f"{manifest.scene_id}_round{round_:02d}.pnsg", tensors, point_ids=ids
        )
    print(f"wrote {args.rounds} PNSG dump(s) and {view_csv.name} to {out}")
    return 0


def cmd_train(args) -> int:
    manifests = [pipeline.load_manifest(p) for p in args.manifests]
    labeled = [m for m in manifests if m.jod is not None]
    if not labeled:
        raise ValueError("no labeled manifests (every manifest lacks a jod value)")
    examples = pipeline.examples_from_manifests(
        labeled, args.bins, args.resample, args.points, args.seed, args.rounds
    )
    config = ModelConfig(
        bins=args.bins,
        resample=args.resample,
        ablate_pointwise=args.ablate_pointwise,
        seed=args.seed,
    )
    result = train(
        examples,
        config,
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        seed=args.seed,
    )
    save_model(args.out, result.model)
    if args.log is not None:
        with open(args.log, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for row in result.history:
                writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"])])
    status = "diverged; last finite checkpoint kept" if result.diverged else "done"
    print(f"trained {len(result.history)} epoch(s), best epoch {result.best_epoch}; "
          f"{status}; model at {args.out}")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    config = model.config
    rows = []
    for manifest_path in args.manifests:
        manifest = pipeline.load_manifest(manifest_path)
        examples = pipeline.examples_from_manifest(
            manifest, config.bins, config.resample, args.points, args.seed, args.rounds
        )
        scores = [model.predict(ex).value for ex in examples]
        rows.append((manifest.scene_id, manifest.method_id, float(np.mean(scores))))
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "method_id", "pred"])
        for scene_id, method_id, pred in rows:
            writer.writerow([scene_id, method_id, repr(pred)])
    print(f"wrote {len(rows)} prediction(s) to {args.out}")
    return 0


def _read_csv_column(path, column_aliases):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty CSV")
        column = next((c for c in column_aliases if c in reader.fieldnames), None)
        if column is None:
            raise ValueError(f"{path}: no column named one of {column_aliases}")
        out = {}
        for row in reader:
            key = (row["scene_id"], row["method_id"])
            out[key] = float(row[column])
    return out


def cmd_evaluate(args) -> int:
    preds = _read_csv_column(args.pred, ("pred",))
    truths = _read_csv_column(args.truth, ("truth", "jod"))
    missing = sorted(set(preds) - set(truths)) + sorted(set(truths) - set(preds))
    if missing:
        raise ValueError(f"unmatched join key (scene_id, method_id): {missing[0]}")
    keys = sorted(preds)
    report = metrics.evaluate(
        [preds[k] for k in keys], [truths[k] for k in keys]
    )
    if args.json is not None:
        Path(args.json).write_text(report.to_json() + "\n")
    print(report.to_table() if args.table else report.to_json())
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # single-line machine-parsable error contract
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
