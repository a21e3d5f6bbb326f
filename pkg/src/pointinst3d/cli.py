"""Operator CLI: gen / train / infer / eval / sweep-radius / grad-check / selfcheck.

Config precedence: built-in defaults < --config JSON file < explicit flags.
Every artifact-producing subcommand echoes its effective configuration as a
JSON sidecar for provenance; reruns with the same config and seed produce
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .backbone import ModelConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .clustering import ClusteringConfig, cluster_homogeneous, cluster_purity
from .metrics import evaluate_predictions, scored_from_predictions, truths_from_scene
from .pipeline import (
    load_predictions,
    run_inference,
    run_oracle_inference,
    save_predictions,
)
from .scenes import SceneConfig, generate_scene, load_scene, oracle_predictions, save_scene
from .backbone import semantic_labels
from .selfchecks import run_grad_checks, run_self_checks
from .train import TrainConfig, train, write_loss_curve

__all__ = ["main", "cli_dispatch"]

# Flag defaults; a config file and then explicit flags override these.
DEFAULTS = {
    "radius": 0.3,
    "grid": 14,
    "mask_dim": 16,
    "layers": 3,
    "nms_iou": 0.3,
    "min_cluster": 50,
    "seed": 0,
    "jobs": 1,
    "scenes": 8,
    "steps": 200,
    "warmup": 0,
    "lr": 1e-3,
    "batch": 1,
    "feat_dim": 32,
    "heads": 2,
    "tf_layers": 2,
    "token_cell": 0.5,
    "decoder_hidden": 0,
    "gw_channels": 0,
    "thing_classes": 4,
    "stuff_density": 40.0,
    "d_min": 1.0,
    "instances_min": 3,
    "instances_max": 6,
    "points_min": 120,
    "points_max": 240,
    "radii": "0.1,0.25,0.5,0.75,0.9",
    "offset_sigma": 0.0,
    "label_noise": 0.0,
    "condinst_seeds": 0,
}


def _add_common(parser: argparse.ArgumentParser, names: list[str]) -> None:
    spec = {
        "radius": (float, "clustering radius in meters"),
        "grid": (int, "cluster voxel grid size g"),
        "mask_dim": (int, "mask feature channels D'"),
        "layers": (int, "dynamic decoder layer count L"),
        "nms_iou": (float, "NMS IoU threshold"),
        "min_cluster": (int, "minimum cluster size kept at inference"),
        "seed": (int, "random seed"),
        "jobs": (int, "scene-level worker processes"),
        "scenes": (int, "number of scenes"),
        "steps": (int, "training steps"),
        "warmup": (int, "steps restricted to semantic+centroid losses"),
        "lr": (float, "Adam learning rate"),
        "batch": (int, "scenes per training step"),
        "feat_dim": (int, "backbone feature channels D"),
        "heads": (int, "attention heads"),
        "tf_layers": (int, "transformer layers in the bottleneck"),
        "token_cell": (float, "token pooling cell size, meters"),
        "decoder_hidden": (int, "decoder hidden width (0: mask_dim)"),
        "gw_channels": (int, "weight-generator conv channels (0: feat_dim)"),
        "thing_classes": (int, "number of instance categories"),
        "stuff_density": (float, "floor points per square meter"),
        "d_min": (float, "minimum same-class centroid separation"),
        "instances_min": (int, "min instances per scene"),
        "instances_max": (int, "max instances per scene"),
        "points_min": (int, "min points per instance"),
        "points_max": (int, "max points per instance"),
        "radii": (str, "comma-separated radii for the sweep"),
        "offset_sigma": (float, "oracle offset noise sigma"),
        "label_noise": (float, "oracle label corruption rate"),
        "condinst_seeds": (int, "point-seeded ablation: sample K filter seeds"),
    }
    parser.add_argument("--config", type=str, default=None, help="JSON config file")
    for name in names:
        typ, help_text = spec[name]
        parser.add_argument(f"--{name.replace('_', '-')}", type=typ, default=None, help=help_text)


def _effective(args: argparse.Namespace, names: list[str]) -> dict:
    cfg = {k: DEFAULTS[k] for k in names}
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        unknown = set(loaded) - set(names)
        if unknown:
            raise SystemExit(f"config file sets unknown keys: {sorted(unknown)}")
        cfg.update(loaded)
    for name in names:
        value = getattr(args, name)
        if value is not None:
            cfg[name] = value
    return cfg


def _model_config(cfg: dict, in_features: int, num_classes: int) -> ModelConfig:
    return ModelConfig(
        in_features=in_features,
        num_classes=num_classes,
        feat_dim=cfg["feat_dim"],
        mask_dim=cfg["mask_dim"],
        heads=cfg["heads"],
        transformer_layers=cfg["tf_layers"],
        token_cell=cfg["token_cell"],
        gw_channels=cfg["gw_channels"],
        decoder_layers=cfg["layers"],
        decoder_hidden=cfg["decoder_hidden"],
        grid_size=cfg["grid"],
    )


def _cluster_config(cfg: dict) -> ClusteringConfig:
    return ClusteringConfig(radius=cfg["radius"], stuff_labels=frozenset({0}),
                            min_report_size=cfg["min_cluster"])


def _scene_config(cfg: dict, seed: int) -> SceneConfig:
    return SceneConfig(
        num_instances=(cfg["instances_min"], cfg["instances_max"]),
        d_min=cfg["d_min"],
        stuff_density=cfg["stuff_density"],
        points_per_instance=(cfg["points_min"], cfg["points_max"]),
        num_thing_classes=cfg["thing_classes"],
        seed=seed,
    )


def _write_sidecar(path: Path, cfg: dict, command: str) -> None:
    payload = {"command": command, "config": cfg}
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _scene_paths(directory: str | Path) -> list[Path]:
    paths = sorted(Path(directory).glob("scene_*.bin"))
    if not paths:
        raise SystemExit(f"no scene_*.bin files under {directory}")
    return paths


def _gen_worker(args: tuple[str, dict, int]) -> str:
    out_path, cfg, seed = args
    scene = generate_scene(_scene_config(cfg, seed))
    save_scene(out_path, scene)
    return out_path


def _cmd_gen(args) -> int:
    names = ["scenes", "seed", "jobs", "d_min", "stuff_density", "thing_classes",
             "instances_min", "instances_max", "points_min", "points_max"]
    cfg = _effective(args, names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(str(out / f"scene_{i:04d}.bin"), cfg, cfg["seed"] + i) for i in range(cfg["scenes"])]
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            list(pool.map(_gen_worker, tasks))
    else:
        for task in tasks:
            _gen_worker(task)
    _write_sidecar(out / "config.json", cfg, "gen")
    print(f"wrote {cfg['scenes']} scenes to {out}")
    return 0


def _cmd_train(args) -> int:
    names = ["seed", "steps", "warmup", "lr", "batch", "radius", "min_cluster",
             "grid", "mask_dim", "layers", "feat_dim", "heads", "tf_layers",
             "token_cell", "decoder_hidden", "gw_channels"]
    cfg = _effective(args, names)
    scenes = [load_scene(p) for p in _scene_paths(args.scenes)]
    model_cfg = _model_config(cfg, scenes[0].feature_dim, scenes[0].num_classes)
    cluster_cfg = _cluster_config(cfg)
    train_cfg = TrainConfig(lr=cfg["lr"], steps=cfg["steps"], warmup_steps=cfg["warmup"],
                            seed=cfg["seed"], batch_scenes=cfg["batch"])
    params, curve = train(scenes, model_cfg, cluster_cfg, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.bin", params)
    write_loss_curve(out / "loss_curve.txt", curve)
    _write_sidecar(out / "config.json", cfg, "train")
    print(f"step 1 total {curve[0].total:.4f} -> step {len(curve)} total {curve[-1].total:.4f}")
    return 0


def _infer_worker(task: tuple[str, str, dict]) -> list:
    scene_path, checkpoint_path, cfg = task
    scene = load_scene(scene_path)
    cluster_cfg = _cluster_config(cfg)
    seeds = cfg["condinst_seeds"] or None
    if checkpoint_path:
        params = load_checkpoint(checkpoint_path, requires_grad=False)
        model_cfg = _model_config(cfg, scene.feature_dim, scene.num_classes)
        return run_inference(scene, params, model_cfg, cluster_cfg, nms_iou=cfg["nms_iou"],
                             seed_points=seeds, seed=cfg["seed"])
    return run_oracle_inference(scene, cluster_cfg, nms_iou=cfg["nms_iou"],
                                offset_sigma=cfg["offset_sigma"], label_noise=cfg["label_noise"],
                                noise_seed=cfg["seed"])


def _cmd_infer(args) -> int:
    names = ["radius", "min_cluster", "nms_iou", "grid", "mask_dim", "layers",
             "feat_dim", "heads", "tf_layers", "token_cell", "decoder_hidden",
             "gw_channels", "seed", "jobs", "offset_sigma", "label_noise", "condinst_seeds"]
    cfg = _effective(args, names)
    if bool(args.checkpoint) == bool(args.oracle):
        raise SystemExit("exactly one of --checkpoint or --oracle is required")
    paths = _scene_paths(args.scenes)
    tasks = [(str(p), args.checkpoint or "", cfg) for p in paths]
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            results = list(pool.map(_infer_worker, tasks))
    else:
        results = [_infer_worker(t) for t in tasks]
    per_scene = {i: preds for i, preds in enumerate(results)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_predictions(out, per_scene)
    _write_sidecar(out.with_suffix(out.suffix + ".meta.json"), cfg, "infer")
    total = sum(len(p) for p in results)
    print(f"wrote {total} predictions for {len(paths)} scenes to {out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _effective(args, ["seed"])
    paths = _scene_paths(args.scenes)
    scenes = [load_scene(p) for p in paths]
    per_scene_preds = load_predictions(args.preds)
    preds, gts, coords = [], [], {}
    for i, scene in enumerate(scenes):
        coords[i] = scene.coords
        gts.extend(truths_from_scene(i, scene))
        preds.extend(scored_from_predictions(i, per_scene_preds.get(i, [])))
    report = evaluate_predictions(preds, gts, coords)
    sys.stdout.write(report.to_table())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json())
        _write_sidecar(out.with_suffix(out.suffix + ".meta.json"), cfg, "eval")
    return 0


def _cmd_sweep_radius(args) -> int:
    names = ["radii", "min_cluster", "nms_iou", "seed", "offset_sigma", "label_noise",
             "grid", "mask_dim", "layers", "feat_dim", "heads", "tf_layers",
             "token_cell", "decoder_hidden", "gw_channels", "jobs"]
    cfg = _effective(args, names)
    paths = _scene_paths(args.scenes)
    scenes = [load_scene(p) for p in paths]
    radii = [float(r) for r in str(cfg["radii"]).split(",") if r]
    rows = []
    for radius in radii:
        run_cfg = dict(cfg)
        run_cfg["radius"] = radius
        preds, gts, coords = [], [], {}
        cluster_count = 0
        purity_sum = 0.0
        for i, scene in enumerate(scenes):
            result = _infer_worker((str(paths[i]), args.checkpoint or "", run_cfg))
            coords[i] = scene.coords
            gts.extend(truths_from_scene(i, scene))
            preds.extend(scored_from_predictions(i, result))
            if args.checkpoint:
                params = load_checkpoint(args.checkpoint, requires_grad=False)
                model_cfg = _model_config(run_cfg, scene.feature_dim, scene.num_classes)
                from .backbone import backbone_forward

                outputs = backbone_forward(scene, params, model_cfg)
                l_seg = semantic_labels(outputs.semantic_logits)
                offsets = outputs.offsets.values
            else:
                logits, offsets = oracle_predictions(scene, cfg["offset_sigma"], cfg["label_noise"],
                                                     seed=cfg["seed"])
                l_seg = semantic_labels(logits)
            clusters = cluster_homogeneous(scene.coords, offsets, l_seg, _cluster_config(run_cfg))
            cluster_count += len(clusters)
            purity_sum += cluster_purity(clusters, scene.gt_instance)
        report = evaluate_predictions(preds, gts, coords)
        rows.append((radius, report.map_value, report.ap50, cluster_count, purity_sum / len(scenes)))
    header = f"{'r':>6}  {'mAP':>8}  {'AP@50':>8}  {'clusters':>8}  {'purity':>8}"
    lines = [header] + [
        f"{r:>6.3f}  {m:>8.4f}  {a:>8.4f}  {c:>8d}  {p:>8.4f}" for r, m, a, c, p in rows
    ]
    table = "\n".join(lines) + "\n"
    sys.stdout.write(table)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table)
        _write_sidecar(out.with_suffix(out.suffix + ".meta.json"), cfg, "sweep-radius")
    return 0


def _cmd_grad_check(args) -> int:
    cfg = _effective(args, ["seed"])
    results = run_grad_checks(seed=cfg["seed"])
    worst = 0.0
    failed = []
    for res in results:
        print(f"{'PASS' if res.ok else 'FAIL'}  {res.name}: {res.detail}")
        err = float(res.detail.split()[-1])
        worst = max(worst, err)
        if not res.ok:
            failed.append(res.name)
    print(f"max relative error {worst:.3e}")
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _cmd_selfcheck(args) -> int:
    cfg = _effective(args, ["seed"])
    failed = []
    for res in run_self_checks(seed=cfg["seed"]):
        print(f"{'PASS' if res.ok else 'FAIL'}  {res.name}" + (f": {res.detail}" if res.detail else ""))
        if not res.ok:
            failed.append(res.name)
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointinst3d",
                                     description="Desk-scale dynamic-filter instance segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic scene files")
    p.add_argument("--out", required=True)
    _add_common(p, ["scenes", "seed", "jobs", "d_min", "stuff_density", "thing_classes",
                    "instances_min", "instances_max", "points_min", "points_max"])
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train on a scene directory")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    _add_common(p, ["seed", "steps", "warmup", "lr", "batch", "radius", "min_cluster",
                    "grid", "mask_dim", "layers", "feat_dim", "heads", "tf_layers",
                    "token_cell", "decoder_hidden", "gw_channels"])
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="write instance predictions for scenes")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--oracle", action="store_true", help="ground-truth heads + membership masks")
    _add_common(p, ["radius", "min_cluster", "nms_iou", "grid", "mask_dim", "layers",
                    "feat_dim", "heads", "tf_layers", "token_cell", "decoder_hidden",
                    "gw_channels", "seed", "jobs", "offset_sigma", "label_noise", "condinst_seeds"])
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="evaluate predictions against scene ground truth")
    p.add_argument("--scenes", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--out", default=None)
    _add_common(p, ["seed"])
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep-radius", help="metrics across a clustering-radius grid")
    p.add_argument("--scenes", required=True)
    p.add_argument("--checkpoint", default=None, help="omit to use oracle inputs")
    p.add_argument("--out", default=None)
    _add_common(p, ["radii", "min_cluster", "nms_iou", "seed", "offset_sigma", "label_noise",
                    "grid", "mask_dim", "layers", "feat_dim", "heads", "tf_layers",
                    "token_cell", "decoder_hidden", "gw_channels", "jobs"])
    p.set_defaults(func=_cmd_sweep_radius)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    _add_common(p, ["seed"])
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("selfcheck", help="oracle-equivalence suites")
    _add_common(p, ["seed"])
    p.set_defaults(func=_cmd_selfcheck)

    return parser


def cli_dispatch(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


def main() -> None:
    sys.exit(cli_dispatch())
