"""Command-line entry point: ``trajcast <command> [options]``.

Every command reads an optional TOML config (``--config``), applies flag
overrides on top, writes its outputs into ``--out`` and echoes the effective
configuration into what it writes.  Exit codes: 0 success, 1 data or training
error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import params as params_io
from .config import RunConfig, load_config
from .errors import ConfigError, ContractError, DataError, ParseError, TrainingError
from .scene import (
    LikelihoodMap,
    Scene,
    build_ground_truth_map,
    load_scene,
    parse_annotations,
    read_png,
    save_scene,
    subsample,
)
from .seq2seq import GaussianParams, ModelConfig, Prediction, init_params
from .synth import Rect, generate_synth, obstacle_rects

log = logging.getLogger("trajcast")

SSCN_KIND = "sscn"
MODEL_KIND = "seq2seq"


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _threads() -> int:
    raw = os.environ.get("TRAJCAST_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"TRAJCAST_THREADS must be an integer, got {raw!r}", "TRAJCAST_THREADS") from exc
    return max(1, n)


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _parse_value(text: str):
    """Interpret a ``--set`` value as a TOML literal, falling back to a bare string."""
    from .config import tomllib

    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}", item)
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v.strip())
    flag_keys = {
        "seed": "seed",
        "lr": "optim.lr",
        "epochs": "optim.epochs",
        "optimizer": "optim.optimizer",
        "mode": "model.mode",
        "point": "point",
        "spec": "synth.kind",
        "sscn_lr": "sscn_train.lr",
        "sscn_epochs": "sscn_train.epochs",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    if getattr(args, "scenes", None):
        out["paths.scenes"] = list(args.scenes)
    for attr in ("maps", "checkpoint", "sscn_checkpoint"):
        value = getattr(args, attr, None)
        if value:
            out[f"paths.{attr}"] = value
    if getattr(args, "out", None):
        out["paths.out"] = args.out
    return out


def _config(args, need_seed: bool = False) -> RunConfig:
    cfg = load_config(args.config, _overrides(args))
    if need_seed and cfg.seed is None:
        raise ConfigError("--seed is required for this command", "seed")
    return cfg


def _seed(cfg: RunConfig) -> int:
    return 0 if cfg.seed is None else cfg.seed


def _scenes(cfg: RunConfig) -> list[tuple[str, Scene]]:
    if not cfg.paths.scenes:
        raise ConfigError("no input scenes given", "paths.scenes")
    out = []
    for p in cfg.paths.scenes:
        d = Path(p)
        if not d.is_dir():
            raise ConfigError(f"scene directory not found: {d}", "paths.scenes")
        scene = load_scene(d)
        meta = d / "synth.json"
        if meta.exists():
            rects = json.loads(meta.read_text(encoding="utf-8")).get("obstacles", [])
            scene.extras["obstacles"] = [Rect(*r) for r in rects]
        out.append((d.name, scene))
    return out


def _map_path(root: Path, name: str, cls: int) -> Path:
    return root / name / f"class{cls}.map"


def _load_maps(cfg: RunConfig, scenes, required: bool) -> list[dict[int, LikelihoodMap]] | None:
    if not cfg.paths.maps:
        if required:
            raise ConfigError("sd-att needs likelihood maps", "paths.maps")
        return None
    root = Path(cfg.paths.maps)
    out = []
    for name, scene in scenes:
        maps = {}
        for k in range(cfg.model.num_classes):
            p = _map_path(root, name, k)
            if p.exists():
                maps[k] = LikelihoodMap.load(p, cell_size=cfg.grid.cell_size)
            elif required:
                raise ConfigError(f"missing likelihood map {p}", "paths.maps")
        out.append(maps)
    return out


def _model_scenes(cfg: RunConfig, scenes):
    return [subsample(s, cfg.subsample) for _, s in scenes]


def _load_model(cfg: RunConfig):
    if not cfg.paths.checkpoint:
        raise ConfigError("no model checkpoint given", "paths.checkpoint")
    path = Path(cfg.paths.checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}", "paths.checkpoint")
    params, manifest = params_io.load(path, MODEL_KIND)
    model_cfg = ModelConfig.from_dict(manifest["config"]["model"])
    params_io.check_shapes(params, init_params(model_cfg, 0))
    return params, model_cfg


def _prediction_json(p: Prediction) -> dict:
    g = p.gaussians
    return {
        "scene": int(p.scene_index),
        "start": int(p.start),
        "subjects": [int(s) for s in p.subject_ids],
        "observed": p.observed.tolist(),
        "truth": p.truth.tolist(),
        "points": p.points.tolist(),
        "mu": g.mu.tolist(),
        "sigma": g.sigma.tolist(),
        "rho": g.rho.tolist(),
    }


def _prediction_from_json(d: dict) -> Prediction:
    try:
        points = np.asarray(d["points"], dtype=float)
        truth = np.asarray(d["truth"], dtype=float)
        observed = np.asarray(d.get("observed", np.zeros((len(points), 0, 2))), dtype=float)
        gauss = GaussianParams(
            np.asarray(d.get("mu", points), dtype=float),
            np.asarray(d.get("sigma", np.zeros_like(points)), dtype=float),
            np.asarray(d.get("rho", np.zeros(points.shape[:-1])), dtype=float),
        )
        return Prediction(int(d.get("scene", 0)), int(d.get("start", 0)),
                          np.asarray(d["subjects"]), observed, truth, points, gauss)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed prediction record: {exc}") from exc


def trajectory_svg(preds, width: int, height: int, rects=(), size: int = 480) -> str:
    """Overlay of observed (grey), true (green) and predicted (red) paths."""
    sx, sy = size / 1.0, size * height / width

    def poly(pts, colour, dash=""):
        if len(pts) == 0:
            return ""
        coords = " ".join(f"{x * sx:.2f},{y * sy:.2f}" for x, y in pts)
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        return f'<polyline points="{coords}" fill="none" stroke="{colour}" stroke-width="1.2"{extra}/>'

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{sx:.0f}" height="{sy:.0f}" '
        f'viewBox="0 0 {sx:.0f} {sy:.0f}">',
        f'<rect x="0" y="0" width="{sx:.0f}" height="{sy:.0f}" fill="#f4f2ec"/>',
    ]
    for r in rects:
        parts.append(
            f'<rect x="{r.x0 / width * sx:.2f}" y="{r.y0 / height * sy:.2f}" '
            f'width="{(r.x1 - r.x0) / width * sx:.2f}" height="{(r.y1 - r.y0) / height * sy:.2f}" fill="#5a6e4f"/>'
        )
    for p in preds:
        for i in range(len(p.subject_ids)):
            obs = p.observed[i]
            last = obs[-1:] if len(obs) else np.zeros((0, 2))
            parts.append(poly(obs, "#888888"))
            parts.append(poly(np.concatenate([last, p.truth[i]]), "#2a8a3a"))
            parts.append(poly(np.concatenate([last, p.points[i]]), "#c8372d", "3,2"))
    parts.append("</svg>")
    return "\n".join(x for x in parts if x) + "\n"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config(args, need_seed=True)
    spec = dataclasses.replace(cfg.synth, seed=cfg.seed)
    scene = generate_synth(spec)
    out = Path(cfg.paths.out)
    save_scene(scene, out)
    meta = {"config": cfg.to_dict(), "synth": spec.to_dict()}
    rects = obstacle_rects(scene)
    if rects:
        meta["obstacles"] = [[r.x0, r.y0, r.x1, r.y1] for r in rects]
    _write_json(out / "synth.json", meta)
    print(f"wrote {len(scene.tracks)} trajectories to {out}")
    return 0


def cmd_ingest(args) -> int:
    cfg = _config(args)
    ann = Path(args.annotations)
    if not ann.is_file():
        raise ConfigError(f"annotation file not found: {ann}", "annotations")
    if args.image:
        image = read_png(args.image)
        height, width = image.shape[:2]
    elif args.width and args.height:
        image, width, height = None, args.width, args.height
    else:
        raise ConfigError("ingest needs --image or both --width and --height", "image")
    scene = parse_annotations(ann, width, height, image, args.num_classes)
    scene.frame_stride = args.frame_stride
    out = Path(cfg.paths.out)
    save_scene(scene, out)
    print(f"ingested {len(scene.tracks)} trajectories into {out}")
    return 0


def cmd_train_sscn(args) -> int:
    from .sscn import build_dataset, train_sscn

    cfg = _config(args, need_seed=True)
    scenes = _scenes(cfg)
    data = build_dataset(_model_scenes(cfg, scenes), cfg.grid, cfg.sscn)
    t = cfg.sscn_train
    weights, hist = train_sscn(data, cfg.sscn, lr=t.lr, batch_size=t.batch_size, epochs=t.epochs,
                               seed=cfg.seed, optimizer=t.optimizer)
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    params_io.save(out / "sscn.ckpt", weights, SSCN_KIND, {"sscn": cfg.sscn.to_dict(), "grid": cfg.grid.cell_size})
    _write_json(out / "sscn_report.json", {"config": cfg.to_dict(), "epoch_loss": hist.epoch_loss})
    print(f"final SSCN loss {hist.epoch_loss[-1]:.5f}")
    return 0


def cmd_build_maps(args) -> int:
    from .sscn import SSCNConfig, build_map

    cfg = _config(args)
    scenes = _scenes(cfg)
    out = Path(cfg.paths.out)
    if args.ground_truth:
        for (name, _), scene in zip(scenes, _model_scenes(cfg, scenes)):
            for k in sorted({t.cls for t in scene.tracks.values()}):
                m = build_ground_truth_map(scene, k, cfg.grid)
                _map_path(out, name, k).parent.mkdir(parents=True, exist_ok=True)
                m.save(_map_path(out, name, k))
    else:
        if not cfg.paths.sscn_checkpoint:
            raise ConfigError("no SSCN checkpoint given", "paths.sscn_checkpoint")
        path = Path(cfg.paths.sscn_checkpoint)
        if not path.is_file():
            raise ConfigError(f"SSCN checkpoint not found: {path}", "paths.sscn_checkpoint")
        weights, manifest = params_io.load(path, SSCN_KIND)
        scfg = SSCNConfig.from_dict(manifest["config"]["sscn"])
        threads = _threads()
        for name, scene in scenes:
            for k in range(scfg.num_classes):
                m = build_map(scene, k, weights, cfg.grid, scfg, threads=threads)
                _map_path(out, name, k).parent.mkdir(parents=True, exist_ok=True)
                m.save(_map_path(out, name, k))
    _write_json(out / "maps.json", {"config": cfg.to_dict(), "ground_truth": bool(args.ground_truth)})
    print(f"wrote maps for {len(scenes)} scene(s) to {out}")
    return 0


def cmd_train(args) -> int:
    from .params import from_arrays
    from .training import TrainingAborted, train_model

    cfg = _config(args, need_seed=True)
    scenes = _scenes(cfg)
    maps = _load_maps(cfg, scenes, required=cfg.model.mode == "sd-att")
    o = cfg.optim
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        params, hist = train_model(
            _model_scenes(cfg, scenes), cfg.model, maps, lr=o.lr, optimizer=o.optimizer, epochs=o.epochs,
            seed=cfg.seed, windows_per_batch=o.windows_per_batch, window_stride=o.window_stride,
        )
    except TrainingAborted as exc:
        params_io.save(out / "last_good.ckpt", from_arrays(exc.last_good), MODEL_KIND,
                       {"model": cfg.model.to_dict(), "run": cfg.to_dict()})
        _write_json(out / "train_report.json",
                    {"config": cfg.to_dict(), "epoch_nll": exc.history.epoch_nll, "aborted": str(exc)})
        raise
    params_io.save(out / "model.ckpt", params, MODEL_KIND, {"model": cfg.model.to_dict(), "run": cfg.to_dict()})
    _write_json(out / "train_report.json", {"config": cfg.to_dict(), "epoch_nll": hist.epoch_nll})
    print(f"final mean NLL {hist.epoch_nll[-1]:.5f}")
    return 0


def _rollout(cfg: RunConfig, scenes):
    from .training import evaluate

    params, model_cfg = _load_model(cfg)
    maps = _load_maps(cfg, scenes, required=model_cfg.mode == "sd-att")
    return evaluate(params, _model_scenes(cfg, scenes), model_cfg, maps, seed=_seed(cfg), point=cfg.point,
                    window_stride=cfg.optim.window_stride, config={"run": cfg.to_dict()})


def cmd_predict(args) -> int:
    cfg = _config(args)
    scenes = _scenes(cfg)
    report, preds = _rollout(cfg, scenes)
    out = Path(cfg.paths.out)
    _write_json(out / "predictions.json",
                {"config": report.config, "predictions": [_prediction_json(p) for p in preds]})
    name, first = scenes[0]
    shown = [p for p in preds if p.scene_index == 0]
    (out / "predictions.svg").write_text(
        trajectory_svg(shown, first.width, first.height, obstacle_rects(first)), encoding="utf-8"
    )
    print(f"predicted {sum(len(p.subject_ids) for p in preds)} trajectories")
    return 0


def cmd_eval(args) -> int:
    from .training import report_from_predictions

    cfg = _config(args)
    if args.predictions:
        path = Path(args.predictions)
        if not path.is_file():
            raise ConfigError(f"predictions file not found: {path}", "predictions")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: {exc}") from exc
        preds = [_prediction_from_json(d) for d in payload.get("predictions", [])]
        report = report_from_predictions(preds, {"run": cfg.to_dict(), "predictions": str(path)})
    else:
        report, preds = _rollout(cfg, _scenes(cfg))
    _write_json(Path(cfg.paths.out) / "report.json", report.to_dict())
    print(f"ADE {report.ade:.5f}  FDE {report.fde:.5f}")
    return 0


def cmd_loo(args) -> int:
    from .training import leave_one_out

    cfg = _config(args, need_seed=True)
    scenes = _scenes(cfg)
    if len(scenes) < 2:
        raise ConfigError("loo needs at least two scenes", "paths.scenes")
    maps = _load_maps(cfg, scenes, required=cfg.model.mode == "sd-att")
    o = cfg.optim
    reports = leave_one_out(
        _model_scenes(cfg, scenes), cfg.model, maps, seed=cfg.seed, point=cfg.point,
        lr=o.lr, optimizer=o.optimizer, epochs=o.epochs, windows_per_batch=o.windows_per_batch,
        window_stride=o.window_stride,
    )
    rows = []
    for (name, _), r in zip(scenes, reports):
        d = r.to_dict()
        d["scene"] = name
        rows.append(d)
    _write_json(Path(cfg.paths.out) / "loo.json", {"config": cfg.to_dict(), "folds": rows})
    for row in rows:
        print(f"{row['scene']}: ADE {row['ade']:.5f}  FDE {row['fde']:.5f}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train-sscn": cmd_train_sscn,
    "build-maps": cmd_build_maps,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "loo": cmd_loo,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajcast", description="Trajectory forecasting with scene context.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenes=True):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. optim.lr=0.01")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        if scenes:
            p.add_argument("--scenes", nargs="+", metavar="DIR", help="scene directories")

    p = sub.add_parser("synth", help="generate a synthetic scene")
    common(p, scenes=False)
    p.add_argument("--spec", choices=["constant-velocity", "crossing-groups", "obstacle-field"])

    p = sub.add_parser("ingest", help="convert an annotation file into a scene directory")
    common(p, scenes=False)
    p.add_argument("--annotations", required=True, help="frame/subject/class/x/y file in pixels")
    p.add_argument("--image", help="scene image (PNG)")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--frame-stride", type=int, default=1)

    p = sub.add_parser("train-sscn", help="train the static scene network")
    common(p)
    p.add_argument("--lr", dest="sscn_lr", type=float)
    p.add_argument("--epochs", dest="sscn_epochs", type=int)

    p = sub.add_parser("build-maps", help="write per-class likelihood maps")
    common(p)
    p.add_argument("--sscn-checkpoint")
    p.add_argument("--ground-truth", action="store_true", help="count trajectories instead of running the network")

    p = sub.add_parser("train", help="train the trajectory model")
    common(p)
    p.add_argument("--maps", help="directory written by build-maps")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--optimizer", choices=["rmsprop", "sgd"])
    p.add_argument("--mode", choices=["d-att", "sd-att"])

    for name, text in (("predict", "predict trajectories"), ("eval", "compute ADE/FDE")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--maps")
        p.add_argument("--checkpoint")
        p.add_argument("--point", choices=["sample", "mean"])
        if name == "eval":
            p.add_argument("--predictions", help="score an existing predictions.json instead")

    p = sub.add_parser("loo", help="leave-one-out evaluation")
    common(p)
    p.add_argument("--maps")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--optimizer", choices=["rmsprop", "sgd"])
    p.add_argument("--mode", choices=["d-att", "sd-att"])
    p.add_argument("--point", choices=["sample", "mean"])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ParseError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
