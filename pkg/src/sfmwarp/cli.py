"""Command-line harness: ``sfmwarp {synth, optimize, eval, warp}``.

Settings are resolved in this order, later sources winning:

1. built-in defaults,
2. the YAML file given with ``--config``,
3. environment variables ``SFMWARP_<KEY>`` (``SFMWARP_VARIANT``, ``SFMWARP_SCALES``,
   ``SFMWARP_MOTION``, ``SFMWARP_ITERATIONS``, ``SFMWARP_SEED``, ``SFMWARP_OUT``,
   ``SFMWARP_THREADS``, ``SFMWARP_LR``),
4. command-line flags.

Exit codes: 0 success, 1 usage or invalid input, 2 numeric failure, 3 I/O failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import yaml
from filelock import FileLock, Timeout

from . import __version__
from .augment import AugmentConfig
from .errors import ContractError, EvaluationError, FormatError, NumericError, SceneSpecError
from .evaluation import aggregate_depth_prediction, compute_metrics, median_align, metrics_csv
from .geometry import CameraModel, PoseParams, pose_to_transform, project_grid
from .imagecore import as_grid, to_grid, to_tensor
from .imageio import read_image, write_image
from .objective import ObjectiveConfig, SceneParams, normalized_disps, snippet_aux
from .optimizer import NadamConfig
from .photometric import PhotometricConfig
from .regularizer import RegConfig
from .synthetic import export_bundle, load_spec, render_snippet, spec_to_dict
from .training import LOSS_CSV_SCHEMA, optimize, write_loss_csv
from .warp import forward_warp, inverse_warp

log = logging.getLogger("sfmwarp")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
ENV_PREFIX = "SFMWARP_"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    scene: str | None = None
    bundle: str | None = None
    camera: dict | None = None
    variant: str = "min"
    scales: int = 3
    motion: bool = True
    forward_terms: bool = True
    iterations: int = 2000
    optimizer: NadamConfig = field(default_factory=NadamConfig)
    reg: RegConfig = field(default_factory=RegConfig)
    photo: PhotometricConfig = field(default_factory=PhotometricConfig)
    augment: AugmentConfig | None = None
    output_dir: str = "out"
    seed: int = 0
    threads: int = 1
    checkpoint_every: int = 5100

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(variant=self.variant, scales=self.scales, motion=self.motion,
                               forward_terms=self.forward_terms, photo=self.photo, reg=self.reg)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.augment is not None:
            d["augment"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d["augment"].items()}
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTIONS = {"optimizer": NadamConfig, "reg": RegConfig, "photo": PhotometricConfig}


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "on", "yes"):
        return True
    if s in ("0", "false", "off", "no"):
        return False
    raise UsageError(f"expected on/off, got {v!r}")


def _merge(cfg: RunConfig, data: dict, source: str) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    updates = {}
    for key, val in data.items():
        if key not in known:
            raise UsageError(f"unknown setting {key!r} in {source}")
        if key in _SECTIONS:
            if not isinstance(val, dict):
                raise UsageError(f"{key!r} in {source} must be a mapping")
            try:
                updates[key] = replace(getattr(cfg, key), **val)
            except TypeError as exc:
                raise UsageError(f"bad {key!r} section in {source}: {exc}") from None
        elif key == "augment":
            if val in (None, False, "off"):
                updates[key] = None
            else:
                val = {} if val in (True, "on") else {k: tuple(v) if isinstance(v, list) else v for k, v in val.items()}
                updates[key] = AugmentConfig(**val)
        elif key in ("motion", "forward_terms"):
            updates[key] = _parse_bool(val)
        elif key in ("scales", "iterations", "seed", "threads", "checkpoint_every"):
            updates[key] = int(val)
        else:
            updates[key] = val
    return replace(cfg, **updates)


def _env_overrides() -> dict:
    out = {}
    for key in ("variant", "scales", "motion", "iterations", "seed", "threads"):
        v = os.environ.get(ENV_PREFIX + key.upper())
        if v is not None:
            out[key] = v
    if (v := os.environ.get(ENV_PREFIX + "OUT")) is not None:
        out["output_dir"] = v
    if (v := os.environ.get(ENV_PREFIX + "LR")) is not None:
        out["optimizer"] = {"lr": float(v)}
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            data = yaml.safe_load(Path(args.config).read_text()) or {}
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError(f"config {args.config} must be a mapping")
        cfg = _merge(cfg, data, args.config)
    cfg = _merge(cfg, _env_overrides(), "environment")
    flags = {}
    for key in ("variant", "scales", "motion", "iterations", "seed", "threads", "scene", "bundle"):
        v = getattr(args, key, None)
        if v is not None:
            flags[key] = v
    if getattr(args, "out", None) is not None:
        flags["output_dir"] = args.out
    if getattr(args, "lr", None) is not None:
        flags["optimizer"] = {"lr": args.lr}
    cfg = _merge(cfg, flags, "command line")
    if cfg.variant not in ("min", "avg"):
        raise UsageError(f"variant must be min or avg, got {cfg.variant!r}")
    return cfg


# ---------------------------------------------------------------- helpers

def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, config: dict, digest: str, outputs: list[Path], extra=None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "config_sha256": digest,
        "outputs": {p.name: _file_digest(p) for p in sorted(outputs)},
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


class _Locked:
    """Exclusive lock on an output directory for the duration of a command."""

    def __init__(self, out: Path):
        out.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(out / ".sfmwarp.lock"))

    def __enter__(self):
        try:
            self.lock.acquire(timeout=0)
        except Timeout:
            raise OSError(f"output directory is locked by another run: {self.lock.lock_file}") from None
        return self

    def __exit__(self, *exc):
        self.lock.release()


# a fixed 9-entry perceptual ramp (dark blue -> teal -> yellow); linearly interpolated
HEATMAP_TABLE = np.array([
    [0.267, 0.005, 0.329], [0.283, 0.141, 0.458], [0.254, 0.265, 0.530],
    [0.207, 0.372, 0.553], [0.164, 0.471, 0.558], [0.128, 0.567, 0.551],
    [0.135, 0.659, 0.518], [0.478, 0.821, 0.318], [0.993, 0.906, 0.144],
])


def heatmap(values: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Map a 2-D array onto the fixed colour table; returns ``(H, W, 3)`` in ``[0, 1]``."""
    v = np.nan_to_num(np.asarray(values, dtype=np.float64))
    top = float(vmax if vmax is not None else (v.max() if v.size and v.max() > 0 else 1.0))
    x = np.clip(v / top, 0.0, 1.0) * (len(HEATMAP_TABLE) - 1)
    lo = np.floor(x).astype(int)
    hi = np.minimum(lo + 1, len(HEATMAP_TABLE) - 1)
    f = (x - lo)[..., None]
    return HEATMAP_TABLE[lo] * (1 - f) + HEATMAP_TABLE[hi] * f


def _read_bundle(bundle: Path):
    meta_path = bundle / "truth.yaml"
    if not meta_path.exists():
        raise OSError(f"scene bundle not found: {meta_path} is missing")
    meta = yaml.safe_load(meta_path.read_text())
    frames = []
    for name in ("frame_prev", "frame_t", "frame_next"):
        pfm = bundle / f"{name}.pfm"
        frames.append(read_image(pfm if pfm.exists() else bundle / f"{name}.png"))
    return frames, CameraModel.from_dict(meta["camera"]), meta


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig) -> int:
    if not cfg.scene:
        raise UsageError("synth needs a scene spec (--scene or 'scene:' in the config)")
    spec = load_spec(cfg.scene)
    if cfg.seed:
        spec = replace(spec, seed=spec.seed + cfg.seed)
    cam = CameraModel.from_dict(cfg.camera) if cfg.camera else spec.camera
    if cam is None:
        raise UsageError("no camera: give 'camera:' in the run config or the scene spec")
    out = Path(cfg.output_dir)
    with _Locked(out):
        truth = render_snippet(spec, cam)
        written = export_bundle(truth, out, spec)
        _write_manifest(out, "synth", cfg.to_dict(), cfg.digest(), written)
    log.info("wrote scene bundle to %s", out)
    return EXIT_OK


def cmd_optimize(cfg: RunConfig, dump_warps: bool = False) -> int:
    if not cfg.bundle:
        raise UsageError("optimize needs a scene bundle (--bundle or 'bundle:' in the config)")
    frames, cam, meta = _read_bundle(Path(cfg.bundle))
    if cfg.camera:
        cam = CameraModel.from_dict(cfg.camera)
    ocfg = cfg.objective()
    H, W = cam.height, cam.width
    params = SceneParams.initial(H, W, cfg.scales, cfg.motion)
    out = Path(cfg.output_dir)
    with _Locked(out):
        ckpt = out / "checkpoint.bin"
        try:
            result = optimize(frames, cam, params, ocfg, cfg.optimizer, cfg.iterations, cfg.augment, cfg.seed,
                              checkpoint_path=ckpt, checkpoint_every=cfg.checkpoint_every)
        except NumericError as exc:
            log.error("numeric failure at iteration %s: %s", exc.iteration, exc)
            return EXIT_NUMERIC
        final = result.final_total
        write_loss_csv(result.rows, out / "loss.csv")
        written = [out / "loss.csv", ckpt]
        depth = aggregate_depth_prediction(normalized_disps(result.ema, ocfg), H, W)
        depth_raw = aggregate_depth_prediction(normalized_disps(result.params, ocfg), H, W)
        write_image(depth, out / "depth.pfm")
        write_image(depth_raw, out / "depth_raw.pfm")
        inv = 1.0 / depth
        write_image((inv - inv.min()) / max(inv.max() - inv.min(), 1e-12), out / "depth.png")
        written += [out / "depth.pfm", out / "depth_raw.pfm", out / "depth.png"]
        if dump_warps:
            aux = snippet_aux(frames, result.ema, cam, ocfg)
            for k, name in enumerate(("prev", "next")):
                synth = aux[0]["inverse"][k]
                write_image(to_grid(synth.image), out / f"warp_{name}.png")
                write_image(to_grid(synth.mask), out / f"warp_{name}_mask.pfm")
                written += [out / f"warp_{name}.png", out / f"warp_{name}_mask.pfm"]
        extra = {"loss_csv_schema": LOSS_CSV_SCHEMA, "final_total": final,
                 "pose_raw": result.params.pose_raw.tolist(), "ema_pose_raw": result.ema.pose_raw.tolist()}
        if cfg.augment is not None:
            extra["augment_records"] = result.augment_records
        _write_manifest(out, "optimize", cfg.to_dict(), cfg.digest(), written, extra)
    if not np.isfinite(final):
        return EXIT_NUMERIC
    log.info("final loss %.6g (initial %.6g)", final, result.initial_total)
    return EXIT_OK


def cmd_eval(pred_path, truth_path, cap: float, out_dir, mask_path=None) -> int:
    pred = read_image(pred_path)[..., 0]
    gt = read_image(truth_path)[..., 0]
    if pred.shape != gt.shape:
        raise EvaluationError(f"prediction {pred.shape} and truth {gt.shape} differ in shape")
    valid = gt > 0
    if mask_path is not None:
        valid &= read_image(mask_path)[..., 0] > 0.5
    aligned = median_align(pred, gt, valid)
    metrics = compute_metrics(aligned, gt, valid, cap=cap)
    out = Path(out_dir)
    with _Locked(out):
        (out / "metrics.csv").write_text(metrics_csv([metrics]))
        rel = np.where(valid, np.abs(aligned - gt) / np.where(valid, gt, 1.0), 0.0)
        write_image(heatmap(rel), out / "error_heatmap.png")
        config = {"pred": str(pred_path), "truth": str(truth_path), "cap": cap,
                  "mask": None if mask_path is None else str(mask_path)}
        digest = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()
        _write_manifest(out, "eval", config, digest, [out / "metrics.csv", out / "error_heatmap.png"])
    print(metrics_csv([metrics]), end="")
    return EXIT_OK


def _parse_pose(text: str) -> PoseParams:
    try:
        vals = [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"pose must be six numbers 'rx,ry,rz,tx,ty,tz', got {text!r}") from None
    if len(vals) != 6:
        raise UsageError(f"pose must have six entries, got {len(vals)}")
    return PoseParams.from_vector(vals)


def cmd_warp(image_path, depth_path, pose: PoseParams, direction: str, cam: CameraModel, out_dir) -> int:
    img = read_image(image_path)
    depth = read_image(depth_path)[..., 0]
    if img.shape[:2] != depth.shape or img.shape[:2] != (cam.height, cam.width):
        raise ContractError(f"image {img.shape[:2]}, depth {depth.shape} and camera "
                            f"{(cam.height, cam.width)} sizes disagree")
    src = to_tensor(img)
    flow = project_grid(cam, pose_to_transform(pose), to_tensor(1.0 / depth))
    if direction == "inverse":
        res = inverse_warp(src, flow)
    else:
        res = forward_warp(src, flow, cam.height, cam.width)
    out = Path(out_dir)
    with _Locked(out):
        write_image(to_grid(res.image), out / "warped.png")
        write_image(to_grid(res.mask), out / "mask.pfm")
        config = {"image": str(image_path), "depth": str(depth_path), "direction": direction,
                  "pose": list(pose.rotation) + list(pose.translation), "camera": cam.to_dict()}
        digest = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()
        _write_manifest(out, "warp", config, digest, [out / "warped.png", out / "mask.pfm"])
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=("min", "avg"))
    p.add_argument("--scales", type=int)
    p.add_argument("--motion", choices=("on", "off"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sfmwarp", description=__doc__.split("\n\n")[0])
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a ground-truth scene bundle")
    _run_flags(p)
    p.add_argument("--scene", help="scene spec YAML")

    p = sub.add_parser("optimize", help="optimize depth, poses and motion on a scene bundle")
    _run_flags(p)
    p.add_argument("--bundle", help="directory written by 'synth'")
    p.add_argument("--lr", type=float)
    p.add_argument("--dump-warps", action="store_true", help="also write the final inverse warps")

    p = sub.add_parser("eval", help="median-aligned depth metrics and an error heatmap")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--mask")
    p.add_argument("--cap", type=float, default=80.0)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("warp", help="warp one image by a depth map and pose")
    p.add_argument("--image", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--pose", default="0,0,0,0,0,0", help="rx,ry,rz,tx,ty,tz")
    p.add_argument("--direction", choices=("forward", "inverse"), default="inverse")
    p.add_argument("--camera", required=True, help="fx,fy,cx,cy")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int)
    return parser


def _dispatch(args) -> int:
    if args.command in ("synth", "optimize"):
        cfg = resolve_config(args)
        torch.set_num_threads(max(1, cfg.threads))
        if args.command == "synth":
            return cmd_synth(cfg)
        return cmd_optimize(cfg, dump_warps=args.dump_warps)
    threads = args.threads or int(os.environ.get(ENV_PREFIX + "THREADS", "1"))
    torch.set_num_threads(max(1, threads))
    if args.command == "eval":
        return cmd_eval(args.pred, args.truth, args.cap, args.out, args.mask)
    try:
        fx, fy, cx, cy = (float(v) for v in args.camera.split(","))
    except ValueError:
        raise UsageError(f"camera must be 'fx,fy,cx,cy', got {args.camera!r}") from None
    h, w = as_grid(read_image(args.image)).shape[:2]
    cam = CameraModel(fx, fy, cx, cy, h, w)
    return cmd_warp(args.image, args.depth, _parse_pose(args.pose), args.direction, cam, args.out)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "motion", None) is not None:
        args.motion = args.motion == "on"
    try:
        return _dispatch(args)
    except UsageError as exc:
        print(f"sfmwarp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"sfmwarp: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"sfmwarp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, EvaluationError, SceneSpecError) as exc:
        print(f"sfmwarp: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
