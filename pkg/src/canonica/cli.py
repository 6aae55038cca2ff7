"""``canonica`` command-line entry point.

Commands: synth | train | track | depth | eval.  Every option can also be set
in a key-value config file (``key = value`` per line, ``#`` comments) passed
with ``--config``; command-line flags override the file.  Each run writes the
fully resolved configuration as ``config.txt`` next to its outputs, and that
file can be fed back with ``--config`` to reproduce the run.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 non-finite loss.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .fields import ModelConfig, load_checkpoint
from .renderer import render_depth_map
from .scenedata import ClipError, SynthConfig, load_clip, save_clip, synth_generate
from .scenedata.formats import FormatError, write_depth, write_ppm
from .tracking import (
    aggregate_accuracy, evaluate_depth, run_ablation, track_from_mask, tracking_accuracy,
    worker_count, write_depth_csv, write_pivot_csv, write_tracking_csv,
)
from .training import NonFiniteLossError, TrainConfig, train, write_loss_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_NAME = "config.txt"
ARCH_KEYS = ("field_layers", "field_width", "field_bands", "coupling_layers", "coupling_width",
             "coupling_bands", "latent_dim", "latent_std", "fov_deg", "near", "far")
# options that are not part of a run's provenance
_NOT_ECHOED = {"config", "force", "command", "verbose", "func"}

log = logging.getLogger("canonica")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --- config files ------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; keys may use dashes or underscores."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_config(args: argparse.Namespace, directory: Path, notes=()) -> Path:
    path = directory / CONFIG_NAME
    lines = [f"# canonica {args.command}"] + [f"# {n}" for n in notes]
    for key in sorted(vars(args)):
        if key in _NOT_ECHOED or key == "out":
            continue  # the output path is left out so reruns elsewhere stay byte-identical
        lines.append(f"{key} = {_format_value(getattr(args, key))}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _optional_int(s):
    return None if s in (None, "", "none", "None") else int(s)


def _float_list(s):
    if isinstance(s, (list, tuple)):
        return [float(x) for x in s]
    return [float(x) for x in str(s).replace(" ", "").split(",") if x]


def _str_list(s):
    if isinstance(s, (list, tuple)):
        return list(s)
    return [x for x in str(s).replace(" ", "").split(",") if x]


# --- output directories ----------------------------------------------------

def prepare_output(path, force: bool) -> Path:
    """Create ``path`` as an empty directory, refusing to clobber without ``force``."""
    path = Path(path)
    if path.exists():
        if not force:
            raise UsageError(f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True)
    return path


def _load_clip(path, size=None):
    try:
        return load_clip(path, size=size)
    except (ClipError, FormatError, FileNotFoundError) as exc:
        raise DataError(str(exc)) from None


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _arch(args) -> dict:
    return {k: getattr(args, k) for k in ARCH_KEYS}


def _train_config(args) -> TrainConfig:
    kw = {f.name: getattr(args, f.name) for f in fields(TrainConfig) if hasattr(args, f.name)}
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# --- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        cfg = SynthConfig(height=args.height, width=args.width, n_frames=args.frames,
                          seed=args.seed, background_seed=args.seed, fps=args.fps,
                          background_depth=args.background_depth,
                          max_flow_gap=args.max_flow_gap, name=args.name)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = prepare_output(args.out, args.force)
    save_clip(synth_generate(cfg), out)
    write_config(args, out)
    log.info("wrote %d-frame %dx%d clip to %s", cfg.n_frames, cfg.height, cfg.width, out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    clip = _load_clip(args.clip, args.size)
    if not clip.has_flows:
        raise DataError(f"clip without flows in {args.clip}: run 'canonica synth' "
                        "or supply optical flow files under flows/")
    out = Path(args.out)
    ckpt = out / "model.ckpt"
    if args.resume:
        if not ckpt.exists():
            raise UsageError(f"--resume needs an existing checkpoint at {ckpt}")
    else:
        prepare_output(out, args.force)
    inst = ", ".join(clip.instrument_labels) or "none"
    write_config(args, out, [f"instrument labels ({inst}) weighted by w_class = {cfg.w_class!r}"])
    try:
        arch = _arch(args)
        ModelConfig(n_frames=clip.n_frames, height=clip.height, width=clip.width, **arch)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _, history = train(clip, cfg, arch=arch, checkpoint_path=ckpt, resume=args.resume)
    write_loss_csv(history, out / "loss.csv")
    log.info("checkpoint %s, %d logged iterations", ckpt, len(history))
    return EXIT_OK


TRACK_COLUMNS = ("track_id", "frame", "row", "col", "x", "y", "z", "in_bounds")
_SPLAT = np.array([1.0, 0.1, 0.1])


def overlay(frame: np.ndarray, positions: np.ndarray, in_bounds: np.ndarray) -> np.ndarray:
    """Copy of ``frame`` with each in-image track position painted red."""
    img = frame.copy()
    px = np.rint(positions[in_bounds]).astype(np.int64)
    img[px[:, 0], px[:, 1]] = _SPLAT
    return img


def cmd_track(args) -> int:
    model, _ = _load_model(args.checkpoint)
    clip = _load_clip(args.clip, args.size)
    if (model.n_frames, model.cfg.height, model.cfg.width) != (clip.n_frames, clip.height, clip.width):
        raise DataError("checkpoint and clip dimensions differ")
    if not 0 <= args.start_frame < clip.n_frames:
        raise UsageError(f"start frame {args.start_frame} outside 0..{clip.n_frames - 1}")
    try:
        tracks = track_from_mask(model, clip, args.label, args.start_frame, args.n_samples)
    except KeyError as exc:
        raise DataError(exc.args[0]) from None
    out = prepare_output(args.out, args.force)
    write_config(args, out)
    lines = [",".join(TRACK_COLUMNS)]
    for k in range(len(tracks)):
        for t in range(tracks.n_frames):
            r, c = (float(v) for v in tracks.positions[t, k])
            x, y, z = (float(v) for v in tracks.points[t, k])
            lines.append(f"{k},{t},{r!r},{c!r},{x!r},{y!r},{z!r},{int(tracks.in_bounds[t, k])}")
    (out / "tracks.csv").write_text("\n".join(lines) + "\n")
    (out / "overlay").mkdir()
    for t in range(tracks.n_frames):
        write_ppm(out / "overlay" / f"{t:04d}.ppm",
                  overlay(clip.frames[t], tracks.positions[t], tracks.in_bounds[t]))
    if clip.mask(args.label, args.start_frame) is not None:
        try:
            acc = tracking_accuracy(tracks, clip, args.label)
            log.info("tracking accuracy %.2f%%", 100 * acc.mean)
        except ValueError:
            pass
    return EXIT_OK


def cmd_depth(args) -> int:
    model, _ = _load_model(args.checkpoint)
    clip = _load_clip(args.clip, args.size)
    if (model.cfg.height, model.cfg.width) != (clip.height, clip.width):
        raise DataError("checkpoint and clip image sizes differ")
    out = prepare_output(args.out, args.force)
    write_config(args, out)
    maps = [render_depth_map(model, t, args.n_samples)[0] for t in range(model.n_frames)]
    for t, d in enumerate(maps):
        write_depth(out / f"{t:04d}.f32", d)
    if clip.gt_depth is not None:
        reports, _ = evaluate_depth(model, clip, args.n_samples)
        write_depth_csv(clip.name, reports, out / "metrics.csv")
        log.info("mean AbsRel %.2f%%", float(np.mean([r.absrel for r in reports])))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.ablate is None and not args.pair:
        raise UsageError("eval needs --pair CHECKPOINT CLIP (repeatable) or --ablate CLIP")
    out = prepare_output(args.out, args.force)
    write_config(args, out)
    if args.ablate is not None:
        clip = _load_clip(args.ablate, args.size)
        if not clip.has_flows:
            raise DataError(f"clip without flows in {args.ablate}")
        cfg = _train_config(args)
        labels = args.labels or None
        try:
            rows = run_ablation(clip, cfg, args.fractions, args.w_class_values, labels,
                                arch=_arch(args), n_samples=args.n_samples,
                                workers=worker_count())
        except ValueError as exc:
            raise DataError(str(exc)) from None
        write_tracking_csv(rows, out / "tracking.csv")
        write_pivot_csv(rows, out / "pivot.csv", fraction=args.fractions[0])
        return EXIT_OK
    rows, per_label = [], {}
    for ckpt, clip_dir in args.pair:
        model, extra = _load_model(ckpt)
        clip = _load_clip(clip_dir, args.size)
        w_class = float(extra.get("train_config", {}).get("w_class", 1.0))
        labels = args.labels or [l for l in clip.labels if clip.mask(l, 0) is not None]
        for label in labels:
            try:
                tracks = track_from_mask(model, clip, label, 0, args.n_samples)
                acc = tracking_accuracy(tracks, clip, label).mean
            except KeyError as exc:
                raise DataError(exc.args[0]) from None
            except ValueError as exc:
                raise DataError(f"{clip_dir}: {exc}") from None
            rows.append({"video": clip.name, "label": label, "w_class": w_class,
                         "fraction": 1.0, "mean_acc": 100.0 * acc, "std": 0.0})
            per_label.setdefault(label, []).append(100.0 * acc)
    if len(args.pair) > 1:
        for label, accs in per_label.items():
            mean, std = aggregate_accuracy(accs)
            rows.append({"video": "all", "label": label, "w_class": rows[0]["w_class"],
                         "fraction": 1.0, "mean_acc": mean, "std": std})
    write_tracking_csv(rows, out / "tracking.csv")
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def _add_common(p, output_help: str):
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--out", required=True, help=output_help)
    p.add_argument("--force", action="store_true", help="overwrite an existing output")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_clip_size(p):
    p.add_argument("--size", type=_optional_int, default=None,
                   help="center-crop and resize the clip to SIZE x SIZE on load")


def _add_train_options(p):
    d = TrainConfig()
    p.add_argument("--iterations", type=int, default=d.iterations)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--batch-correspondences", type=int, default=d.batch_correspondences)
    p.add_argument("--pairs-per-batch", type=int, default=d.pairs_per_batch)
    p.add_argument("--n-samples", type=int, default=d.n_samples, help="samples per ray")
    p.add_argument("--lr-color", type=float, default=d.lr_color)
    p.add_argument("--lr-flow", type=float, default=d.lr_flow)
    p.add_argument("--color-weight", type=float, default=d.color_weight)
    p.add_argument("--w-class", type=float, default=d.w_class,
                   help="loss multiplier for instrument pixels")
    p.add_argument("--smooth-weight", type=float, default=d.smooth_weight)
    p.add_argument("--entropy-weight", type=float, default=d.entropy_weight)
    p.add_argument("--smooth-rays", type=int, default=d.smooth_rays)
    p.add_argument("--log-every", type=int, default=d.log_every)
    p.add_argument("--checkpoint-every", type=int, default=d.checkpoint_every)
    m = {f.name: f.default for f in fields(ModelConfig)}
    for key in ARCH_KEYS:
        kind = type(m[key])
        p.add_argument("--" + key.replace("_", "-"), type=kind, default=m[key])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="canonica",
        description="Fit a canonical-volume scene model to a short clip and extract tracks and depth.",
        epilog="Environment: CANONICA_THREADS caps the number of worker processes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sprite clip with ground truth")
    _add_common(p, "clip directory to create")
    s = SynthConfig.__dataclass_fields__
    p.add_argument("--frames", type=int, default=s["n_frames"].default)
    p.add_argument("--height", type=int, default=s["height"].default)
    p.add_argument("--width", type=int, default=s["width"].default)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fps", type=float, default=s["fps"].default)
    p.add_argument("--background-depth", type=float, default=s["background_depth"].default)
    p.add_argument("--max-flow-gap", type=_optional_int, default=None,
                   help="only store flows between frames at most this far apart")
    p.add_argument("--name", default="synthetic")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="optimize a scene model on a clip")
    _add_common(p, "run directory (model.ckpt, loss.csv, config.txt)")
    p.add_argument("--clip", required=True, help="clip directory")
    _add_clip_size(p)
    _add_train_options(p)
    p.add_argument("--resume", type=_bool, nargs="?", const=True, default=False,
                   help="continue from the checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="propagate a start-frame mask through the clip")
    _add_common(p, "directory for tracks.csv and overlay/")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True)
    _add_clip_size(p)
    p.add_argument("--label", required=True, help="mask label to track")
    p.add_argument("--start-frame", type=int, default=0)
    p.add_argument("--n-samples", type=int, default=32)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("depth", help="export pseudo-depth rasters and metrics")
    _add_common(p, "directory for NNNN.f32 rasters and metrics.csv")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True)
    _add_clip_size(p)
    p.add_argument("--n-samples", type=int, default=32)
    p.set_defaults(func=cmd_depth)

    p = sub.add_parser("eval", help="tracking accuracy tables and ablation sweeps")
    _add_common(p, "directory for tracking.csv (and pivot.csv)")
    p.add_argument("--pair", nargs=2, action="append", metavar=("CHECKPOINT", "CLIP"),
                   default=[], help="evaluate a trained checkpoint on its clip")
    p.add_argument("--ablate", default=None, metavar="CLIP",
                   help="train and score one model per fraction and w_class value")
    p.add_argument("--fractions", type=_float_list, default=[1.0])
    p.add_argument("--w-class-values", type=_float_list, default=[1.0])
    p.add_argument("--labels", type=_str_list, default=[])
    _add_clip_size(p)
    _add_train_options(p)
    p.set_defaults(func=cmd_eval)
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _config_defaults(sub: argparse.ArgumentParser, path) -> dict:
    values = read_config(path)
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in known or key in _NOT_ECHOED:
            raise UsageError(f"{path}: unknown key {key!r}")
        action = known[key]
        if key == "pair":
            items = [x for x in raw.split(",") if x]
            if len(items) % 2:
                raise UsageError(f"{path}: pair needs CHECKPOINT,CLIP entries")
            defaults[key] = [items[n:n + 2] for n in range(0, len(items), 2)]
        elif raw == "":
            defaults[key] = None
        elif action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{path}: bad value for {key}: {exc}") from None
        else:
            defaults[key] = raw
    return defaults


def parse_args(argv=None) -> argparse.Namespace:
    """Parse flags, filling anything not given on the command line from ``--config``."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command in ("synth", "train", "track", "depth", "eval"):
        sub = _subparser(parser, known.command)
        defaults = _config_defaults(sub, known.config)
        sub.set_defaults(**defaults)
        for action in sub._actions:
            if action.dest in defaults and defaults[action.dest] is not None:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"canonica: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"canonica: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"canonica: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"canonica: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"canonica: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
