"""Command-line driver.

Subcommands: ``synth``, ``train``, ``register``, ``mosaic`` and ``eval``.
Every option may also come from a ``--config`` file of ``key=value`` lines
(keys are option names, with or without the leading dashes); options on the
command line win.

Exit status: 0 on success, 2 for usage, configuration or input-format
errors, 3 when a pipeline stage fails.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .core import GrayImage
from .datasynth import PATTERNS, SynthConfig, TrainSample, augment_variants, synth_sample
from .densenet import NetSpec, TrainingConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train
from .densenet.train import SCHEDULES
from .io import (
    FormatError,
    read_field,
    read_image,
    write_field,
    write_image,
    write_seam,
    seam_overlay,
)
from .mosaic import MosaicConfig, RegistrationFailed, SeamError, mosaic_multi, mosaic_pair
from .eval.metrics import mosaicking_error
from .pipeline import METHODS, register

log = logging.getLogger("ridgereg")

EXIT_OK, EXIT_USAGE, EXIT_PIPELINE = 0, 2, 3
MANIFEST = "manifest.txt"


class UsageError(Exception):
    """Bad arguments, configuration or input files (exit status 2)."""


class StageFailure(Exception):
    """A pipeline stage could not produce a result (exit status 3)."""


# -- helpers ---------------------------------------------------------------------

def parse_config(text: str) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def write_manifest(path: Path, command: str, params: dict, extra: Optional[dict] = None) -> None:
    lines = ["tool=ridgereg", f"version={__version__}", f"command={command}"]
    lines += [f"{k}={_fmt(v)}" for k, v in sorted(params.items())]
    if extra:
        lines += [f"{k}={_fmt(v)}" for k, v in extra.items()]
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> dict:
    try:
        return parse_config(path.read_text())
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


def _echo(args) -> dict:
    skip = {"func", "config", "verbose"}
    return {k: v for k, v in vars(args).items() if k not in skip and v is not None}


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {p}: {exc}") from None
    return p


def _synth_config(args) -> SynthConfig:
    return SynthConfig(
        count=args.count,
        crop=args.patch_size,
        margin=args.margin,
        seed=args.seed,
        period=args.period,
        pattern=args.pattern,
        singularities=args.singularities,
        phase_noise=args.phase_noise,
        intensity_noise=args.intensity_noise,
        texture=args.texture,
        texture_scale=args.texture_scale,
        spacing=args.spacing,
        max_perturbation=args.max_perturbation,
        augment=args.augment,
        exact_inverse=args.exact_inverse,
    )


def load_dataset(directory) -> list[TrainSample]:
    """Samples ``NNNN_i1.pgm`` / ``NNNN_i2.pgm`` / ``NNNN_d.dfld`` in index
    order, as listed by the directory manifest."""
    d = Path(directory)
    if not d.is_dir() or not (d / MANIFEST).is_file():
        raise UsageError(f"{d} is not a dataset directory (no {MANIFEST})")
    count = int(read_manifest(d / MANIFEST).get("samples", "0"))
    out = []
    for n in range(count):
        stem = d / f"{n:04d}"
        try:
            out.append(TrainSample(read_image(f"{stem}_i1.pgm"), read_image(f"{stem}_i2.pgm"), read_field(f"{stem}_d.dfld")))
        except OSError as exc:
            raise UsageError(f"dataset sample {n}: {exc}") from None
    return out


def _load_params(path):
    if path is None:
        return None
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from None


def _read(path) -> GrayImage:
    try:
        return read_image(path)
    except OSError as exc:
        raise UsageError(f"cannot read image {path}: {exc}") from None


# -- subcommands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _synth_config(args)
    out = _out_dir(args.out)
    indices = range(cfg.count)
    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(args.threads) as pool:
            base = list(pool.map(lambda i: synth_sample(cfg, i), indices))
    else:
        base = [synth_sample(cfg, i) for i in indices]
    samples = []
    for s in base:
        samples.extend(augment_variants(s, cfg.exact_inverse) if cfg.augment else [s])
    for n, s in enumerate(samples):
        stem = out / f"{n:04d}"
        write_image(f"{stem}_i1.pgm", s.i1)
        write_image(f"{stem}_i2.pgm", s.i2)
        write_field(f"{stem}_d.dfld", s.d)
    write_manifest(out / MANIFEST, "synth", _echo(args), {"samples": len(samples)})
    log.info("wrote %d samples to %s", len(samples), out)
    return EXIT_OK


def cmd_train(args) -> int:
    data = load_dataset(args.dataset)
    if not data:
        raise UsageError(f"dataset {args.dataset} is empty")
    if data[0].i1.shape != (args.patch_size, args.patch_size):
        raise UsageError(f"samples are {data[0].i1.shape[1]}x{data[0].i1.shape[0]}, expected patch size {args.patch_size}")
    spec = NetSpec.full() if args.net == "full" else NetSpec()
    cfg = TrainingConfig(
        lambda_smooth=args.lambda_smooth,
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        patch_size=args.patch_size,
        momentum=args.momentum,
        optimizer=args.optimizer,
        spec=spec,
        augment=args.augment,
        schedule=args.schedule,
    )
    params = _load_params(args.resume)
    try:
        result = train(data, cfg, params, steps=args.steps)
    except TrainingDiverged as exc:
        raise StageFailure(str(exc)) from None
    out = Path(args.out)
    _out_dir(out.parent if str(out.parent) else ".")
    save_checkpoint(out, result.params)
    lines = [f"initial {result.initial_loss!r}"] + [f"{k} {v!r}" for k, v in enumerate(result.history, start=1)]
    Path(f"{out}.loss.txt").write_text("\n".join(lines) + "\n")
    write_manifest(
        Path(f"{out}.manifest.txt"),
        "train",
        _echo(args),
        {"initial_l_est": result.initial_l_est, "final_l_est": result.final_l_est},
    )
    return EXIT_OK


def cmd_register(args) -> int:
    inp, ref = _read(args.input), _read(args.reference)
    if inp.shape != ref.shape:
        raise UsageError(f"image sizes differ: {inp.width}x{inp.height} vs {ref.width}x{ref.height}")
    params = _load_params(args.checkpoint)
    out = _out_dir(args.out)
    reg = register(inp, ref, params, args.method)
    extra = {"pre": reg.pre, "post": reg.post, "correspondences": len(reg.correspondences), "coarse_failed": int(reg.failed)}
    if reg.failed:
        # unaligned output, flagged
        aligned, fld = inp, type(reg.field).zeros(inp.width, inp.height)
        extra["post"] = reg.pre
    else:
        aligned, fld = reg.aligned, reg.field
    write_image(out / "aligned.pgm", aligned)
    write_field(out / "field.dfld", fld)
    write_manifest(out / MANIFEST, "register", _echo(args), extra)
    print(f"pre={_fmt(extra['pre'])} post={_fmt(extra['post'])}")
    if reg.failed:
        raise StageFailure("coarse registration failed; the unaligned input was written")
    return EXIT_OK


def cmd_mosaic(args) -> int:
    images = [_read(p) for p in args.images]
    if len({im.shape for im in images}) > 1:
        raise UsageError("all images must share one canvas size")
    params = _load_params(args.checkpoint)
    out = _out_dir(args.out)
    config = MosaicConfig(lambda1=args.lambda1, lambda2=args.lambda2)

    def reg(a, b):
        return register(a, b, params, args.method)

    report = []
    if len(images) == 1:
        write_image(out / "mosaic.pgm", images[0])
    elif len(images) == 2:
        try:
            res = mosaic_pair(images[0], images[1], reg, config)
        except (RegistrationFailed, SeamError) as exc:
            raise StageFailure(str(exc)) from None
        write_image(out / "mosaic.pgm", res.image)
        steps = [(0, res)]
        report = _merge_reports(steps, images[1], out)
    else:
        res = mosaic_multi(images, reg, config)
        if len(res.skipped) == len(images) - 1:
            raise StageFailure("registration failed for every pair")
        write_image(out / "mosaic.pgm", res.image)
        report = _merge_reports(res.steps, None, out)
    coverage = int(np.count_nonzero(_read(out / "mosaic.pgm").mask))
    (out / "report.txt").write_text("".join(report) + f"coverage={coverage}\n")
    write_manifest(out / MANIFEST, "mosaic", _echo(args))
    return EXIT_OK


def _merge_reports(steps, reference, out: Path) -> list:
    lines = []
    for k, (idx, res) in enumerate(steps):
        if res.partition is None:
            lines.append(f"merge.{k}.image={idx}\nmerge.{k}.seam=none\n")
            continue
        write_seam(out / f"seam_{k}.txt", res.partition.seam)
        write_image(out / f"seam_{k}.pgm", seam_overlay(res.image, res.partition.seam))
        ref = reference if reference is not None else res.image
        e = mosaicking_error(res.aligned, ref, res.image, res.partition)
        lines.append(
            f"merge.{k}.image={idx}\nmerge.{k}.n1={e.n1}\nmerge.{k}.n2={e.n2}\n"
            f"merge.{k}.n1_tilde={e.n1_tilde}\nmerge.{k}.n2_tilde={e.n2_tilde}\nmerge.{k}.e={e.e}\n"
        )
    return lines


def cmd_eval(args) -> int:
    from .eval.benchmark import from_samples, run_benchmark, synth_impressions, write_reports

    if args.dataset is not None:
        bset = from_samples(load_dataset(args.dataset))
    else:
        cfg = SynthConfig(crop=args.patch_size, seed=args.seed)
        bset = synth_impressions(args.fingers, args.impressions, cfg)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; expected some of {','.join(METHODS)}")
    checkpoints = args.checkpoint or []
    if "fine" in methods and not checkpoints:
        raise UsageError("the fine method needs at least one --checkpoint")
    out = _out_dir(args.out)
    runs = []
    for m in methods:
        if m == "fine":
            runs += [(f"fine{k}" if len(checkpoints) > 1 else "fine", m, _load_params(c)) for k, c in enumerate(checkpoints)]
        else:
            runs.append((m, m, None))
    for name, method, params in runs:
        report = run_benchmark(bset, method, params, threads=args.threads)
        write_reports(report, out / name)
    write_manifest(out / MANIFEST, "eval", _echo(args))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; command-line options override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker cap for independent items")
    p.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ridgereg", description="Dense ridge-image registration and mosaicking.")
    parser.add_argument("--version", action="version", version=f"ridgereg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic training set")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=SynthConfig.count)
    p.add_argument("--patch-size", type=int, default=SynthConfig.crop)
    p.add_argument("--margin", type=int, default=SynthConfig.margin)
    p.add_argument("--period", type=float, default=SynthConfig.period)
    p.add_argument("--pattern", choices=PATTERNS, default=SynthConfig.pattern)
    p.add_argument("--singularities", type=int, default=SynthConfig.singularities)
    p.add_argument("--phase-noise", type=float, default=SynthConfig.phase_noise)
    p.add_argument("--intensity-noise", type=float, default=SynthConfig.intensity_noise)
    p.add_argument("--texture", type=float, default=SynthConfig.texture, help="amplitude of smooth intensity texture")
    p.add_argument("--texture-scale", type=float, default=SynthConfig.texture_scale)
    p.add_argument("--spacing", type=float, default=SynthConfig.spacing)
    p.add_argument("--max-perturbation", type=float, default=SynthConfig.max_perturbation)
    p.add_argument("--augment", type=_bool, default=False, help="also write the 16 flip/rotate/swap variants")
    p.add_argument("--exact-inverse", type=_bool, default=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the displacement network")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="checkpoint to start from")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, default=TrainingConfig.batch_size)
    p.add_argument("--learning-rate", type=float, default=TrainingConfig.learning_rate)
    p.add_argument("--lambda-smooth", type=float, default=0.8)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default=TrainingConfig.optimizer)
    p.add_argument("--augment", type=_bool, default=TrainingConfig.augment)
    p.add_argument("--schedule", choices=SCHEDULES, default=TrainingConfig.schedule)
    p.add_argument("--net", choices=("desk", "full"), default="desk")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register an input image onto a reference")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("mosaic", help="register and seam-stitch images")
    _common(p)
    p.add_argument("images", nargs="+")
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--lambda1", type=float, default=20.0)
    p.add_argument("--lambda2", type=float, default=50.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mosaic)

    p = sub.add_parser("eval", help="benchmark registration methods")
    _common(p)
    p.add_argument("--dataset", help="dataset directory written by synth")
    p.add_argument("--fingers", type=int, default=20)
    p.add_argument("--impressions", type=int, default=4)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--methods", default="identity,coarse")
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    subs = parser._subparsers._group_actions[0].choices
    # a required option may come from the config file, so the first pass
    # only locates the subcommand and the file
    required = [a for sub in subs.values() for a in sub._actions if a.required]
    for a in required:
        a.required = False
    try:
        args = parser.parse_args(argv)
    finally:
        for a in required:
            a.required = True
    if not args.config:
        return parser.parse_args(argv)
    try:
        values = parse_config(Path(args.config).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    sub = subs[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        try:
            if action.nargs in ("+", "*") or isinstance(action, argparse._AppendAction):
                defaults[key] = [s.strip() for s in raw.split(",") if s.strip()]
            else:
                value = action.type(raw) if action.type else raw
                if action.choices is not None and value not in action.choices:
                    raise ValueError(f"expected one of {list(action.choices)}")
                defaults[key] = value
        except ValueError as exc:
            raise UsageError(f"config key {key}: {exc}") from None
        if action.required:
            action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be at least 1")
        return args.func(args)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except (UsageError, FormatError) as exc:
        print(f"ridgereg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"ridgereg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageFailure as exc:
        print(f"ridgereg: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
