"""Command-line entry point: ``mrsynth <command> [options]``.

Every command first writes a ``key=value`` echo of its fully resolved
configuration (including an explicit ``argv`` line) and can be replayed with
``mrsynth rerun <echo-file>``.  Failures print a single ``error: <Type>: msg``
line to stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import shlex
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .checkpoint import load_checkpoint, save_checkpoint
from .dataio import PhantomSpec, Volume, make_phantom_pair, mvol_read, mvol_write, subject_files, write_subject
from .kspace import UndersampleSpec, undersample_volume
from .model import NetworkConfig
from .train import (
    OptimizerConfig,
    concat_slices,
    model_from_checkpoint,
    reconstruct_volume,
    slices_from_volumes,
    stage_spec,
    train_stage,
)

NETWORK_FLAGS = ("base_channels", "encoder_blocks", "sbm_depth", "rm_layers", "rm_channels")


class UsageError(ValueError):
    pass


# ------------------------------------------------------------------ helpers


def _ints(text: str, n: int | None = None) -> tuple[int, ...]:
    try:
        out = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if n is not None and len(out) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers, got {text!r}")
    return out


def _pixel(text: str) -> tuple[int, int]:
    return _ints(text, 2)


def _dims(text: str) -> tuple[int, int, int]:
    return _ints(text, 3)


def _radii(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected min,max radii, got {text!r}") from None
    return lo, hi


def _fraction(text: str) -> UndersampleSpec:
    try:
        return UndersampleSpec(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _fmt(value) -> str:
    if isinstance(value, UndersampleSpec):
        return value.label()
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, Path):
        return str(value)
    return str(value)


def explicit_argv(parser: argparse.ArgumentParser, ns: argparse.Namespace) -> list[str]:
    """Rebuild an argv with every option spelled out, so defaults are frozen in the echo."""
    argv = [ns.command]
    sub = parser._subcommands[ns.command]  # noqa: SLF001
    for action in sub._actions:  # noqa: SLF001
        if not action.option_strings or action.dest in ("help",):
            continue
        value = getattr(ns, action.dest, None)
        flag = action.option_strings[-1]
        if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
            if value:
                argv.append(flag)
        elif value is None:
            continue
        elif action.nargs in ("+", "*"):
            argv += [flag] + [_fmt(v) for v in value]
        else:
            argv += [flag, _fmt(value)]
    return argv


def write_echo(path: Path, argv: list[str], resolved: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"argv={shlex.join(argv)}"]
    lines += [f"{k}={_fmt(v)}" for k, v in sorted(resolved.items())]
    path.write_text("\n".join(lines) + "\n")


def read_echo(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _write_csv(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _read_losses(path: Path) -> list[float]:
    with open(path) as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


def _load_subjects(dirs, spec: UndersampleSpec | None):
    parts = []
    for d in dirs:
        files = subject_files(d)
        t1, t2 = mvol_read(files["t1"], "T1W"), mvol_read(files["t2"], "T2W")
        us = None if spec is None else Volume(undersample_volume(t2.voxels, spec))
        parts.append(slices_from_volumes(t1, t2, us))
    return concat_slices(parts)


def _table(rows) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows)


# ----------------------------------------------------------------- commands


def cmd_phantom(args, echo):
    spec = PhantomSpec(seed=args.seed, dims=args.dims, lesion_count=args.lesions, lesion_radius=args.lesion_radius)
    out = Path(args.out)
    echo(out / "phantom.config", {"phantom." + f.name: getattr(spec, f.name) for f in fields(spec) if f.name != "tissues"})
    pair = make_phantom_pair(spec)
    write_subject(pair, out)
    print(f"wrote {out} dims={_fmt(pair.t1.dims)} lesions={len(pair.lesions)}")


def cmd_undersample(args, echo):
    out = Path(args.out)
    echo(out.with_name(out.name + ".config"), {"fraction": args.fraction, "rows_scheme": args.fraction.scheme})
    vol = mvol_read(args.input)
    mvol_write(Volume(undersample_volume(vol.voxels, args.fraction)), out)
    print(f"wrote {out} fraction={args.fraction.label()} rows={args.fraction.retained_rows(vol.dims[1])}/{vol.dims[1]}")


def _network(args, run: Path) -> NetworkConfig:
    overrides = {k: getattr(args, k) for k in NETWORK_FLAGS if getattr(args, k) is not None}
    rm = args.fraction is not None
    if args.stage == 1:
        return NetworkConfig(rm_enabled=rm, **overrides)
    first = run / "stage1.ckpt"
    if not first.exists():
        return NetworkConfig(rm_enabled=rm, **overrides)  # stage_spec reports the missing prerequisite
    base = load_checkpoint(first).config
    for k, v in overrides.items():
        if getattr(base, k) != v:
            raise UsageError(f"--{k.replace('_', '-')} {v} conflicts with stage-1 checkpoint value {getattr(base, k)}")
    if base.rm_enabled != rm:
        raise UsageError("--fraction must be given exactly when the stage-1 model has a reconstruction module")
    return base


def cmd_train(args, echo):
    run = Path(args.run_dir)
    target = run / f"stage{args.stage}.ckpt"
    if target.exists() and not args.force:
        raise FileExistsError(f"{target} exists; pass --force to overwrite")
    network = _network(args, run)
    opt = OptimizerConfig(
        learning_rate=args.lr, batch_size=args.batch_size, steps_per_stage=args.steps, seed=args.seed
    )
    resolved = {"network." + k: v for k, v in asdict(network.replace(sbm_count=args.stage - 1)).items()}
    resolved.update({"optimizer." + k: v for k, v in asdict(opt).items()})
    resolved["stage"] = args.stage
    echo(run / f"stage{args.stage}.config", resolved)

    prior = {k: load_checkpoint(run / f"stage{k}.ckpt") for k in (1, 2) if k < args.stage and (run / f"stage{k}.ckpt").exists()}
    spec = stage_spec(args.stage, network.rm_enabled, prior.get(1), prior.get(2))
    data = _load_subjects(args.subjects, args.fraction)
    ckpt, history = train_stage(spec, opt, data, network)
    ckpt.meta["fraction"] = args.fraction.label() if args.fraction else "none"
    save_checkpoint(ckpt, target)
    _write_csv(run / f"stage{args.stage}_loss.csv", [["step", "loss"]] + [[i, f"{v:.8g}"] for i, v in enumerate(history)])
    if args.plot:
        from .plotting import plot_loss_history

        hist = {k: _read_losses(run / f"stage{k}_loss.csv") for k in (1, 2, 3) if (run / f"stage{k}_loss.csv").exists()}
        plot_loss_history(hist, run / "loss.png")
    print(f"stage {args.stage}: {len(history)} steps, loss {history[0]:.5f} -> {history[-1]:.5f}; wrote {target}")


def cmd_reconstruct(args, echo):
    out = Path(args.out)
    ckpt = load_checkpoint(args.checkpoint)
    echo(out.with_name(out.name + ".config"), {"network." + k: v for k, v in asdict(ckpt.config).items()})
    t1 = mvol_read(args.t1, "T1W")
    us = None if args.undersampled is None else mvol_read(args.undersampled, "T2W")
    if ckpt.config.rm_enabled != (us is not None):
        raise UsageError("--undersampled is required exactly when the checkpoint has a reconstruction module")
    pred = reconstruct_volume(model_from_checkpoint(ckpt), t1, us, mask_background=not args.keep_background)
    mvol_write(pred, out)
    if args.plot:
        from .plotting import plot_comparison

        mid = t1.dims[0] // 2
        panels = {"T1": t1.voxels[mid] / max(float(t1.voxels.max()), 1e-12)}
        if us is not None:
            panels["zero-filled T2"] = us.voxels[mid]
        panels["synthesized T2"] = pred.voxels[mid]
        plot_comparison(panels, out.with_suffix(".png"))
    print(f"wrote {out}")


def cmd_evaluate(args, echo):
    out = Path(args.out)
    echo(out.with_name(out.name + ".config"), {"masked": args.masked, "input_mode": args.input_mode, "max_val": 1.0})
    pred, truth = mvol_read(args.pred), mvol_read(args.truth)
    report = ev.evaluate(pred, truth, input_mode=args.input_mode, masked=args.masked, config={"pred": str(args.pred)})
    rows = [["metric", "value"]] + [list(r) for r in report.rows()]
    _write_csv(out, rows)
    print(_table(rows[:6]))
    if args.plot:
        from .plotting import plot_slice_psnr

        plot_slice_psnr(report, out.with_suffix(".png"))


def cmd_profile(args, echo):
    out = Path(args.out)
    echo(out.with_name(out.name + ".config"), {"pixel": args.pixel})
    prof = ev.slice_profile(mvol_read(args.pred), mvol_read(args.truth), args.pixel)
    ref_path = out.with_name(out.stem + "_reference" + out.suffix)
    for path, series in ((out, prof.series), (ref_path, prof.reference)):
        _write_csv(path, [["slice_index", "value"]] + [[i, f"{v:.8g}"] for i, v in enumerate(series)])
    dev = float(np.max(np.abs(prof.series - prof.reference)))
    print(f"pixel {_fmt(prof.pixel)}: {len(prof.series)} slices, max |pred - truth| = {dev:.5f}")
    if args.plot:
        from .plotting import plot_profile

        plot_profile(prof, out.with_suffix(".png"))


def cmd_ablate(args, echo):
    """Rows come from the three stage checkpoints of one run directory per input column."""
    out = Path(args.out)
    echo(out / "ablate.config", {"fraction": args.fraction})
    files = subject_files(args.test)
    t1, truth = mvol_read(files["t1"], "T1W"), mvol_read(files["t2"], "T2W")
    us = Volume(undersample_volume(truth.voxels, args.fraction))
    runs = {"T1-only": args.t1_run, "T1+1/8T2": args.t2_run}

    def predict(sbm_count, column):
        run = runs[column]
        path = None if run is None else Path(run) / f"stage{sbm_count + 1}.ckpt"
        if path is None or not path.exists():
            return None
        ckpt = load_checkpoint(path)
        return reconstruct_volume(model_from_checkpoint(ckpt), t1, us if ckpt.config.rm_enabled else None)

    table = ev.run_ablation(predict, truth, {"T1+1/8T2": us})
    _write_csv(out / "ablation.csv", table.csv_rows())
    print(table.render())
    if args.plot:
        from .plotting import plot_ablation

        plot_ablation(table, out / "ablation.png")


# ------------------------------------------------------------------- parser


def _add_plot(p):
    p.add_argument("--plot", action="store_true", help="also render a PNG figure next to the output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrsynth", description="T1-to-T2 MR synthesis toolkit")
    subs = parser.add_subparsers(dest="command", metavar="command", required=True)
    parser._subcommands = {}  # noqa: SLF001

    def sub(name, func, help_):
        p = subs.add_parser(name, help=help_)
        p.set_defaults(func=func)
        parser._subcommands[name] = p  # noqa: SLF001
        return p

    p = sub("phantom", cmd_phantom, "write a paired T1/T2 phantom subject directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_dims, default=PhantomSpec().dims, help="slices,rows,cols")
    p.add_argument("--lesions", type=int, default=PhantomSpec().lesion_count)
    p.add_argument("--lesion-radius", type=_radii, default=PhantomSpec().lesion_radius, help="min,max in voxels")
    p.add_argument("--out", required=True)

    p = sub("undersample", cmd_undersample, "keep a central k-space band and zero-fill the rest")
    p.add_argument("--input", required=True)
    p.add_argument("--fraction", type=_fraction, required=True, help="e.g. 1/8")
    p.add_argument("--out", required=True)

    p = sub("train", cmd_train, "run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--subjects", nargs="+", required=True, help="subject directories from `phantom`")
    p.add_argument("--fraction", type=_fraction, default=None, help="enable the reconstruction module at this fraction")
    defaults = OptimizerConfig()
    p.add_argument("--steps", type=int, default=defaults.steps_per_stage)
    p.add_argument("--lr", type=float, default=defaults.learning_rate)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--seed", type=int, default=defaults.seed)
    for name in NETWORK_FLAGS:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=int, default=None)
    p.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    _add_plot(p)

    p = sub("reconstruct", cmd_reconstruct, "synthesize a T2 volume from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--t1", required=True)
    p.add_argument("--undersampled", default=None)
    p.add_argument("--keep-background", action="store_true", help="do not zero the output outside the T1 support")
    p.add_argument("--out", required=True)
    _add_plot(p)

    p = sub("evaluate", cmd_evaluate, "PSNR / MAE of a prediction against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--input-mode", choices=ev.INPUT_MODES, default="T1-only")
    p.add_argument("--masked", action="store_true", help="only score voxels where the truth is nonzero")
    p.add_argument("--out", required=True)
    _add_plot(p)

    p = sub("profile", cmd_profile, "trace one pixel through all slices (writes OUT and OUT_reference)")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--pixel", type=_pixel, required=True, help="row,col")
    p.add_argument("--out", required=True)
    _add_plot(p)

    p = sub("ablate", cmd_ablate, "fill the module-by-input PSNR grid from trained run directories")
    p.add_argument("--test", required=True, help="held-out subject directory")
    p.add_argument("--t1-run", default=None, help="run directory trained without the reconstruction module")
    p.add_argument("--t2-run", default=None, help="run directory trained with --fraction")
    p.add_argument("--fraction", type=_fraction, default=UndersampleSpec("1/8"))
    p.add_argument("--out", required=True)
    _add_plot(p)

    p = subs.add_parser("rerun", help="replay a command from its echoed config file")
    p.add_argument("config")
    parser._subcommands["rerun"] = p  # noqa: SLF001
    return parser


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "rerun":
            return dispatch(shlex.split(read_echo(args.config)["argv"]))
        full = explicit_argv(parser, args)
        args.func(args, lambda path, resolved: write_echo(Path(path), full, resolved))
    except Exception as exc:  # noqa: BLE001
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
