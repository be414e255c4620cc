"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

import yaml

from . import plotting
from ._io import atomic_write_json, atomic_write_text
from .diagnostics import (
    CurveSpec,
    curves_csv,
    dilated_shift_report,
    eta_sweep,
    schedule_curves,
    shortcut_sweep,
    texture_corpus,
    variance_scaling_check,
    zoom_self_similarity,
)
from .diffuse import DenoiserSpec
from .grid import GridError, LatentGrid, SeedKey, make_grid, read_pnm, write_aptg, write_pgm_channels
from .pipeline import PipelineAbort, PipelineConfig, run_apt
from .resample import dilated_layout, upsample
from .schedule import ScheduleError, build_schedule

log = logging.getLogger("apt_upscale")

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3

# config-file spellings that differ from PipelineConfig field names
ALIASES = {"steps": "n_steps", "r": "overlap"}
CONFIG_KEYS = {f for f in PipelineConfig.__dataclass_fields__} | set(ALIASES) | {"output_dir"}


class UsageError(Exception):
    pass


# -- config --------------------------------------------------------------------


def _parse_override(item: str):
    if "=" not in item:
        raise UsageError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path=None, overrides=(), env=None) -> tuple[PipelineConfig, str | None]:
    """Build a :class:`PipelineConfig` from a YAML file plus ``key=value`` overrides.

    Returns the config and the ``output_dir`` entry, if any. ``APT_SEED`` in
    ``env`` replaces the seed.
    """
    env = os.environ if env is None else env
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse {p}: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"{p}: expected a mapping of keys")
    raw = dict(raw)
    for item in overrides:
        key, value = _parse_override(item)
        if key.startswith("denoiser."):
            raw.setdefault("denoiser", {})
            raw["denoiser"] = {**raw["denoiser"], key.split(".", 1)[1]: value}
        else:
            raw[key] = value
    unknown = sorted(set(raw) - CONFIG_KEYS)
    if unknown:
        raise UsageError(f"unknown config key: {unknown[0]}")
    output_dir = raw.pop("output_dir", None)
    kwargs = {ALIASES.get(k, k): v for k, v in raw.items()}
    if "APT_SEED" in env:
        try:
            kwargs["seed"] = int(env["APT_SEED"])
        except ValueError as exc:
            raise UsageError(f"APT_SEED must be an integer, got {env['APT_SEED']!r}") from exc
    try:
        if "denoiser" in kwargs:
            kwargs["denoiser"] = DenoiserSpec.from_dict(kwargs["denoiser"])
        if "eta_overrides" in kwargs:
            kwargs["eta_overrides"] = {int(k): float(v) for k, v in kwargs["eta_overrides"].items()}
        if "eta_table" in kwargs:
            kwargs["eta_table"] = {float(k): float(v) for k, v in kwargs["eta_table"].items()}
        config = PipelineConfig(**kwargs)
    except (TypeError, ValueError, AttributeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return config, output_dir


def _out_dir(args, config_dir=None) -> Path:
    d = Path(args.out or config_dir or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


# -- subcommands -----------------------------------------------------------------


def cmd_schedule(args) -> int:
    etas = args.eta or [1.0]
    if len(etas) > 1 and not args.compare:
        raise UsageError("several --eta values need --compare")
    specs = [CurveSpec(eta, args.beta0, args.betaT, args.t) for eta in etas]
    for factor in args.shift or []:
        specs.append(CurveSpec(etas[0], args.beta0, args.betaT, args.t, shift_factor=factor))
    try:
        for spec in specs:
            build_schedule(spec.beta0, spec.betaT, spec.T, spec.eta)
        tables = schedule_curves(specs)
    except ScheduleError as exc:
        raise UsageError(str(exc)) from exc
    text = curves_csv(tables, labelled=len(specs) > 1 or args.compare)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if args.plot:
        plotting.plot_schedule_curves(tables, args.plot)
    return EXIT_OK


def _write_run(report, out: Path) -> Path:
    body = report.to_dict(timing=False)
    files = {}
    for s, grid in sorted(report.grids.items()):
        stem = out / f"stage_{s}"
        write_aptg(grid, stem.with_suffix(".aptg"))
        pgms = write_pgm_channels(grid, stem)
        files[str(s)] = {"grid": f"stage_{s}.aptg", "pgm": [p.name for p in pgms]}
    body["files"] = files
    recs = ([report.phase1] if report.phase1 else []) + report.stages
    body["timing"] = {f"stage_{r.stage}": r.wall_time for r in recs}
    if report.grids:
        plotting.plot_run(report, out / "run.png")
        body["files"]["figure"] = "run.png"
    return atomic_write_json(out / "report.json", body)


def cmd_run(args) -> int:
    config, config_out = load_config(args.config, args.override)
    out = _out_dir(args, config_out)
    try:
        report = run_apt(config)
    except PipelineAbort as exc:
        log.error("run aborted: %s", exc)
        if exc.report is not None:
            _write_run(exc.report, out)
        return EXIT_ABORT
    path = _write_run(report, out)
    final = report.to_dict()
    print(f"wrote {path}  final {final.get('final_dims')}  denoiser calls {final['total_denoiser_calls']}")
    return EXIT_OK


def _textures(args) -> dict[str, LatentGrid]:
    if getattr(args, "image", None):
        return {Path(args.image).stem: read_pnm(args.image)}
    corpus = texture_corpus(size=args.size, seed=args.seed)
    if args.texture == "all":
        return corpus
    if args.texture not in corpus:
        raise UsageError(f"unknown texture {args.texture!r}; choose from {', '.join(corpus)} or all")
    return {args.texture: corpus[args.texture]}


def cmd_selfsim(args) -> int:
    out = _out_dir(args)
    scales = _int_list(args.scales)
    results = {}
    for name, tex in _textures(args).items():
        reps = zoom_self_similarity(tex, scales, crop=args.crop, sample_n=args.sample_n)
        means = [reps[f].mean for f in scales]
        results[name] = {
            "reports": [reps[f].to_dict() for f in scales],
            "nondecreasing": all(a <= b for a, b in zip(means, means[1:])),
        }
        plotting.plot_selfsim({f: r.center for f, r in reps.items()}, out / f"selfsim_{name}.png", title=name)
        print(name, " ".join(f"x{f}:{m:.4f}" for f, m in zip(scales, means)))
    atomic_write_json(out / "selfsim.json", results)
    return EXIT_OK


def cmd_shift(args) -> int:
    out = _out_dir(args)
    results = {}
    for name, tex in _textures(args).items():
        H, W = tex.height * args.scale, tex.width * args.scale
        up = upsample(tex, H, W, args.method)
        rep = dilated_shift_report(tex, up, dilated_layout(H, W, tex.height, tex.width))
        results[name] = rep.to_dict()
        plotting.plot_shift(rep, out / f"shift_{name}.png", title=f"{name} ({args.method} x{args.scale})")
        print(f"{name}: median std delta {rep.median_std_delta:.6g}, median mean delta {rep.median_mean_delta:.6g}")
    atomic_write_json(out / "shift.json", {"method": args.method, "scale": args.scale, "textures": results})
    return EXIT_OK


def cmd_varscale(args) -> int:
    out = _out_dir(args)
    try:
        sched = build_schedule(args.beta0, args.betaT, args.T, args.eta)
        z0 = make_grid(args.size, args.size, 1, args.value)
        rep = variance_scaling_check(z0, args.k, sched, args.t, args.trials, SeedKey(args.seed))
    except (ValueError, ScheduleError) as exc:
        raise UsageError(str(exc)) from exc
    atomic_write_json(out / "varscale.json", rep.to_dict())
    verdict = "pass" if rep.passed else "fail"
    print(
        f"k={rep.k:g} t={rep.t}: mean {rep.observed_mean:.6f} (expected {rep.expected_mean:.6f}, se {rep.mean_se:.2g}); "
        f"noise std {rep.observed_noise_std:.6f} (expected {rep.expected_noise_std:.6f}) -> {verdict}"
    )
    return EXIT_OK


def cmd_sweep_eta(args) -> int:
    config, config_out = load_config(args.config, args.override)
    out = _out_dir(args, config_out)
    rows = eta_sweep(config, _float_list(args.etas), stage=args.stage)
    atomic_write_text(out / "eta_sweep.csv", _rows_csv(rows))
    plotting.plot_eta_sweep(rows, out / "eta_sweep.png")
    sys.stdout.write(_rows_csv(rows))
    return EXIT_OK


def cmd_compare_shortcut(args) -> int:
    config, config_out = load_config(args.config, args.override)
    out = _out_dir(args, config_out)
    t0s = _int_list(args.t0s)
    if any(not 1 <= t <= config.n_steps for t in t0s):
        raise UsageError(f"T0 values must lie in [1, {config.n_steps}]")
    rows = shortcut_sweep(config, t0s)
    atomic_write_text(out / "shortcut.csv", _rows_csv(rows))
    plotting.plot_shortcut_sweep(rows, out / "shortcut.png")
    sys.stdout.write(_rows_csv(rows))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def _add_config_args(p):
    p.add_argument("--config", help="YAML run config (flat keys, optional denoiser block)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="override a config key; repeatable")
    p.add_argument("--out", help="output directory (default: config output_dir or .)")


def _add_texture_args(p):
    p.add_argument("--texture", default="all", help="checker, value_noise, ramp or all (default)")
    p.add_argument("--image", help="binary PGM/PPM to use instead of the corpus")
    p.add_argument("--size", type=int, default=64, help="corpus texture size")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apt-upscale", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="emit beta / alpha_bar / log SNR tables as CSV")
    p.add_argument("--eta", type=float, action="append", help="schedule exponent; repeat with --compare")
    p.add_argument("--t", type=int, default=1000, help="training timesteps T")
    p.add_argument("--beta0", type=float, default=0.00085)
    p.add_argument("--betaT", type=float, default=0.012)
    p.add_argument("--compare", action="store_true", help="write several curves into one CSV")
    p.add_argument("--shift", type=float, action="append", help="add an SNR-shifted curve with this factor")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.add_argument("--plot", help="PNG path for the curve figure")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("run", help="run the full upscaling pipeline")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("diagnose", help="analysis reports")
    dsub = p.add_subparsers(dest="diagnostic", required=True)

    d = dsub.add_parser("selfsim", help="self-similarity of fixed-size crops across zoom factors")
    _add_texture_args(d)
    d.add_argument("--scales", default="1,2,4")
    d.add_argument("--crop", type=int, default=32)
    d.add_argument("--sample-n", type=int, default=32)
    d.set_defaults(func=cmd_selfsim)

    d = dsub.add_parser("shift", help="dilated-patch mean/std drift after upsampling")
    _add_texture_args(d)
    d.add_argument("--method", choices=["bicubic", "nearest"], default="bicubic")
    d.add_argument("--scale", type=int, default=4)
    d.set_defaults(func=cmd_shift)

    d = dsub.add_parser("varscale", help="Monte Carlo check of latent down-scaling in the forward process")
    d.add_argument("--k", type=float, default=2.0)
    d.add_argument("--t", type=int, default=200)
    d.add_argument("--T", type=int, default=1000)
    d.add_argument("--eta", type=float, default=1.0)
    d.add_argument("--beta0", type=float, default=0.00085)
    d.add_argument("--betaT", type=float, default=0.012)
    d.add_argument("--trials", type=int, default=2000)
    d.add_argument("--size", type=int, default=8)
    d.add_argument("--value", type=float, default=2.0, help="constant value of z0")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", help="output directory")
    d.set_defaults(func=cmd_varscale)

    p = sub.add_parser("sweep-eta", help="re-run one stage over several eta values")
    _add_config_args(p)
    p.add_argument("--etas", default="1,1.5,2,2.5,3,3.5,4")
    p.add_argument("--stage", type=int, default=2)
    p.set_defaults(func=cmd_sweep_eta)

    p = sub.add_parser("compare-shortcut", help="stage-2 output over a range of shortcut T0")
    _add_config_args(p)
    p.add_argument("--t0s", default="20,25,30,35,40,45,50")
    p.set_defaults(func=cmd_compare_shortcut)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GridError, ScheduleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BrokenPipeError:
        # reader went away (e.g. `| head`); silence the flush at interpreter exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
