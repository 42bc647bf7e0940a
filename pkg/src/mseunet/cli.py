"""Command-line entry point: enhance, train, eval, inspect, selftest."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import default_dtype
from .checkpoint import CheckpointError, ConfigError, build_config, load_model, parse_kv, save_model, split_config
from .model import ModelConfig, count_params, estimate_flops, model_forward
from .signal import SAMPLE_RATE, AudioBuffer, WavError, istft, read_wav, write_wav
from .train import TrainConfig, pcs_stretch, si_sdr, train_loop, write_loss_csv

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# Published (params, FLOPs for 2 s) keyed by (C1, N); None where no figure is given.
REFERENCE = {
    (16, 2): (0.99e6, 4.16e9),
    (16, 4): (1.88e6, 4.62e9),
    (24, 1): (1.11e6, None),
    (24, 2): (2.00e6, None),
    (24, 3): (2.89e6, None),
    (24, 4): (3.78e6, 10.28e9),
    (32, 4): (6.28e6, 18.17e9),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mseunet", description="Magnitude/phase U-Net speech enhancer.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("enhance", help="enhance a noisy WAV file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--pcs", action="store_true", help="apply per-band contrast stretching before resynthesis")
    e.add_argument("--gammas", type=_floats, default=[1.0], help="per-band exponents for --pcs")
    e.add_argument("--band-edges", type=_floats, default=[0.0, SAMPLE_RATE / 2], help="band edges in Hz for --pcs")

    t = sub.add_parser("train", help="train on synthetic mixtures")
    t.add_argument("--config", help="key=value file with model and training keys")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", default="model.ckpt", help="checkpoint to write")
    t.add_argument("--loss-csv", help="loss trajectory CSV (default: <out>.csv)")
    t.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--seed", type=int)

    v = sub.add_parser("eval", help="SI-SDR of noisy and enhanced against clean references")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--clean", nargs="+", required=True)
    v.add_argument("--noisy", nargs="+", required=True)
    v.add_argument("--report", help="write JSON lines here instead of standard output")

    i = sub.add_parser("inspect", help="parameter and FLOP table against published figures")
    i.add_argument("--config", help="key=value file of model keys")
    i.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    i.add_argument("--duration", type=float, default=2.0, help="seconds of audio for the FLOP estimate")

    s = sub.add_parser("selftest", help="run invariant suites")
    s.add_argument("--suite", action="append", help="suite name (repeatable); default all")
    return p


def _config_values(path: str | None, overrides: list[str]) -> dict[str, str]:
    values = parse_kv(Path(path).read_text()) if path else {}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not KEY=VALUE")
        key, val = (s.strip() for s in item.split("=", 1))
        values[key] = val
    return values


def _fmt(n: float, unit: str) -> str:
    return f"{n / 1e6:.2f}M" if unit == "M" else f"{n / 1e9:.2f}G"


def inspect_table(cfg: ModelConfig, duration: float = 2.0) -> str:
    params = count_params(cfg)
    flops = estimate_flops(cfg, duration)
    ref_p, ref_f = REFERENCE.get((cfg.C1, cfg.N), (None, None))
    rows = [f"config: C1={cfg.C1} N={cfg.N} state_dim={cfg.state_dim} widths={list(cfg.widths)} "
            f"width_rule={cfg.width_rule} deformable={cfg.deformable}",
            f"{'module':<16}{'params':>12}  {'FLOPs':>18}"]
    for key in params:
        if key != "total":
            rows.append(f"{key:<16}{params[key]:>12,}  {flops.get(key, 0):>18,}")
    rows.append(f"{'total':<16}{params['total']:>12,}  {flops['total']:>18,}")
    if ref_p is not None:
        dev = 100 * (params["total"] - ref_p) / ref_p
        rows.append(f"params: {_fmt(params['total'], 'M')} vs reference {_fmt(ref_p, 'M')} ({dev:+.1f}%)")
    else:
        rows.append(f"params: {_fmt(params['total'], 'M')} (no reference for C1={cfg.C1}, N={cfg.N})")
    if ref_f is not None and duration == 2.0:
        dev = 100 * (flops["total"] - ref_f) / ref_f
        rows.append(f"FLOPs ({duration:g} s): {_fmt(flops['total'], 'G')} vs reference {_fmt(ref_f, 'G')} "
                    f"({dev:+.1f}%, report only)")
    else:
        rows.append(f"FLOPs ({duration:g} s): {_fmt(flops['total'], 'G')}")
    return "\n".join(rows)


def _enhance(args) -> int:
    model, _ = load_model(args.ckpt)
    noisy = read_wav(args.inp)
    enhanced, spec = model_forward(model, noisy)
    if args.pcs:
        enhanced = istft(pcs_stretch(spec, args.gammas, args.band_edges), len(noisy))
    write_wav(args.out, AudioBuffer(np.clip(enhanced.samples, -1.0, 1.0), noisy.sample_rate))
    print(f"wrote {args.out} ({len(noisy)} samples)")
    return EXIT_OK


def _train(args) -> int:
    values = _config_values(args.config, args.overrides)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    m_vals, t_vals = split_config(values, ModelConfig, TrainConfig)
    tcfg = build_config(TrainConfig, t_vals)
    model, start = None, 0
    if args.resume:
        with default_dtype(np.dtype(tcfg.dtype).type):
            model, ckpt = load_model(args.resume)
        if m_vals and build_config(ModelConfig, m_vals, base=model.cfg) != model.cfg:
            raise UsageError("model keys in --config disagree with the resumed checkpoint")
        start = ckpt.step
        mcfg = model.cfg
    else:
        mcfg = build_config(ModelConfig, m_vals)
    res = train_loop(mcfg, tcfg, model=model, start_step=start)
    save_model(args.out, res.model, res.step, tcfg.seed)
    csv_path = args.loss_csv or str(Path(args.out).with_suffix(".csv"))
    write_loss_csv(csv_path, res.trajectory)
    last = res.trajectory[-1][1] if res.trajectory else float("nan")
    print(f"trained to step {res.step}; last loss {last:.5f}; wrote {args.out} and {csv_path}")
    return EXIT_OK


def _eval(args) -> int:
    if len(args.clean) != len(args.noisy):
        raise UsageError("--clean and --noisy need the same number of files")
    model, _ = load_model(args.ckpt)
    lines, deltas = [], []
    for c_path, n_path in zip(args.clean, args.noisy):
        clean, noisy = read_wav(c_path), read_wav(n_path)
        enhanced, _ = model_forward(model, noisy)
        before, after = si_sdr(noisy, clean), si_sdr(enhanced, clean)
        deltas.append(after - before)
        lines.append(json.dumps({"file": n_path, "si_sdr_noisy_db": round(before, 6),
                                 "si_sdr_enhanced_db": round(after, 6), "delta_db": round(after - before, 6)}))
    text = "\n".join(lines) + "\n"
    if args.report:
        Path(args.report).write_text(text)
        print(f"{len(lines)} file(s); mean SI-SDR change {np.mean(deltas):+.2f} dB; report in {args.report}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _inspect(args) -> int:
    cfg = build_config(ModelConfig, _config_values(args.config, args.overrides))
    print(inspect_table(cfg, args.duration))
    return EXIT_OK


def _selftest(args) -> int:
    from .selftest import SUITES, run_suites

    unknown = [s for s in args.suite or [] if s not in SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s) {unknown}; available: {', '.join(sorted(SUITES))}")
    results = run_suites(args.suite)
    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    failed = [n for n, ok in results if not ok]
    if failed:
        print("failing properties: " + ", ".join(failed), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {"enhance": _enhance, "train": _train, "eval": _eval, "inspect": _inspect, "selftest": _selftest}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"mseunet {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, WavError, CheckpointError, ValueError, FloatingPointError) as e:
        print(f"mseunet {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
