"""Command line entry point: ``ddolab <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 verification
failure, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, default_config, load_config
from .grad import NonFiniteError
from .models import CheckpointError, load_model
from .selfplay import RoundAborted, read_metrics_csv
from .train import DivergenceError

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("ddolab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get("DDO_LAB_OUT") or "ddo-lab-out")


def _config(args):
    cfg = load_config(args.config) if args.config else default_config(args.kind)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _experiment(args):
    from .experiment import Experiment

    return Experiment(_config(args))


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


# -- commands ------------------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    summary = _experiment(args).pretrain(_out_dir(args))
    _print_json(summary)
    return EXIT_OK


def cmd_ddo(args) -> int:
    exp = _experiment(args)
    summary = exp.ddo(_out_dir(args), args.ckpt, args.rounds, args.jobs)
    _print_json(summary)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    kwargs = {"constants": args.constants} if args.suite == "theorem2" else {}
    report = run_suite(args.suite, args.trials, args.seed or 0, **kwargs)
    text = json.dumps(report, indent=2, default=float) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    status = "PASS" if report["passed"] else "FAIL"
    print(f"{args.suite}: {status} ({report['failures']}/{report['n_trials']} failed) "
          f"{json.dumps(report['summary'], default=float)}", file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_sample(args) -> int:
    from .experiment import sample_model, samples_csv

    if args.n < 0:
        raise ConfigError("--n must be >= 0")
    model, _ = load_model(args.ckpt)
    x = sample_model(model, args.n, args.seed or 0, args.steps)
    text = samples_csv(x, model.kind)
    if args.file:
        Path(args.file).parent.mkdir(parents=True, exist_ok=True)
        Path(args.file).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_model(args.ckpt)
    _print_json(_experiment(args).evaluate(model))
    return EXIT_OK


def cmd_plotdata(args) -> int:
    from .experiment import write_plotdata

    exp = _experiment(args)
    models = {}
    for name, path in (("mle", args.baseline), ("ddo", args.ckpt)):
        if path:
            m, _ = load_model(path)
            exp.check_compatible(m)
            models[name] = m
    out = _out_dir(args)
    written = write_plotdata(exp, models, out, n_samples=args.samples, seed=args.seed or 0)
    if args.render:
        from . import plotting

        if "pmf" in written:
            written["pmf_png"] = plotting.render_pmf(out)
        else:
            written["densities_png"] = plotting.render_density_panels(out, ["data", *models])
    _print_json({k: str(v) for k, v in written.items()})
    return EXIT_OK


def cmd_sweep_report(args) -> int:
    from .experiment import sweep_report, sweep_report_csv

    out = _out_dir(args)
    if not (out / "rounds").is_dir():
        raise ConfigError(f"{out} has no rounds/ directory")
    rows = sweep_report(out)
    text = sweep_report_csv(rows)
    (out / "sweep_report.csv").write_text(text)
    sys.stdout.write(text)
    if args.render:
        from .plotting import render_sweep

        per_round = {int(p.name): read_metrics_csv(p / "metrics.csv") for p in (out / "rounds").iterdir()}
        render_sweep(rows, per_round, out / "sweep_report.png")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--kind", choices=("diffusion", "ar", "categorical"), default="diffusion",
                        help="built-in default config to use when --config is absent")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="output directory (default: $DDO_LAB_OUT)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ddolab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pretrain", parents=[common], help="maximum-likelihood pretraining")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("ddo", parents=[common], help="multi-round discriminative finetuning")
    s.add_argument("--ckpt", help="base checkpoint (default: <out>/pretrain/ckpt.ddo)")
    s.add_argument("--rounds", type=int, help="number of rounds (overrides the config)")
    s.add_argument("--jobs", type=int, default=1, help="parallel grid workers")
    s.set_defaults(fn=cmd_ddo)

    s = sub.add_parser("verify", parents=[common], help="run a property suite")
    s.add_argument("suite", choices=("theorem1", "theorem2", "theorem3", "identity", "gradcheck",
                                     "guidance", "jensen"))
    s.add_argument("--trials", type=int)
    s.add_argument("--constants", choices=("published", "rederived"), default="published",
                   help="reverse-KL constant for theorem2")
    s.add_argument("--report", help="write the JSON report here instead of stdout")
    s.set_defaults(fn=cmd_verify)

    s = sub.add_parser("sample", parents=[common], help="draw samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--steps", type=int, default=18, help="sampler steps (diffusion)")
    s.add_argument("--file", help="CSV destination (default: stdout)")
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("eval", parents=[common], help="selection metric of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("plotdata", parents=[common], help="density grids and sample CSVs")
    s.add_argument("--ckpt", help="finetuned checkpoint")
    s.add_argument("--baseline", help="MLE checkpoint")
    s.add_argument("--samples", type=int, default=20_000)
    s.add_argument("--render", action="store_true", help="also write PNG figures")
    s.set_defaults(fn=cmd_plotdata)

    s = sub.add_parser("sweep-report", parents=[common], help="tabulate grid results per round")
    s.add_argument("--render", action="store_true", help="also write a PNG of the eval curves")
    s.set_defaults(fn=cmd_sweep_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print("ddolab: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"ddolab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NonFiniteError, RoundAborted, FloatingPointError) as exc:
        print(f"ddolab: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
