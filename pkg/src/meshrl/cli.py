"""Command-line entry point: datagen, train-surrogate, train-agent, validate, report.

Exit codes: 0 success, 1 bad input (arguments, config, files), 2 runtime or
numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datagen, harness, surrogate
from .errors import FormatError, MetricError, NumericError, ValidationError
from .mesh_sim import BackendConfig

log = logging.getLogger("meshrl")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; here those are input errors (1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: top level must be an object")
    return doc


def _backend(conf: dict) -> BackendConfig:
    return BackendConfig.from_dict(conf.get("backend", {}))


def _dump(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# --- subcommands -----------------------------------------------------------

def cmd_datagen(args, conf: dict) -> int:
    profile = datagen.get_profile(args.profile)
    size = args.size if args.size is not None else profile.reference_size
    records = datagen.generate_dataset(profile, size, args.seed, _backend(conf))
    datagen.write_csv(records, args.out)
    log.info("wrote %d %s records to %s", len(records), profile.name, args.out)
    return EXIT_OK


def cmd_train_surrogate(args, conf: dict) -> int:
    records = datagen.read_csv(args.data)
    train, test = datagen.split_dataset(records, args.split, args.seed)
    res = surrogate.train_surrogate(train, test, learning_rate=args.lr, epochs=args.epochs,
                                    batch_size=args.batch, seed=args.seed, profile=args.profile or "")
    surrogate.save_model(res.model, args.out)
    scaler = res.model.scaler
    mlp_mse = surrogate.evaluate_mse(lambda x: surrogate.predict(res.model, x), test, scaler)
    metrics = {"mlp_test_mse": mlp_mse, "best_epoch": res.best_epoch,
               "train_curve": res.train_curve, "test_curve": res.test_curve,
               "n_train": len(train), "n_test": len(test)}
    if args.baseline == "ridge":
        ridge = surrogate.ridge_fit(train, args.lam)
        ridge_mse = surrogate.evaluate_mse(lambda x: surrogate.ridge_predict(ridge, x), test, scaler)
        metrics.update(ridge_lambda=args.lam, ridge_test_mse=ridge_mse, mse_ratio=mlp_mse / ridge_mse)
    _dump(metrics, f"{args.out}.metrics.json")
    print(f"mlp_test_mse {mlp_mse:.6f}")
    if "ridge_test_mse" in metrics:
        print(f"ridge_test_mse {metrics['ridge_test_mse']:.6f}")
    return EXIT_OK


_AGENT_FLAGS = {
    "paradigm": "paradigm", "surrogate": "surrogates", "profile": "profiles", "epochs": "epochs",
    "interactions": "interactions", "repeats": "repeats", "seed": "seed", "beta": "beta",
    "desk_scale": "desk_scale", "update_rule": "update_rule", "snet_aux": "snet_aux", "alpha": "alpha",
}


def agent_config(args, conf: dict) -> harness.ExperimentConfig:
    """Config file values, overridden by any flag given on the command line."""
    merged = dict(conf)
    for flag, key in _AGENT_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            merged[key] = value
    for key in ("paradigm", "surrogates", "profiles"):
        if key not in merged:
            raise ValidationError(f"{key} must be given on the command line or in the config file")
    return harness.ExperimentConfig.from_dict(merged)


def cmd_train_agent(args, conf: dict) -> int:
    config = agent_config(args, conf)
    envs = harness.build_envs(config)
    reports = harness.run_repeats(config, envs)
    harness.save_run(config, reports, args.out)
    for r in reports:
        log.info("repeat %d: simulated %.4f at epoch %d (%.1fs)", r.repeat, r.simulated_ratio,
                 r.best_epoch, r.elapsed_s)
    print(f"simulated_ratio {np.mean([r.simulated_ratio for r in reports]):.6f}")
    return EXIT_OK


def cmd_validate(args, conf: dict) -> int:
    config, reports = harness.load_run(args.run)
    cfg = config.backend_config()
    seed = config.seed if args.seed is None else args.seed
    for r in reports:
        r.validated_ratio = harness.validate_best(r, cfg, seed, config.beta)
    harness.save_run(config, reports, args.run)
    agg = harness.aggregate_repeats(reports)
    print(f"simulated_ratio {agg.simulated_ratio:.6f}")
    print(f"validated_ratio {agg.validated_ratio:.6f}")
    return EXIT_OK


def cmd_report(args, conf: dict) -> int:
    config, reports = harness.load_run(args.run)
    for path in harness.emit_run_report(config, reports, args.out):
        log.info("wrote %s", path)
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meshrl", description="Model-based RL laboratory for service-mesh load testing.")
    p.add_argument("--config", help="JSON experiment config; flags override its values")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("datagen", help="simulate a labeled trace dataset")
    d.add_argument("--profile", required=True, choices=sorted(datagen.PROFILES))
    d.add_argument("--size", type=int, help="records (default: the profile's reference size)")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_datagen)

    t = sub.add_parser("train-surrogate", help="fit the environment model (and optionally ridge)")
    t.add_argument("--data", required=True)
    t.add_argument("--split", type=float, default=0.8)
    t.add_argument("--lr", type=float, default=1e-5)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--profile", help="profile tag stored with the weights")
    t.add_argument("--out", required=True)
    t.add_argument("--baseline", choices=["ridge"])
    t.add_argument("--lambda", dest="lam", type=float, default=1.0)
    t.set_defaults(func=cmd_train_surrogate)

    a = sub.add_parser("train-agent", help="train a paradigm against surrogates")
    a.add_argument("--paradigm", choices=harness.PARADIGMS)
    a.add_argument("--surrogate", type=lambda s: s.split(","),
                   help=f"model file(s), comma separated, or '{harness.ORACLE}' for the simulator itself")
    a.add_argument("--profile", type=lambda s: s.split(","))
    a.add_argument("--epochs", type=int)
    a.add_argument("--interactions", type=int)
    a.add_argument("--repeats", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--beta", type=float)
    a.add_argument("--alpha", type=float)
    a.add_argument("--desk-scale", action="store_true", default=None)
    a.add_argument("--update-rule", choices=["qreg", "reinforce"])
    a.add_argument("--snet-aux", action="store_true", default=None)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_train_agent)

    v = sub.add_parser("validate", help="replay best windows through the simulator")
    v.add_argument("--run", required=True)
    v.add_argument("--seed", type=int, help="replay seed (default: the run's own seed)")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("report", help="write summary.json and epochs.csv")
    r.add_argument("--run", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # usage errors and --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        conf = _load_config(args.config)
        return args.func(args, conf)
    except (ValidationError, FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, MetricError, OSError, FloatingPointError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
