"""Command-line entry point.

Subcommands run one stage each and write a ``manifest.json`` next to their
outputs: the fully resolved config, the seed, and SHA-256 digests of every
input and output file. Manifests carry no timestamps, so a rerun with the
same config reproduces them byte for byte.

Exit codes: 0 success, 1 validation failure (bad input data, bad or
conflicting flags, missing files), 2 runtime failure. Errors are reported as
one JSON object per line on standard error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, DataValidationError, read_event_log, write_event_log
from .evaluation import compare_policies, default_rho_grid, uplift_report, write_curve_csv, write_decile_csv
from .features import PipelineSpec, fit_pipeline
from .simulator import (
    confounded_environment,
    default_environment,
    generate_log,
    load_environment,
    save_environment,
)
from .targets import GenerationConfig, generate_training_data, write_training_set
from .workflow import MODES, TrainingConfig, load_policy, save_policy, score_population, split_dataset, train_policy

logger = logging.getLogger("causalbandit")

SCENARIOS = {"default": default_environment, "confounded": confounded_environment}

# Flags that only make sense for a bandit trained on generated targets.
_BANDIT_FLAGS = ("prior_variance", "noise_variance")
_MATCHING_FLAGS = ("m_prime", "sample_size", "matching")
_TRAIN_DEFAULTS = {"m_prime": 10, "sample_size": None, "matching": "exact", "prior_variance": 1.0, "noise_variance": 1.0}


class UsageError(Exception):
    """Bad or conflicting command-line configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers ------------------------------------------------------------------


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _rho_grid(values) -> np.ndarray:
    if values is None:
        return default_rho_grid()
    grid = np.array(sorted(set(values)), dtype=float)
    if grid[0] <= 0 or grid[-1] > 1:
        raise UsageError("rho grid values must lie in (0, 1]")
    return grid


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"input file not found: {p}")
    return p


def _config_dict(args) -> dict:
    skip = {"func", "verbose"}
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        out[k] = v if isinstance(v, (int, float, str, bool, list, type(None))) else str(v)
    return out


def write_manifest(out_dir: Path, args, inputs, outputs, extra: dict | None = None) -> Path:
    body = {
        "tool": "causalbandit",
        "version": __version__,
        "subcommand": args.command,
        "seed": getattr(args, "seed", None),
        "config": _config_dict(args),
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {Path(p).name: sha256(p) for p in outputs},
    }
    if extra:
        body.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(body, indent=1, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
    return path


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, (np.ndarray, frozenset, set, tuple)):
        return list(o)
    return str(o)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands --------------------------------------------------------------


def cmd_simulate(args) -> dict:
    if args.env_file:
        env = load_environment(_existing(args.env_file))
    else:
        env = SCENARIOS[args.scenario](seed=args.seed, noise_sd=args.noise_sd)
    treat, hold = generate_log(env, args.n_events, args.holdout_fraction, seed=args.seed)
    out = _out_dir(args)
    outputs = [
        write_event_log(treat, out / "treatment.jsonl"),
        write_event_log(hold, out / "holdout.jsonl"),
        save_environment(env, out / "environment.json"),
    ]
    inputs = [args.env_file] if args.env_file else []
    write_manifest(out, args, inputs, outputs, {"counts": {"treatment": len(treat), "holdout": len(hold)}})
    return {"treatment": len(treat), "holdout": len(hold), "out_dir": str(out)}


def _apply_pipeline(ds: Dataset, pipe) -> Dataset:
    return Dataset.from_arrays(pipe.transform(ds.contexts), ds.arms, ds.propensities, ds.outcomes,
                               ds.event_ids, num_arms=ds.num_arms, validate=False)


def cmd_preprocess(args) -> dict:
    treat = read_event_log(_existing(args.treatment), num_arms=args.num_arms)
    hold = read_event_log(_existing(args.holdout), num_arms=treat.num_arms) if args.holdout else None
    spec = PipelineSpec(args.winsor_lower, args.winsor_upper, frozenset(args.log_columns or ()))
    bad = [c for c in spec.log_transform_columns if not 0 <= c < treat.dimension]
    if bad:
        raise UsageError(f"--log-columns out of range: {bad}")
    # Statistics come from the training split only, the same split train uses.
    fit_rows, _ = split_dataset(treat, args.train_fraction, args.seed)
    pipe = fit_pipeline(fit_rows.contexts, spec=spec)
    out = _out_dir(args)
    outputs = [pipe.save(out / "pipeline.json"), write_event_log(_apply_pipeline(treat, pipe), out / "treatment.jsonl")]
    inputs = [args.treatment]
    if hold is not None:
        outputs.append(write_event_log(_apply_pipeline(hold, pipe), out / "holdout.jsonl"))
        inputs.append(args.holdout)
    write_manifest(out, args, inputs, outputs, {"fitted_on_rows": len(fit_rows)})
    return {"fitted_on_rows": len(fit_rows), "out_dir": str(out)}


def cmd_gen_targets(args) -> dict:
    log = read_event_log(_existing(args.log), num_arms=args.num_arms)
    cfg = GenerationConfig(
        sample_size=args.sample_size, neighbors=args.m_prime, rng_seed=args.seed,
        matching_mode=args.matching, ef_search=args.ef_search,
    )
    result = generate_training_data(log, cfg)
    meta = result.metadata(cfg)
    out = _out_dir(args)
    path = write_training_set(result.examples, out / "training_set.jsonl", meta)
    write_manifest(out, args, [args.log], [path], {"generation": meta})
    return {"examples": len(result.examples), "skipped": result.skipped, "out_dir": str(out)}


def _check_train_conflicts(args) -> None:
    given = {k for k in _TRAIN_DEFAULTS if getattr(args, k) is not None}
    if args.mode == "two-model":
        clash = sorted(given & set(_BANDIT_FLAGS + _MATCHING_FLAGS))
    elif args.mode == "non-incremental":
        clash = sorted(given & set(_MATCHING_FLAGS))
    else:
        clash = []
    if clash:
        flags = ", ".join("--" + c.replace("_", "-") for c in clash)
        raise UsageError(f"mode {args.mode} does not use {flags}")
    if args.mode == "two-model" and not args.holdout:
        raise UsageError("mode two-model needs --holdout (control outcomes)")
    if args.s_grid and not args.holdout:
        raise UsageError("--s-grid needs --holdout for validation uplift")
    for k, v in _TRAIN_DEFAULTS.items():
        if getattr(args, k) is None:
            setattr(args, k, v)


def cmd_train(args) -> dict:
    _check_train_conflicts(args)
    treat = read_event_log(_existing(args.treatment), num_arms=args.num_arms)
    hold = read_event_log(_existing(args.holdout), num_arms=treat.num_arms) if args.holdout else None
    cfg = TrainingConfig(
        mode=args.mode, m_prime=args.m_prime, sample_size=args.sample_size, matching_mode=args.matching,
        prior_variance=args.prior_variance, noise_variance=args.noise_variance, seed=args.seed,
    )
    t_train, t_test = split_dataset(treat, args.train_fraction, args.seed)
    out = _out_dir(args)
    split_dir = out / "splits"
    split_dir.mkdir(exist_ok=True)
    outputs = [write_event_log(t_train, split_dir / "treatment_train.jsonl"),
               write_event_log(t_test, split_dir / "treatment_test.jsonl")]
    h_train = None
    if hold is not None:
        h_train, h_test = split_dataset(hold, args.train_fraction, args.seed)
        outputs += [write_event_log(h_train, split_dir / "holdout_train.jsonl"),
                    write_event_log(h_test, split_dir / "holdout_test.jsonl")]
    policy = train_policy(t_train, cfg, h_train, args.s_grid)
    outputs.append(save_policy(policy, out / "model.json"))
    inputs = [args.treatment] + ([args.holdout] if args.holdout else [])
    training = dict(policy.info)
    if args.mode == "non-incremental":
        training["neighbor_matching"] = False
    write_manifest(out, args, inputs, outputs, {"training": training,
                                                 "split": {"train": len(t_train), "test": len(t_test)}})
    return {"mode": args.mode, "train_events": len(t_train), "out_dir": str(out)}


def cmd_score(args) -> dict:
    policy = load_policy(_existing(args.model))
    log = read_event_log(_existing(args.log), num_arms=args.num_arms)
    arms, scores = policy.recommend(log.contexts)
    out = _out_dir(args)
    path = out / "scores.csv"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("event_id,recommended_arm,score\n")
        for e, a, s in zip(log.event_ids.tolist(), arms.tolist(), scores.tolist()):
            fh.write(f"{e},{a},{s:.6f}\n")
    write_manifest(out, args, [args.model, args.log], [path])
    return {"scored": len(log), "out_dir": str(out)}


def _report(model_path, treat: Dataset, hold: Dataset, grid):
    policy = load_policy(_existing(model_path))
    return uplift_report(score_population(policy, treat, hold), grid)


def _load_test(args) -> tuple[Dataset, Dataset]:
    treat = read_event_log(_existing(args.treatment), num_arms=args.num_arms)
    hold = read_event_log(_existing(args.holdout), num_arms=treat.num_arms)
    return treat, hold


def cmd_evaluate(args) -> dict:
    grid = _rho_grid(args.rho_grid)
    treat, hold = _load_test(args)
    report = _report(args.model, treat, hold, grid)
    out = _out_dir(args)
    outputs = [write_decile_csv(report, out / "deciles.csv"), write_curve_csv(report, out / "uplift.csv")]
    inputs = [args.model, args.treatment, args.holdout]
    summary = {"uplift": {str(r): _finite_or_none(report.at(r)) for r in (0.01, 0.1, 1.0) if _on_grid(report, r)}}
    if args.baseline:
        base = _report(args.baseline, treat, hold, grid)
        outputs.append(write_curve_csv(base, out / "baseline_uplift.csv"))
        comp = compare_policies(report, base).as_dict()
        path = out / "comparison.json"
        path.write_text(json.dumps(comp, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        outputs.append(path)
        inputs.append(args.baseline)
        summary["comparison"] = comp
    write_manifest(out, args, inputs, outputs, {"summary": summary})
    return summary


def cmd_compare(args) -> dict:
    grid = _rho_grid(args.rho_grid)
    treat, hold = _load_test(args)
    a = _report(args.model_a, treat, hold, grid)
    b = _report(args.model_b, treat, hold, grid)
    comp = compare_policies(a, b).as_dict()
    out = _out_dir(args)
    path = out / "comparison.json"
    path.write_text(json.dumps(comp, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    outputs = [write_curve_csv(a, out / "uplift_a.csv"), write_curve_csv(b, out / "uplift_b.csv"), path]
    write_manifest(out, args, [args.model_a, args.model_b, args.treatment, args.holdout], outputs)
    return comp


def _finite_or_none(v: float):
    return v if np.isfinite(v) else None


def _on_grid(report, rho) -> bool:
    return bool(np.any(np.isclose(report.rho_grid, rho, rtol=0, atol=1e-9)))


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="causal-bandit", description="Causal contextual bandits for incremental targeting.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--out-dir", required=True, help="directory for outputs and manifest.json")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--num-arms", type=int, default=None, help="K; inferred from the log when omitted")

    sp = sub.add_parser("simulate", help="generate treatment and holdout logs from a synthetic environment")
    common(sp)
    sp.add_argument("--scenario", choices=sorted(SCENARIOS), default="default")
    sp.add_argument("--env-file", default=None, help="environment JSON file (overrides --scenario)")
    sp.add_argument("--n-events", type=int, default=60000, help="treatment plus holdout events")
    sp.add_argument("--holdout-fraction", type=float, default=1 / 6)
    sp.add_argument("--noise-sd", type=float, default=1.0)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("preprocess", help="fit winsorize/log/min-max scaling on the training split and apply it")
    common(sp)
    sp.add_argument("--treatment", required=True)
    sp.add_argument("--holdout", default=None)
    sp.add_argument("--train-fraction", type=float, default=0.7)
    sp.add_argument("--winsor-lower", type=float, default=1.0)
    sp.add_argument("--winsor-upper", type=float, default=99.0)
    sp.add_argument("--log-columns", type=_int_list, default=None, help="comma-separated column indices")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("gen-targets", help="build incremental training targets from an event log")
    common(sp)
    sp.add_argument("--log", required=True)
    sp.add_argument("--m-prime", type=int, default=10, help="matched neighbours per event")
    sp.add_argument("--sample-size", type=int, default=None, help="M; defaults to every eligible event")
    sp.add_argument("--matching", choices=("exact", "graph"), default="exact")
    sp.add_argument("--ef-search", type=int, default=64)
    sp.set_defaults(func=cmd_gen_targets)

    sp = sub.add_parser("train", help="split 70:30, build targets and fit a policy")
    common(sp)
    sp.add_argument("--treatment", required=True)
    sp.add_argument("--holdout", default=None, help="control log; required for two-model and --s-grid")
    sp.add_argument("--mode", choices=MODES, default="incremental")
    sp.add_argument("--train-fraction", type=float, default=0.7)
    sp.add_argument("--m-prime", type=int, default=None)
    sp.add_argument("--sample-size", type=int, default=None)
    sp.add_argument("--matching", choices=("exact", "graph"), default=None)
    sp.add_argument("--prior-variance", type=float, default=None)
    sp.add_argument("--noise-variance", type=float, default=None)
    sp.add_argument("--s-grid", type=_int_list, default=None, help="feature counts to choose from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("score", help="posterior-mean recommendation for every event in a log")
    common(sp, seed=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--log", required=True)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("evaluate", help="replay-filtered deciles and uplift curve on test logs")
    common(sp, seed=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--treatment", required=True, help="treatment test split")
    sp.add_argument("--holdout", required=True, help="holdout test split")
    sp.add_argument("--rho-grid", type=_float_list, default=None)
    sp.add_argument("--baseline", default=None, help="second snapshot to compare against")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("compare", help="uplift dominance and gaps of two snapshots")
    common(sp, seed=False)
    sp.add_argument("--model-a", required=True)
    sp.add_argument("--model-b", required=True)
    sp.add_argument("--treatment", required=True)
    sp.add_argument("--holdout", required=True)
    sp.add_argument("--rho-grid", type=_float_list, default=None)
    sp.set_defaults(func=cmd_compare)
    return p


def _error(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _error("usage", str(exc))
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        summary = args.func(args)
    except DataValidationError as exc:
        for v in exc.violations:
            _error("validation", v.message, event_id=v.event_id, field=v.field)
        return 1
    except UsageError as exc:
        _error("usage", str(exc))
        return 1
    except FileNotFoundError as exc:
        _error("validation", str(exc))
        return 1
    except ValueError as exc:
        _error("validation", str(exc))
        return 1
    except Exception as exc:  # noqa: BLE001
        _error("runtime", f"{type(exc).__name__}: {exc}")
        return 2
    print(json.dumps(summary, sort_keys=True, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
