"""
CLI Commands Module
Argument parser and one handler per subcommand; handlers return a report
and never write it themselves
"""

import argparse
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import yaml

from hitcert.baselines.baselines import bonferroni, certification_only, heuristic_design, unweighted_design
from hitcert.budget.budget import allocate
from hitcert.cli.formats import (
    RunConfig,
    dumps_report,
    load_report,
    parse_calibration_csv,
    parse_candidate_batches,
    parse_candidates_csv,
    read_candidate_labels,
    read_groups,
    read_weights_file,
    write_pvalues_csv,
    write_weights_file,
)
from hitcert.core.core import CandidateBatch, LabeledPool, RngStream, stable_key
from hitcert.core.errors import InputError
from hitcert.diagnostics.diagnostics import balance_check, robustness_gap, sensitivity_sweep, validation_shift
from hitcert.nested.nested import design
from hitcert.pvalue.pvalue import deterministic_pvalue, randomized_pvalue
from hitcert.scores.scores import ScoreKind, ScoreStatistic
from hitcert.simharness.simharness import run_preset
from hitcert.weights.weights import (
    AnalyticGaussianShift,
    KdeRatio,
    UniformWeights,
    WeightFn,
    build_ratio,
    effective_sample_size,
    fit_kde,
    ood_filter,
    parse_weight_source,
)

logger = logging.getLogger(__name__)

COMMANDS = ("certify", "design", "baseline", "estimate-weights", "diagnose", "budget", "simulate", "replay")

# Substream keys below the master seed, one per concern
_WEIGHTS_KEY = stable_key("weights")
_OOD_KEY = stable_key("ood")
_INFERENCE_KEY = stable_key("inference")


@dataclass
class CommandResult:
    report: Dict
    not_confident: bool = False
    exit_code: int = 0


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser(config: Dict) -> argparse.ArgumentParser:
    """Argument parser whose defaults come from the loaded config"""
    defaults = config.get("defaults", {}) or {}
    weights_cfg = config.get("weights", {}) or {}
    diag_cfg = config.get("diagnostics", {}) or {}
    grid = ",".join(str(h) for h in weights_cfg.get("bandwidth_grid", [0.1, 1.0, 10.0]))

    parser = argparse.ArgumentParser(
        prog="hitcert",
        description="Certify that generated candidates contain a hit, and prune to the smallest certified prefix",
    )
    parser.add_argument("--config", help="Config file replacing config.yaml")
    parser.add_argument("--log-level", help="Override logging.level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, candidates_required=True):
        p.add_argument("--calibration", required=True, help="Calibration CSV (f0..,y[,mu][,group])")
        p.add_argument("--candidates", required=candidates_required, help="Candidates CSV (f0..,mu[,batch][,y])")
        p.add_argument("--score", default=defaults.get("score", "max"), choices=[k.value for k in ScoreKind])
        p.add_argument("--weights", default=defaults.get("weights", "uniform"),
                       help="uniform | kde | analytic:mu=<v1,...> | file:<path>")
        p.add_argument("--ood-quantile", type=float, default=defaults.get("ood_quantile"))
        p.add_argument("--bandwidths", type=_float_list, default=_float_list(grid))
        p.add_argument("--folds", type=int, default=weights_cfg.get("folds", 5))
        p.add_argument("--no-standardize", action="store_true", default=not weights_cfg.get("standardize", True))
        p.add_argument("--llr-epsilon", type=float, default=defaults.get("llr_epsilon", 1e-12))
        p.add_argument("--permutations", type=int, default=defaults.get("permutations", 2000))
        run_options(p)

    def run_options(p):
        p.add_argument("--seed", type=int, default=defaults.get("seed", 0))
        p.add_argument("--workers", type=int, default=defaults.get("workers", 1))
        p.add_argument("--output", help="Report path (default: stdout)")
        p.add_argument("--record-timings", action="store_true", help="Add wall-clock timings to the report")

    def pvalue_options(p):
        p.add_argument("--alpha", type=float, default=defaults.get("alpha", 0.1))
        p.add_argument("--method", choices=["randomized", "deterministic"], default="randomized")
        p.add_argument("--sampler", choices=["subset", "permutation"], default="subset")
        p.add_argument("--enumeration-cap", type=int, default=defaults.get("enumeration_cap", 2_000_000))
        p.add_argument("--strict", action="store_true", help="Exit with code 3 when not confident enough")

    p = sub.add_parser("certify", help="Test whether the first k candidates contain a hit")
    common(p)
    pvalue_options(p)
    p.add_argument("--k", type=int, help="Prefix size (default: whole batch)")

    p = sub.add_parser("design", help="Smallest certified prefix of the candidates")
    common(p)
    pvalue_options(p)

    p = sub.add_parser("baseline", help="Comparison procedures")
    common(p)
    p.add_argument("--method", required=True, choices=["bonferroni", "certonly", "unweighted", "heuristic"])
    p.add_argument("--alpha", type=float, default=defaults.get("alpha", 0.1))
    p.add_argument("--p-hat", type=float, help="Hit probability for the heuristic (default: mean mu)")

    p = sub.add_parser("estimate-weights", help="Fit KDE density-ratio weights and write them per row")
    common(p)
    p.add_argument("--weights-out", required=True, help="Weights CSV (f0..,w) usable as file:<path>")

    p = sub.add_parser("diagnose", help="Weight diagnostics")
    common(p, candidates_required=False)
    p.add_argument("--mode", required=True, choices=["balance", "shiftcheck", "sensitivity", "gap"])
    p.add_argument("--alphas", type=_float_list, default=[defaults.get("alpha", 0.1)])
    p.add_argument("--gamma", type=_float_list, default=list(diag_cfg.get("gamma_grid", [0.5, 1.0, 2.0, 3.0])))
    p.add_argument("--t", type=float, default=defaults.get("alpha", 0.1), help="Level for the robustness gap")
    p.add_argument("--true-weights", help="Reference weight source for the robustness gap")
    p.add_argument("--group-column", default="group")
    p.add_argument("--top-groups", type=int, default=diag_cfg.get("top_groups", 30))
    p.add_argument("--batch-size", type=int, default=diag_cfg.get("batch_size", 1))
    p.add_argument("--kl-bins", type=int, default=diag_cfg.get("kl_bins", 20))

    p = sub.add_parser("budget", help="Allocate a validation budget across inputs")
    common(p)
    p.add_argument("--total", type=int, required=True)
    p.add_argument("--alphas", type=_float_list, required=True)

    p = sub.add_parser("simulate", help="Run a synthetic experiment preset")
    p.add_argument("--preset", required=True)
    p.add_argument("--config", dest="experiment_config", help="YAML/JSON file with the preset(s)")
    p.add_argument("--trials", type=int)
    p.add_argument("--permutations", type=int)
    p.add_argument("--pvalues-csv", help="Also write raw p-values as CSV")
    run_options(p)
    p.set_defaults(seed=None)

    p = sub.add_parser("replay", help="Rerun a report from its embedded config and compare")
    p.add_argument("--report", required=True)

    return parser


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def run_config(args: argparse.Namespace) -> RunConfig:
    options = {k: v for k, v in sorted(vars(args).items()) if k not in ("handler", "config", "log_level")}
    return RunConfig(
        command=args.command,
        alpha=getattr(args, "alpha", None),
        permutations=getattr(args, "permutations", None),
        score=getattr(args, "score", None),
        weights=getattr(args, "weights", None),
        ood_quantile=getattr(args, "ood_quantile", None),
        seed=getattr(args, "seed", None) or 0,
        calibration=getattr(args, "calibration", None),
        candidates=getattr(args, "candidates", None),
        output=getattr(args, "output", None),
        options=options,
    )


def _statistic(args) -> ScoreStatistic:
    return ScoreStatistic.from_name(args.score, args.llr_epsilon)


def resolve_weights(source: str, args, pool: LabeledPool, generated: np.ndarray, rng: RngStream) -> WeightFn:
    """Build the WeightFn named by a --weights value"""
    parsed = parse_weight_source(source)
    kind = parsed["kind"]
    if kind == "uniform":
        return UniformWeights()
    if kind == "analytic":
        return AnalyticGaussianShift(parsed["mu"])
    if kind == "file":
        return read_weights_file(parsed["path"])
    return build_ratio(pool.features, generated, args.bandwidths, args.folds,
                       rng.substream(_WEIGHTS_KEY), not args.no_standardize)


def _apply_ood(args, pool: LabeledPool, batch: CandidateBatch, wfn: WeightFn,
               rng: RngStream) -> Tuple[CandidateBatch, Optional[List[int]]]:
    """Drop low-density candidates when --ood-quantile is set"""
    if args.ood_quantile is None:
        return batch, None
    if isinstance(wfn, KdeRatio):
        density = wfn.model.fit_p
    else:
        density = fit_kde(pool.features, args.bandwidths, args.folds, rng.substream(_OOD_KEY))
    kept = ood_filter(density, pool.features, batch.features, args.ood_quantile)
    if not kept:
        raise InputError(f"OOD filter (quantile {args.ood_quantile}) removed every candidate")
    return batch.subset(kept), kept


def _prepare(args) -> Tuple[LabeledPool, CandidateBatch, WeightFn, Optional[List[int]], RngStream]:
    pool = parse_calibration_csv(args.calibration)
    batch = parse_candidates_csv(args.candidates)
    rng = RngStream(args.seed)
    wfn = resolve_weights(args.weights, args, pool, batch.features, rng)
    batch, kept = _apply_ood(args, pool, batch, wfn, rng)
    return pool, batch, wfn, kept, rng


def _original(indices: List[int], kept: Optional[List[int]]) -> List[int]:
    return list(indices) if kept is None else [kept[i] for i in indices]


def _with_config(args, body: Dict, kept: Optional[List[int]] = None) -> Dict:
    report = {"config": run_config(args).to_dict()}
    report.update(body)
    if kept is not None:
        report["kept_indices"] = list(kept)
    return report


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------

def cmd_certify(args) -> CommandResult:
    pool, batch, wfn, kept, rng = _prepare(args)
    stat = _statistic(args)
    k = args.k if args.k is not None else batch.size
    if args.method == "deterministic":
        result = deterministic_pvalue(pool, batch, stat, wfn, args.alpha, k, args.enumeration_cap)
    else:
        # same stream design uses for prefix k
        stream = rng.substream(_INFERENCE_KEY).substream(k)
        result = randomized_pvalue(pool, batch, stat, wfn, args.permutations, stream, args.alpha, k, args.sampler)
    logger.info(f"certify k={k}: p={result.p_value:.6g}, certified={result.certified}")
    return CommandResult(_with_config(args, result.to_dict(), kept), not_confident=not result.certified)


def cmd_design(args) -> CommandResult:
    pool, batch, wfn, kept, rng = _prepare(args)
    profile, outcome = design(
        pool, batch, _statistic(args), wfn, args.alpha, args.permutations, rng.substream(_INFERENCE_KEY),
        sampler=args.sampler, method=args.method, workers=args.workers, enumeration_cap=args.enumeration_cap,
    )
    body = {
        "raw_p": profile.raw,
        "monotone_p": profile.monotone,
        "n_hat": outcome.n_hat,
        "shortlist": _original(outcome.shortlist, kept),
        "status": outcome.status.value,
    }
    return CommandResult(_with_config(args, body, kept), not_confident=not outcome.certified)


def cmd_baseline(args) -> CommandResult:
    pool, batch, wfn, kept, rng = _prepare(args)
    stream = rng.substream(_INFERENCE_KEY)
    if args.method == "unweighted":
        profile, outcome = unweighted_design(pool, batch, _statistic(args), args.alpha, args.permutations,
                                             stream, workers=args.workers)
        body = {
            "method": "unweighted",
            "raw_p": profile.raw,
            "monotone_p": profile.monotone,
            "n_hat": outcome.n_hat,
            "shortlist": _original(outcome.shortlist, kept),
            "status": outcome.status.value,
        }
        return CommandResult(_with_config(args, body, kept))

    if args.method == "bonferroni":
        outcome = bonferroni(pool, batch, wfn, args.alpha)
    elif args.method == "certonly":
        outcome = certification_only(pool, batch, _statistic(args), wfn, args.alpha, args.permutations, stream)
    else:
        outcome = heuristic_design(batch, args.alpha, args.p_hat)
    body = outcome.to_dict()
    body["selected_indices"] = _original(outcome.selected_indices, kept)
    return CommandResult(_with_config(args, body, kept))


def cmd_estimate_weights(args) -> CommandResult:
    pool = parse_calibration_csv(args.calibration)
    batch = parse_candidates_csv(args.candidates)
    rng = RngStream(args.seed)
    wfn = build_ratio(pool.features, batch.features, args.bandwidths, args.folds,
                      rng.substream(_WEIGHTS_KEY), not args.no_standardize)
    rows = np.vstack([pool.features, batch.features])
    weights = wfn.evaluate(rows)
    write_weights_file(args.weights_out, rows, weights)
    body = {
        "weights_file": args.weights_out,
        "rows": int(rows.shape[0]),
        "bandwidth_p": wfn.model.bandwidth_p,
        "bandwidth_q": wfn.model.bandwidth_q,
        "cv_scores_p": wfn.model.fit_p.describe()["cv_scores"],
        "cv_scores_q": wfn.model.fit_q.describe()["cv_scores"],
        "calibration_effective_sample_size": effective_sample_size(weights[:pool.n]),
    }
    return CommandResult(_with_config(args, body))


def cmd_diagnose(args) -> CommandResult:
    pool = parse_calibration_csv(args.calibration)
    rng = RngStream(args.seed)
    stat = _statistic(args)

    if args.mode == "shiftcheck":
        groups = read_groups(args.calibration, args.group_column)
        report = validation_shift(
            pool, groups, args.top_groups, stat, args.bandwidths, args.alphas, args.permutations,
            rng.substream(_INFERENCE_KEY), args.batch_size, args.folds, args.kl_bins, not args.no_standardize,
        )
        return CommandResult(_with_config(args, report.to_dict()))

    if not args.candidates:
        raise InputError(f"diagnose --mode {args.mode} needs --candidates")
    batches = parse_candidate_batches(args.candidates)
    generated = np.vstack([b.features for b in batches])
    wfn = resolve_weights(args.weights, args, pool, generated, rng)

    if args.mode == "balance":
        merged = CandidateBatch(generated, np.concatenate([b.predictor_scores for b in batches]))
        return CommandResult(_with_config(args, balance_check(pool, merged, wfn).to_dict()))

    if args.mode == "sensitivity":
        report = sensitivity_sweep(
            pool, batches, wfn, args.gamma, stat, args.alphas, args.permutations,
            rng.substream(_INFERENCE_KEY), hidden_labels=read_candidate_labels(args.candidates),
            workers=args.workers, kl_bins=args.kl_bins,
        )
        return CommandResult(_with_config(args, report.to_dict()))

    if not args.true_weights:
        raise InputError("diagnose --mode gap needs --true-weights")
    if len(batches) != 1:
        raise InputError("diagnose --mode gap takes a single batch")
    true_wfn = resolve_weights(args.true_weights, args, pool, generated, rng)
    gap = robustness_gap(pool, batches[0], stat, true_wfn, wfn, args.t, args.permutations,
                         rng.substream(_INFERENCE_KEY))
    return CommandResult(_with_config(args, gap.to_dict()))


def cmd_budget(args) -> CommandResult:
    pool = parse_calibration_csv(args.calibration)
    batches = parse_candidate_batches(args.candidates)
    rng = RngStream(args.seed)
    wfn = resolve_weights(args.weights, args, pool, np.vstack([b.features for b in batches]), rng)
    plan = allocate([(pool, b) for b in batches], _statistic(args), wfn, args.alphas, args.total,
                    args.permutations, rng.substream(_INFERENCE_KEY), args.workers)
    return CommandResult(_with_config(args, plan.to_dict()))


def _load_presets(args, config: Dict) -> Dict:
    if args.experiment_config:
        try:
            with open(args.experiment_config, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f) or {}
        except OSError as e:
            raise InputError(f"{args.experiment_config}: cannot read experiment config ({e})")
        except yaml.YAMLError as e:
            raise InputError(f"{args.experiment_config}: invalid YAML/JSON ({e})")
        if "experiment" in loaded:
            return {args.preset: loaded}
        return (loaded.get("simulation", loaded) or {}).get("presets", {}) or {}
    return ((config.get("simulation", {}) or {}).get("presets", {})) or {}


def cmd_simulate(args, config: Dict, preset: Optional[Dict] = None) -> CommandResult:
    """Run a preset; a given preset body skips the lookup in config and --config"""
    if preset is None:
        presets = _load_presets(args, config)
        if args.preset not in presets:
            raise InputError(f"unknown preset '{args.preset}' (available: {', '.join(sorted(presets)) or 'none'})")
        preset = presets[args.preset]
    overrides = {}
    for key in ("trials", "permutations", "seed"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)

    result = run_preset(preset, args.workers, overrides)
    if args.pvalues_csv:
        columns = {name: r["p_values"] for name, r in result["reports"].items() if r.get("p_values")}
        if columns:
            write_pvalues_csv(args.pvalues_csv, columns)
    body = {"preset": args.preset, "preset_config": preset}
    body.update(result)
    return CommandResult(_with_config(args, body))


def cmd_replay(args, config: Dict) -> CommandResult:
    """
    Rerun a stored report and compare it byte for byte

    Parser defaults from the config are already resolved into the embedded
    options. Simulation reports rerun their stored preset body, so neither the
    current config nor an edited preset file changes the replay.
    """
    original = load_report(args.report)
    embedded = (original.get("config") or {}).get("options")
    if not embedded or "command" not in embedded:
        raise InputError(f"{args.report}: report has no embedded run config")
    if embedded["command"] == "replay":
        raise InputError("cannot replay a replay report")

    replay_args = argparse.Namespace(**embedded)
    if embedded["command"] == "simulate":
        if not isinstance(original.get("preset_config"), dict):
            raise InputError(f"{args.report}: simulation report has no stored preset_config")
        rerun = cmd_simulate(replay_args, config, original["preset_config"]).report
    else:
        rerun = dispatch(replay_args, config).report
    original.pop("timings", None)
    identical = dumps_report(rerun) == dumps_report(original)
    if identical:
        logger.info(f"replay of {args.report} reproduced the report exactly")
    else:
        logger.error(f"replay of {args.report} differs from the stored report")
    return CommandResult(
        {"replayed": args.report, "command": embedded["command"], "identical": identical},
        exit_code=0 if identical else 1,
    )


HANDLERS: Dict[str, Callable] = {
    "certify": cmd_certify,
    "design": cmd_design,
    "baseline": cmd_baseline,
    "estimate-weights": cmd_estimate_weights,
    "diagnose": cmd_diagnose,
    "budget": cmd_budget,
}


def dispatch(args: argparse.Namespace, config: Dict) -> CommandResult:
    if args.command == "simulate":
        return cmd_simulate(args, config)
    if args.command == "replay":
        return cmd_replay(args, config)
    if args.command not in HANDLERS:
        raise InputError(f"unknown command '{args.command}'")
    return HANDLERS[args.command](args)
