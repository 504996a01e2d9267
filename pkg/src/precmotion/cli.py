"""Command-line front end: baseline, two-phase search, reports, single evaluations."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .arm import ArmModel, Environment, ProblemInstance, load_environment, load_json, load_model
from .pipeline import PipelineSettings, evaluate_success_rate, format_attempt_stats, generate_problems
from .fpcodec import parse_format
from .precision import SLOTS, PrecisionConfig
from .report import attempt_rows, format_grid, grid_rows, render_markdown, size_table, to_csv
from .search import (
    BaselineTargets,
    InfeasibleSlot,
    NoFeasibleTrial,
    NsgaSettings,
    PipelineEvaluator,
    ThresholdEvaluator,
    TrialLog,
    format_list,
    nsga2_search,
    per_slot_compression,
    per_tensor_binary_search,
    read_trials,
    reduce_space,
    reduction_summary,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3

STAGE_PROBLEMS = 11
PHASE_ONE = "per-tensor"
PHASE_TWO = "combinatorial"


class ConfigError(Exception):
    pass


class Infeasible(Exception):
    pass


# --------------------------------------------------------------------------- #
# Experiment configuration


@dataclass
class ExperimentConfig:
    model: ArmModel
    environments: list[Environment]
    problem_count: int
    goal_clearance: float | None
    problem_files: dict[str, Path]
    pipeline: PipelineSettings
    search: NsgaSettings
    seed: int
    jobs: int
    output: Path
    mock_thresholds: tuple[int, ...] | None = None
    source: dict = field(default_factory=dict)

    @property
    def env_names(self) -> list[str]:
        if self.mock_thresholds is not None:
            return ["mock"]
        return [e.name for e in self.environments]


def default_config_path() -> Path:
    return Path(str(resources.files("precmotion") / "data" / "experiment.json"))


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    try:
        return load_json(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _parse_thresholds(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--mock-thresholds: expected {len(SLOTS)} comma-separated integers") from exc
    if len(values) != len(SLOTS):
        raise ConfigError(f"--mock-thresholds: expected {len(SLOTS)} values, got {len(values)}")
    return values


def load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    path = Path(args.config) if args.config else default_config_path()
    data = _read_json(path)
    base = path.parent

    def resolve(p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    try:
        model_path = resolve(data["model"])
        _read_json(model_path)
        model = load_model(model_path)
        envs = []
        for p in data["environments"]:
            _read_json(resolve(p))
            envs.append(load_environment(resolve(p)))
        problems = data.get("problems", {})
        count = int(args.problems if args.problems is not None else problems.get("count", 50))
        files = {name: resolve(p) for name, p in problems.get("files", {}).items()}
        for f in files.values():
            if not f.is_file():
                raise ConfigError(f"file not found: {f}")
        search_data = dict(data.get("search", {}))
        if args.budget is not None:
            search_data["budget"] = args.budget
        if args.population is not None:
            search_data["population"] = args.population
        pipeline = PipelineSettings.from_dict(data.get("pipeline", {}))
        search = NsgaSettings(**search_data)
    except KeyError as exc:
        raise ConfigError(f"{path}: missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if count < 1:
        raise ConfigError("problem count must be >= 1")
    if len({e.name for e in envs}) != len(envs):
        raise ConfigError("environment names must be unique")

    seed = int(args.seed if args.seed is not None else data.get("seed", 0))
    jobs = int(args.jobs if args.jobs is not None else data.get("jobs", 1))
    output = Path(args.out if args.out is not None else data.get("output", "runs/default"))
    mock = _parse_thresholds(args.mock_thresholds) if args.mock_thresholds else None
    return ExperimentConfig(
        model=model,
        environments=envs,
        problem_count=count,
        goal_clearance=problems.get("goal_clearance"),
        problem_files=files,
        pipeline=pipeline,
        search=search,
        seed=seed,
        jobs=max(1, jobs),
        output=output,
        mock_thresholds=mock,
        source=data,
    )


# --------------------------------------------------------------------------- #
# Artifacts


def write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n")


def write_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def problem_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=(STAGE_PROBLEMS, index)).generate_state(1)[0])


def read_problem_file(path: Path) -> list[ProblemInstance]:
    data = _read_json(path)
    items = data["problems"] if isinstance(data, dict) else data
    return [ProblemInstance.from_dict(p) for p in items]


def load_problems(cfg: ExperimentConfig) -> dict[str, list[ProblemInstance]]:
    """Frozen problem sets per environment, written next to the other artifacts."""
    out = {}
    for i, env in enumerate(cfg.environments):
        target = cfg.output / f"problems_{env.name}.json"
        if env.name in cfg.problem_files:
            problems = read_problem_file(cfg.problem_files[env.name])[: cfg.problem_count]
            record = {"environment": env.name, "source": str(cfg.problem_files[env.name])}
        else:
            gen_seed = problem_seed(cfg.seed, i)
            try:
                problems = generate_problems(
                    env,
                    cfg.model,
                    cfg.problem_count,
                    gen_seed,
                    horizon=cfg.pipeline.horizon,
                    substeps=cfg.pipeline.validation_substeps,
                    goal_clearance=cfg.goal_clearance,
                )
            except RuntimeError as exc:
                raise ConfigError(str(exc)) from exc
            record = {"environment": env.name, "generator_seed": gen_seed, "goal_clearance": cfg.goal_clearance}
        record["problems"] = [p.to_dict() for p in problems]
        write_json(target, record)
        out[env.name] = problems
    return out


def make_evaluator(cfg: ExperimentConfig, problems=None):
    if cfg.mock_thresholds is not None:
        return ThresholdEvaluator(cfg.mock_thresholds)
    problems = problems if problems is not None else load_problems(cfg)
    return PipelineEvaluator(cfg.model, cfg.environments, problems, cfg.pipeline, jobs=cfg.jobs)


def _report_rows(reports) -> list[dict]:
    rows = []
    for r in reports:
        row = r.to_dict()
        row.pop("wall_time", None)
        rows.append(row)
    return rows


def _full_evaluation(cfg: ExperimentConfig, problems, config: PrecisionConfig, label: str) -> dict:
    """Every problem of every environment, with attempt and sparsity statistics."""
    successes, totals, stats, sparsity_by_env = {}, {}, {}, {}
    rows = []
    for env in cfg.environments:
        result = evaluate_success_rate(
            problems[env.name], env, cfg.model, cfg.pipeline, config, jobs=cfg.jobs, collect_sparsity=True
        )
        successes[env.name] = result.successes
        totals[env.name] = len(result.reports)
        stats[env.name] = list(result.attempt_stats)
        sparsity_by_env[env.name] = result.sparsity
        rows += [{"environment": env.name, **r} for r in _report_rows(result.reports)]
    write_jsonl(cfg.output / f"{label}_reports.jsonl", rows)
    sparsity = {s: float(np.mean([v[s] for v in sparsity_by_env.values()])) for s in SLOTS}
    return {
        "config": config.to_dict(),
        "successes": successes,
        "problems": totals,
        "rates": {e: successes[e] / totals[e] for e in successes},
        "attempt_stats": stats,
        "sparsity": sparsity,
        "sparsity_by_environment": sparsity_by_env,
    }


def run_baseline(cfg: ExperimentConfig) -> BaselineTargets:
    if cfg.mock_thresholds is not None:
        targets = ThresholdEvaluator(cfg.mock_thresholds).targets()
        data = {**targets.to_dict(), "mock_thresholds": list(cfg.mock_thresholds)}
    else:
        problems = load_problems(cfg)
        evaluation = _full_evaluation(cfg, problems, PrecisionConfig(), "baseline")
        targets = BaselineTargets(evaluation["successes"], evaluation["problems"])
        data = {
            **targets.to_dict(),
            "attempt_stats": evaluation["attempt_stats"],
            "sparsity": evaluation["sparsity"],
            "sparsity_by_environment": evaluation["sparsity_by_environment"],
        }
    data["seed"] = cfg.seed
    data["fingerprint"] = run_fingerprint(cfg)
    data["model"] = cfg.model.to_dict()
    data["pipeline"] = cfg.pipeline.to_dict()
    write_json(cfg.output / "baseline.json", data)
    return targets


def ensure_baseline(cfg: ExperimentConfig) -> BaselineTargets:
    path = cfg.output / "baseline.json"
    if path.is_file():
        data = _read_json(path)
        if data.get("fingerprint") == run_fingerprint(cfg):
            return BaselineTargets.from_dict(data)
    print("baseline: measuring FP32 success rates", file=sys.stderr)
    return run_baseline(cfg)


def run_fingerprint(cfg: ExperimentConfig) -> str:
    """Digest of everything the baseline depends on, used to reuse artifacts safely."""
    key = {
        "seed": cfg.seed,
        "model": cfg.model.to_dict(),
        "environments": [e.to_dict() for e in cfg.environments],
        "problems": cfg.problem_count,
        "goal_clearance": cfg.goal_clearance,
        "files": {k: str(v) for k, v in sorted(cfg.problem_files.items())},
        "pipeline": cfg.pipeline.to_dict(),
        "mock": list(cfg.mock_thresholds) if cfg.mock_thresholds else None,
    }
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def _read_meta(path: Path) -> dict[int, float]:
    meta = path.with_name(path.stem + "_meta.jsonl")
    if not meta.is_file():
        return {}
    out = {}
    for line in meta.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out[int(rec["trial"])] = float(rec["timestamp"])
    return out


def run_phase_one(cfg: ExperimentConfig, targets: BaselineTargets, evaluator) -> tuple[TrialLog, dict]:
    log = TrialLog(evaluator, targets, cfg.seed, PHASE_ONE, path=cfg.output / "trials.jsonl")
    slots, probes, failed = {}, [], []
    for slot in SLOTS:
        try:
            result = per_tensor_binary_search(slot, log)
        except InfeasibleSlot as exc:
            failed.append(slot)
            slots[slot] = {"slot": slot, "min_bits": None, "witness": None, "monotonic": False, "probes": exc.probes}
            probes += [{"slot": slot, **p} for p in exc.probes]
            continue
        slots[slot] = result.to_dict()
        probes += [{"slot": slot, **p} for p in result.probes]
    minima = {"feasible": not failed, "infeasible_slots": failed, "fingerprint": run_fingerprint(cfg), "slots": slots}
    if not failed:
        bits = [slots[s]["min_bits"] for s in SLOTS]
        minima["min_bits"] = bits
        minima["space"] = reduce_space(bits).to_dict()
    write_json(cfg.output / "minima.json", minima)
    write_jsonl(cfg.output / "probes.jsonl", probes)
    if failed:
        raise Infeasible(f"no feasible bitwidth for slot(s): {', '.join(failed)} (see minima.json)")
    return log, minima


def run_phase_two(cfg: ExperimentConfig, targets: BaselineTargets, evaluator, minima: dict, prior=()) -> dict:
    log_path = cfg.output / "trials.jsonl"
    log = TrialLog(evaluator, targets, cfg.seed, PHASE_TWO, path=log_path)
    log.restore(prior)
    bits = [minima["slots"][s]["min_bits"] for s in SLOTS]
    space = reduce_space(bits)
    witnesses = [PrecisionConfig().replace(s, parse_format(minima["slots"][s]["witness"])) for s in SLOTS]
    write_json(
        cfg.output / "search_config.json",
        {
            "seed": cfg.seed,
            "min_bits": dict(zip(SLOTS, bits)),
            "space": space.to_dict(),
            "nsga": cfg.search.to_dict(),
            "baseline_targets": targets.to_dict(),
            "pipeline": cfg.pipeline.to_dict(),
            "mock_thresholds": list(cfg.mock_thresholds) if cfg.mock_thresholds else None,
        },
    )
    try:
        best, mine = nsga2_search(space, log, cfg.search, seed=cfg.seed, seed_configs=witnesses)
    except NoFeasibleTrial as exc:
        flagged = exc.least_violating
        write_json(
            cfg.output / "best.json",
            {
                "feasible": False,
                "least_violating": flagged.to_log() if flagged else None,
                "evaluations": len(exc.trials),
            },
        )
        raise Infeasible("no feasible configuration within the budget (least violating trial in best.json)") from exc

    out = {
        "feasible": True,
        "trial": best.trial_id,
        "config": best.config.to_dict(),
        "total_bits": best.total_bits,
        "rates": best.rates,
        "compression": per_slot_compression(best.config),
        "reduction": reduction_summary(best.config),
        "space": space.to_dict(),
        "evaluations": len(mine),
        "unique_evaluations": log.evaluations,
    }
    if cfg.mock_thresholds is None:
        full = _full_evaluation(cfg, evaluator.problems, best.config, "best")
        out["attempt_stats"] = full["attempt_stats"]
        out["sparsity"] = full["sparsity"]
    write_json(cfg.output / "best.json", out)
    return out


# --------------------------------------------------------------------------- #
# Commands


def cmd_baseline(cfg: ExperimentConfig) -> int:
    targets = run_baseline(cfg)
    for env, rate in targets.rates.items():
        print(f"{env}: {targets.successes[env]}/{targets.problems[env]} = {rate:.3f}")
    return EXIT_OK


def cmd_search_per_tensor(cfg: ExperimentConfig) -> int:
    targets = ensure_baseline(cfg)
    evaluator = make_evaluator(cfg)
    try:
        _, minima = run_phase_one(cfg, targets, evaluator)
    finally:
        if hasattr(evaluator, "close"):
            evaluator.close()
    for slot in SLOTS:
        s = minima["slots"][slot]
        flag = "" if s["monotonic"] else "  (monotonicity check failed)"
        print(f"{slot}: {s['min_bits']} bits via {s['witness']}{flag}")
    space = minima["space"]
    print(f"reduced space: {space['size']:,} configs, reduction {space['reduction_factor']:.2f}x")
    return EXIT_OK


def cmd_search_combinatorial(cfg: ExperimentConfig) -> int:
    targets = ensure_baseline(cfg)
    problems = None if cfg.mock_thresholds is not None else load_problems(cfg)
    evaluator = make_evaluator(cfg, problems)
    try:
        minima_path = cfg.output / "minima.json"
        log_path = cfg.output / "trials.jsonl"
        minima = _read_json(minima_path) if minima_path.is_file() else None
        if minima is not None and (minima.get("fingerprint") != run_fingerprint(cfg) or not minima.get("feasible")):
            minima = None
        if minima is None:
            print("search: running the per-tensor phase first", file=sys.stderr)
            log, minima = run_phase_one(cfg, targets, evaluator)
            prior = list(log.trials)
        else:
            stamps = _read_meta(log_path)
            prior = [t for t in read_trials(log_path) if t.phase == PHASE_ONE] if log_path.is_file() else []
            for t in prior:
                t.timestamp = stamps.get(t.trial_id, 0.0)
        best = run_phase_two(cfg, targets, evaluator, minima, prior)
    finally:
        if hasattr(evaluator, "close"):
            evaluator.close()
    write_report(cfg.output)
    space = best["space"]
    print(f"reduced space: {space['size']:,} configs, reduction {space['reduction_factor']:.2f}x")
    print(f"best: {PrecisionConfig.from_dict(best['config'])} total_bits={best['total_bits']}")
    red = best["reduction"]
    print(f"reduction: aggregate {red['aggregate']:.2f}x, mean per-slot {red['mean_per_slot']:.2f}x")
    print("compression per slot: " + ", ".join(f"{s}={v:.2f}x" for s, v in best["compression"].items()))
    return EXIT_OK


def write_report(out: Path, trials_path: Path | None = None, baseline_path: Path | None = None) -> str:
    trials_path = trials_path or out / "trials.jsonl"
    baseline_path = baseline_path or out / "baseline.json"
    if not trials_path.is_file():
        raise ConfigError(f"file not found: {trials_path}")
    try:
        trials = read_trials(trials_path)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not trials:
        raise ConfigError(f"{trials_path}: trial log is empty")
    baseline = _read_json(baseline_path)
    try:
        targets = BaselineTargets.from_dict(baseline)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{baseline_path}: malformed baseline ({exc})") from exc
    missing = {env for t in trials for env in t.rates} - set(targets.successes)
    if missing:
        raise ConfigError(f"{trials_path}: environments without a baseline: {', '.join(sorted(missing))}")
    minima_path = out / "minima.json"
    minima = _read_json(minima_path) if minima_path.is_file() else None
    if minima is not None and not minima.get("feasible", True):
        minima = None
    best_path = out / "best.json"
    best = _read_json(best_path) if best_path.is_file() else None

    model = ArmModel.from_dict(baseline["model"]) if "model" in baseline else ArmModel()
    settings = PipelineSettings.from_dict(baseline["pipeline"]) if "pipeline" in baseline else PipelineSettings()
    best_config = PrecisionConfig.from_dict(best["config"]) if best and best.get("feasible") else None
    sizes = size_table(model, settings, best_config)

    markdown = render_markdown(trials, targets, minima, baseline, best, sizes)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(markdown + "\n")
    (out / "grid.csv").write_text(to_csv(grid_rows(format_grid(trials, targets, minima))))
    (out / "sizes.csv").write_text(to_csv(sizes))
    (out / "attempts.csv").write_text(to_csv(attempt_rows(baseline, best)))
    if baseline.get("sparsity"):
        rows = [{"slot": s, "zero_fraction": v} for s, v in baseline["sparsity"].items()]
        (out / "sparsity.csv").write_text(to_csv(rows))
    return markdown


def cmd_report(cfg_out: Path, trials: Path | None, baseline: Path | None) -> int:
    print(write_report(cfg_out, trials, baseline))
    return EXIT_OK


def cmd_eval_config(cfg: ExperimentConfig, formats: str) -> int:
    try:
        config = format_list(formats)
    except ValueError as exc:
        raise ConfigError(f"--formats: {exc}") from exc
    if cfg.mock_thresholds is not None:
        result = ThresholdEvaluator(cfg.mock_thresholds)(config)
        data = {"config": config.to_dict(), "rates": result.rates()}
    else:
        data = _full_evaluation(cfg, load_problems(cfg), config, "eval")
    data["total_bits"] = config.total_bits
    write_json(cfg.output / "eval.json", data)
    print(f"config: {config} total_bits={config.total_bits}")
    for env, rate in data["rates"].items():
        line = f"{env}: rate {rate:.3f}"
        if "attempt_stats" in data:
            line += f" attempts {format_attempt_stats(data['attempt_stats'][env])}"
        print(line)
    return EXIT_OK


# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON (default: the bundled experiment)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("--problems", type=int, help="problems per environment")
    common.add_argument("--budget", type=int, help="NSGA-II evaluation budget")
    common.add_argument("--population", type=int, help="NSGA-II population size")
    common.add_argument(
        "--mock-thresholds",
        metavar="B1,B2,B3,B4,B5",
        help="replace the pipeline with a mock evaluator: feasible iff every slot has at least these bits",
    )

    parser = argparse.ArgumentParser(prog="precmotion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("baseline", parents=[common], help="measure FP32 success rates")
    sub.add_parser("search-per-tensor", parents=[common], help="per-slot binary search")
    sub.add_parser("search-combinatorial", parents=[common], help="NSGA-II over the reduced space")
    rep = sub.add_parser("report", parents=[common], help="tables from existing artifacts")
    rep.add_argument("--trials", help="trial log (default: <out>/trials.jsonl)")
    rep.add_argument("--baseline", help="baseline file (default: <out>/baseline.json)")
    ev = sub.add_parser("eval-config", parents=[common], help="evaluate one precision config")
    ev.add_argument("--formats", required=True, help="five formats, e.g. E5M10,E2M1,E2M1,E2M1,E2M1")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            if args.out:
                out = Path(args.out)
            else:
                data = _read_json(Path(args.config or default_config_path()))
                out = Path(data.get("output", "runs/default"))
            return cmd_report(
                out,
                Path(args.trials) if args.trials else None,
                Path(args.baseline) if args.baseline else None,
            )
        cfg = load_experiment(args)
        if args.command == "baseline":
            return cmd_baseline(cfg)
        if args.command == "search-per-tensor":
            return cmd_search_per_tensor(cfg)
        if args.command == "search-combinatorial":
            return cmd_search_combinatorial(cfg)
        return cmd_eval_config(cfg, args.formats)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
