"""Two-phase precision search: per-slot binary search over bitwidths, then a
constrained NSGA-II over the reduced combinatorial space."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .arm import ArmModel, Environment, ProblemInstance
from .fpcodec import FP32, FpFormat, enumerate_formats, formats_at_or_above, parse_format, splits_at
from .pipeline import PipelineSettings, generate_motion
from .precision import SLOTS, PrecisionConfig

MIN_PROBE_BITS = 4
MAX_PROBE_BITS = 32
STAGE_SEARCH = 7


class InfeasibleSlot(RuntimeError):
    """Even the widest probe failed for a slot; the baseline is not reproducible."""

    def __init__(self, slot: str, probes):
        super().__init__(f"no bitwidth in [{MIN_PROBE_BITS}, {MAX_PROBE_BITS}] keeps {slot!r} feasible")
        self.slot = slot
        self.probes = probes


class NoFeasibleTrial(RuntimeError):
    """The combinatorial search ended without a feasible trial."""

    def __init__(self, least_violating: Trial | None, trials: list[Trial]):
        super().__init__("no feasible configuration found within the evaluation budget")
        self.least_violating = least_violating
        self.trials = trials


# --------------------------------------------------------------------------- #
# Targets, trials, evaluators


@dataclass(frozen=True)
class BaselineTargets:
    """Per-environment success counts of the all-FP32 configuration."""

    successes: dict[str, int]
    problems: dict[str, int]

    @property
    def rates(self) -> dict[str, float]:
        return {env: self.successes[env] / self.problems[env] for env in self.successes}

    def allowed_failures(self, env: str) -> int:
        return self.problems[env] - self.successes[env]

    def to_dict(self) -> dict:
        return {"successes": dict(self.successes), "problems": dict(self.problems), "rates": self.rates}

    @classmethod
    def from_dict(cls, data: dict) -> BaselineTargets:
        return cls({k: int(v) for k, v in data["successes"].items()}, {k: int(v) for k, v in data["problems"].items()})


@dataclass
class EvalResult:
    successes: dict[str, int | None]
    problems: dict[str, int]
    evaluated: dict[str, int]
    attempts: dict[str, list[int]] = field(default_factory=dict)

    @property
    def truncated(self) -> bool:
        return any(self.evaluated[env] < self.problems[env] for env in self.problems)

    def rates(self) -> dict[str, float | None]:
        """Exact rates for fully evaluated environments; for a stopped
        environment the optimistic bound (successes + unevaluated) / N;
        None for environments never reached."""
        out = {}
        for env, n in self.problems.items():
            done = self.evaluated[env]
            if done == 0 and n > 0:
                out[env] = None
            else:
                out[env] = (self.successes[env] + n - done) / n
        return out


@dataclass
class Trial:
    trial_id: int
    phase: str
    config: PrecisionConfig
    rates: dict[str, float | None]
    feasible: bool
    violation: float
    truncated: bool
    seed: int
    timestamp: float = 0.0

    @property
    def total_bits(self) -> int:
        return self.config.total_bits

    def to_log(self) -> dict:
        return {
            "trial": self.trial_id,
            "phase": self.phase,
            "config": self.config.to_dict(),
            "rates": self.rates,
            "total_bits": self.total_bits,
            "feasible": self.feasible,
            "violation": self.violation,
            "truncated": self.truncated,
            "seed": self.seed,
        }

    @classmethod
    def from_log(cls, data: dict) -> Trial:
        return cls(
            trial_id=int(data["trial"]),
            phase=data.get("phase", "combinatorial"),
            config=PrecisionConfig.from_dict(data["config"]),
            rates=dict(data["rates"]),
            feasible=bool(data["feasible"]),
            violation=float(data.get("violation", 0.0)),
            truncated=bool(data.get("truncated", False)),
            seed=int(data.get("seed", 0)),
        )


def judge(result: EvalResult, targets: BaselineTargets) -> tuple[bool, float]:
    """Feasibility (every environment at or above its baseline count) and the
    summed rate deficit."""
    rates = result.rates()
    violation = 0.0
    feasible = not result.truncated
    for env, target in targets.rates.items():
        rate = rates.get(env)
        if rate is None:
            feasible = False
            continue
        if result.successes[env] < targets.successes[env]:
            feasible = False
        violation += max(0.0, target - rate)
    return feasible, violation


class ThresholdEvaluator:
    """Mock evaluator: a config is feasible iff every slot has at least its
    hidden threshold bits. The rate drops by 1/160 per missing bit."""

    def __init__(self, thresholds: Sequence[int], envs: Sequence[str] = ("mock",), problems: int = 160):
        if len(thresholds) != len(SLOTS):
            raise ValueError(f"need {len(SLOTS)} thresholds")
        self.thresholds = tuple(int(t) for t in thresholds)
        self.envs = tuple(envs)
        self.problems = problems
        self.calls = 0

    def targets(self) -> BaselineTargets:
        return BaselineTargets(dict.fromkeys(self.envs, self.problems), dict.fromkeys(self.envs, self.problems))

    def __call__(self, config: PrecisionConfig, targets: BaselineTargets | None = None) -> EvalResult:
        self.calls += 1
        deficit = sum(max(0, t - b) for t, b in zip(self.thresholds, config.bits()))
        ok = max(0, self.problems - deficit)
        n = self.problems
        return EvalResult(dict.fromkeys(self.envs, ok), dict.fromkeys(self.envs, n), dict.fromkeys(self.envs, n))

    def evaluate_many(self, configs, targets=None) -> list[EvalResult]:
        return [self(c, targets) for c in configs]


def _evaluate_config(
    config: PrecisionConfig,
    model: ArmModel,
    envs: Sequence[Environment],
    problems: dict[str, list[ProblemInstance]],
    settings: PipelineSettings,
    targets: BaselineTargets | None,
) -> EvalResult:
    successes, totals, evaluated, attempts = {}, {}, {}, {}
    stopped = False
    for env in envs:
        probs = problems[env.name]
        totals[env.name] = len(probs)
        successes[env.name] = 0
        evaluated[env.name] = 0
        attempts[env.name] = []
        if stopped:
            continue
        allowed = targets.allowed_failures(env.name) if targets is not None else None
        failures = 0
        for problem in probs:
            report = generate_motion(problem, env, model, settings, config)
            evaluated[env.name] += 1
            attempts[env.name].append(report.attempts_used)
            if report.success:
                successes[env.name] += 1
            else:
                failures += 1
                if allowed is not None and failures > allowed:
                    stopped = True
                    break
    return EvalResult(successes, totals, evaluated, attempts)


_WORKER: dict = {}


def _worker_init(model, envs, problems, settings):
    _WORKER.update(model=model, envs=envs, problems=problems, settings=settings)


def _worker_eval(args):
    config, targets = args
    w = _WORKER
    return _evaluate_config(config, w["model"], w["envs"], w["problems"], w["settings"], targets)


class PipelineEvaluator:
    """Runs the motion pipeline on a frozen problem set per environment.

    With targets given, an evaluation stops as soon as one environment has
    more failures than its baseline, since the config is then infeasible
    whatever the remaining problems do. ``jobs`` > 1 evaluates whole configs
    in parallel worker processes; results do not depend on ``jobs``.
    """

    def __init__(
        self,
        model: ArmModel,
        envs: Sequence[Environment],
        problems: dict[str, list[ProblemInstance]],
        settings: PipelineSettings,
        jobs: int = 1,
        early_stop: bool = True,
    ):
        self.model = model
        self.envs = list(envs)
        self.problems = problems
        self.settings = settings
        self.jobs = max(1, int(jobs))
        self.early_stop = early_stop
        self.calls = 0
        self._pool: ProcessPoolExecutor | None = None

    def __call__(self, config: PrecisionConfig, targets: BaselineTargets | None = None) -> EvalResult:
        return self.evaluate_many([config], targets)[0]

    def evaluate_many(self, configs, targets: BaselineTargets | None = None) -> list[EvalResult]:
        configs = list(configs)
        self.calls += len(configs)
        stop_at = targets if self.early_stop else None
        if self.jobs == 1 or len(configs) == 1:
            return [
                _evaluate_config(c, self.model, self.envs, self.problems, self.settings, stop_at) for c in configs
            ]
        if self._pool is None:
            self._pool = ProcessPoolExecutor(
                max_workers=self.jobs,
                initializer=_worker_init,
                initargs=(self.model, self.envs, self.problems, self.settings),
            )
        return list(self._pool.map(_worker_eval, [(c, stop_at) for c in configs]))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


# --------------------------------------------------------------------------- #
# Trial bookkeeping


class TrialLog:
    """Memoized evaluation with an append-only, order-stable trial record.

    Cache hits return the earlier trial and cost no budget. Timestamps are
    kept out of the main log so that replays are byte-identical.
    """

    def __init__(self, evaluator, targets: BaselineTargets, seed: int, phase: str, path: Path | None = None):
        self.evaluator = evaluator
        self.targets = targets
        self.seed = seed
        self.phase = phase
        self.trials: list[Trial] = []
        self.cache: dict[tuple[str, ...], Trial] = {}
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")
            self._meta_path().write_text("")

    def _meta_path(self) -> Path:
        return self.path.with_name(self.path.stem + "_meta.jsonl")

    @property
    def evaluations(self) -> int:
        return len(self.trials)

    def seen(self, config: PrecisionConfig) -> bool:
        return config.key() in self.cache

    def evaluate(self, configs: Iterable[PrecisionConfig]) -> list[Trial]:
        configs = list(configs)
        fresh = []
        for c in configs:
            if c.key() not in self.cache and all(c.key() != f.key() for f in fresh):
                fresh.append(c)
        results = self.evaluator.evaluate_many(fresh, self.targets) if fresh else []
        for config, result in zip(fresh, results):
            feasible, violation = judge(result, self.targets)
            trial = Trial(
                trial_id=len(self.trials),
                phase=self.phase,
                config=config,
                rates=result.rates(),
                feasible=feasible,
                violation=violation,
                truncated=result.truncated,
                seed=self.seed,
                timestamp=time.time(),
            )
            self.trials.append(trial)
            self.cache[config.key()] = trial
            self._append(trial)
        return [self.cache[c.key()] for c in configs]

    def restore(self, trials: Iterable[Trial]) -> None:
        """Re-record trials from an earlier run (in order) without evaluating."""
        for trial in trials:
            if trial.trial_id != len(self.trials):
                raise ValueError("restored trials must be numbered consecutively from 0")
            self.trials.append(trial)
            self.cache[trial.config.key()] = trial
            self._append(trial)

    def _append(self, trial: Trial):
        if self.path is None:
            return
        with open(self.path, "a") as fh:
            fh.write(json.dumps(trial.to_log()) + "\n")
        with open(self._meta_path(), "a") as fh:
            fh.write(json.dumps({"trial": trial.trial_id, "timestamp": trial.timestamp}) + "\n")


def read_trials(path: str | Path) -> list[Trial]:
    trials = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                trials.append(Trial.from_log(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: malformed trial record ({exc})") from exc
    return trials


# --------------------------------------------------------------------------- #
# Phase 1: per-slot binary search


def probe_order(bitwidth: int) -> list[FpFormat]:
    """Splits at a bitwidth, most balanced first (exponent closest to 5)."""
    return sorted(splits_at(bitwidth), key=lambda f: (abs(f.exponent_bits - 5), f.exponent_bits))


@dataclass
class SlotResult:
    slot: str
    min_bits: int
    witness: FpFormat
    probes: list[dict]
    monotonic: bool

    def to_dict(self) -> dict:
        return {
            "slot": self.slot,
            "min_bits": self.min_bits,
            "witness": self.witness.name,
            "monotonic": self.monotonic,
            "probes": self.probes,
        }


def per_tensor_binary_search(
    slot: str,
    log: TrialLog,
    lo: int = MIN_PROBE_BITS,
    hi: int = MAX_PROBE_BITS,
) -> SlotResult:
    """Smallest bitwidth at which some split keeps ``slot`` feasible with all
    other slots at FP32.

    pass(b) tries the splits at b in ``probe_order`` and stops at the first
    feasible one. Assumes pass is monotone in b; afterwards checks that
    min_bits passes and min_bits - 1 fails and reports the outcome.
    """
    if slot not in SLOTS:
        raise ValueError(f"unknown slot {slot!r}")
    memo: dict[int, FpFormat | None] = {}
    probes: list[dict] = []

    def passes(bits: int) -> FpFormat | None:
        if bits in memo:
            return memo[bits]
        found = None
        for fmt in probe_order(bits):
            trial = log.evaluate([PrecisionConfig().replace(slot, fmt)])[0]
            probes.append({"bits": bits, "format": fmt.name, "feasible": trial.feasible, "trial": trial.trial_id})
            if trial.feasible:
                found = fmt
                break
        memo[bits] = found
        return found

    low, high = lo, hi + 1  # high: smallest bitwidth known to pass (hi + 1 = none yet)
    while low < high:
        mid = (low + high) // 2
        if passes(mid) is not None:
            high = mid
        else:
            low = mid + 1
    if high > hi:
        raise InfeasibleSlot(slot, probes)
    witness = passes(high)
    monotonic = witness is not None and (high == lo or passes(high - 1) is None)
    return SlotResult(slot, high, witness, probes, monotonic)


# --------------------------------------------------------------------------- #
# Space reduction


@dataclass(frozen=True)
class SearchSpace:
    candidates: tuple[tuple[FpFormat, ...], ...]

    def __post_init__(self):
        if len(self.candidates) != len(SLOTS) or any(len(c) == 0 for c in self.candidates):
            raise ValueError("need a nonempty candidate list for every slot")

    @classmethod
    def full(cls) -> SearchSpace:
        space = tuple(enumerate_formats())
        return cls((space,) * len(SLOTS))

    @property
    def size(self) -> int:
        return math.prod(len(c) for c in self.candidates)

    @property
    def reduction_factor(self) -> float:
        return len(enumerate_formats()) ** len(SLOTS) / self.size

    def config(self, genome: Sequence[int]) -> PrecisionConfig:
        return PrecisionConfig(*(cands[i] for cands, i in zip(self.candidates, genome)))

    def genome(self, config: PrecisionConfig) -> tuple[int, ...]:
        return tuple(cands.index(f) for cands, f in zip(self.candidates, config.formats()))

    def contains(self, config: PrecisionConfig) -> bool:
        return all(f in cands for cands, f in zip(self.candidates, config.formats()))

    def to_dict(self) -> dict:
        return {
            "candidates": {slot: [f.name for f in c] for slot, c in zip(SLOTS, self.candidates)},
            "size": self.size,
            "reduction_factor": self.reduction_factor,
        }


def reduce_space(minima: Sequence[int] | dict[str, int]) -> SearchSpace:
    if isinstance(minima, dict):
        minima = [minima[s] for s in SLOTS]
    space = enumerate_formats()
    return SearchSpace(tuple(tuple(formats_at_or_above(space, int(b))) for b in minima))


def total_bits(config: PrecisionConfig) -> int:
    return config.total_bits


# --------------------------------------------------------------------------- #
# NSGA-II pieces


def dominates(a, b) -> bool:
    """Constraint domination on (objectives, violation) pairs."""
    (fa, va), (fb, vb) = a, b
    if va == 0 and vb > 0:
        return True
    if va > 0 or vb > 0:
        return va < vb
    return all(x <= y for x, y in zip(fa, fb)) and any(x < y for x, y in zip(fa, fb))


def nondominated_sort(population: Sequence[tuple[Sequence[float], float]]) -> list[list[int]]:
    """Fast non-dominated sort; returns fronts as lists of indices."""
    n = len(population)
    dominated_by = [[] for _ in range(n)]
    counts = [0] * n
    fronts: list[list[int]] = [[]]
    for i in range(n):
        for j in range(i + 1, n):
            if dominates(population[i], population[j]):
                dominated_by[i].append(j)
                counts[j] += 1
            elif dominates(population[j], population[i]):
                dominated_by[j].append(i)
                counts[i] += 1
    fronts[0] = [i for i in range(n) if counts[i] == 0]
    while fronts[-1]:
        nxt = []
        for i in fronts[-1]:
            for j in dominated_by[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(j)
        fronts.append(sorted(nxt))
    return fronts[:-1]


def crowding_distance(objectives: Sequence[Sequence[float]]) -> list[float]:
    """Crowding distance within one front; boundary members get +inf."""
    n = len(objectives)
    if n == 0:
        return []
    if n <= 2:
        return [math.inf] * n
    dist = [0.0] * n
    for k in range(len(objectives[0])):
        order = sorted(range(n), key=lambda i: (objectives[i][k], i))
        lo, hi = objectives[order[0]][k], objectives[order[-1]][k]
        dist[order[0]] = dist[order[-1]] = math.inf
        if hi == lo:
            continue
        for a in range(1, n - 1):
            i = order[a]
            if dist[i] != math.inf:
                dist[i] += (objectives[order[a + 1]][k] - objectives[order[a - 1]][k]) / (hi - lo)
    return dist


def tournament_select(rank: Sequence[int], crowd: Sequence[float], rng: np.random.Generator) -> int:
    """Binary tournament under the crowded-comparison operator."""
    a, b = (int(x) for x in rng.integers(0, len(rank), size=2))
    if rank[a] != rank[b]:
        return a if rank[a] < rank[b] else b
    if crowd[a] != crowd[b]:
        return a if crowd[a] > crowd[b] else b
    return min(a, b)


def uniform_crossover(p1: Sequence[int], p2: Sequence[int], p_c: float, rng: np.random.Generator):
    """With probability p_c, swap each gene independently with probability 0.5."""
    c1, c2 = list(p1), list(p2)
    if rng.random() < p_c:
        swap = rng.random(len(c1)) < 0.5
        for k in np.flatnonzero(swap):
            c1[k], c2[k] = c2[k], c1[k]
    return tuple(c1), tuple(c2)


def random_reset_mutation(genome: Sequence[int], sizes: Sequence[int], p_m: float, rng: np.random.Generator):
    """Each gene is redrawn uniformly from its candidate list with probability p_m."""
    out = list(genome)
    for k, size in enumerate(sizes):
        if rng.random() < p_m:
            out[k] = int(rng.integers(0, size))
    return tuple(out)


@dataclass
class NsgaSettings:
    population: int = 20
    budget: int = 500
    crossover: float = 0.9
    mutation: float = 0.2
    max_retries: int = 10
    stall_generations: int = 50

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.budget < self.population:
            raise ValueError("budget must cover one population")
        if not (0 <= self.crossover <= 1 and 0 <= self.mutation <= 1):
            raise ValueError("crossover and mutation probabilities must lie in [0, 1]")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def best_trial(trials: Iterable[Trial]) -> Trial | None:
    """Feasible trial with the fewest total bits; ties go to the smaller
    per-slot bit vector, then the earlier trial."""
    feasible = [t for t in trials if t.feasible]
    if not feasible:
        return None
    return min(feasible, key=lambda t: (t.total_bits, t.config.bits(), t.trial_id))


def least_violating(trials: Iterable[Trial]) -> Trial | None:
    trials = list(trials)
    if not trials:
        return None
    return min(trials, key=lambda t: (t.violation, t.total_bits, t.trial_id))


def _objectives(trial: Trial):
    return ((trial.total_bits,), trial.violation if not trial.feasible else 0.0)


def _fitness(trials: Sequence[Trial]):
    """Pareto rank and crowding distance per member."""
    pop = [_objectives(t) for t in trials]
    rank = [0] * len(trials)
    crowd = [0.0] * len(trials)
    for r, front in enumerate(nondominated_sort(pop)):
        dist = crowding_distance([pop[i][0] for i in front])
        for i, d in zip(front, dist):
            rank[i] = r
            crowd[i] = d
    return rank, crowd


def _survivors(trials: Sequence[Trial], size: int) -> list[Trial]:
    rank, crowd = _fitness(trials)
    order = sorted(range(len(trials)), key=lambda i: (rank[i], -crowd[i], trials[i].trial_id))
    return [trials[i] for i in order[:size]]


def nsga2_search(
    space: SearchSpace,
    log: TrialLog,
    settings: NsgaSettings | None = None,
    seed: int = 0,
    seed_configs: Sequence[PrecisionConfig] = (),
) -> tuple[Trial, list[Trial]]:
    """Constrained NSGA-II over ``space``; returns (best trial, trials it evaluated).

    ``log.evaluations`` counts unique evaluations across the whole log, so
    trials recorded before the call (e.g. Phase 1) are cache hits here but
    do not consume this search's budget.
    """
    cfg = settings or NsgaSettings()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STAGE_SEARCH,)))
    sizes = [len(c) for c in space.candidates]
    start = log.evaluations
    mine: list[Trial] = []
    own_keys: set = set()

    def spent() -> int:
        return log.evaluations - start

    def run(genomes):
        genomes = list(dict.fromkeys(genomes))
        room = cfg.budget - spent()
        picked, new = [], 0
        for g in genomes:
            if not log.seen(space.config(g)):
                if new >= room:
                    continue
                new += 1
            picked.append(g)
        trials = log.evaluate([space.config(g) for g in picked])
        for t in trials:
            if t.config.key() not in own_keys:
                own_keys.add(t.config.key())
                mine.append(t)
        return trials

    initial = [space.genome(c) for c in seed_configs if space.contains(c)]
    tries = 0
    target = min(cfg.population, space.size)
    while len(set(initial)) < target and tries < 100 * cfg.population:
        tries += 1
        initial.append(tuple(int(rng.integers(0, s)) for s in sizes))
    population = run(list(dict.fromkeys(initial))[: cfg.population])

    stall = 0
    while spent() < cfg.budget and len(own_keys) < space.size and stall < cfg.stall_generations:
        rank, crowd = _fitness(population)
        parents = [space.genome(t.config) for t in population]
        taken = {space.genome(t.config) for t in population}
        children: list[tuple[int, ...]] = []
        while len(children) < cfg.population:
            a = parents[tournament_select(rank, crowd, rng)]
            b = parents[tournament_select(rank, crowd, rng)]
            for child in uniform_crossover(a, b, cfg.crossover, rng):
                child = random_reset_mutation(child, sizes, cfg.mutation, rng)
                retries = 0
                while (
                    child in taken or child in children or log.seen(space.config(child))
                ) and retries < cfg.max_retries:
                    child = random_reset_mutation(child, sizes, max(cfg.mutation, 1.0 / len(sizes)), rng)
                    retries += 1
                if len(children) < cfg.population:
                    children.append(child)
        before = spent()
        offspring = run(children)
        stall = stall + 1 if spent() == before else 0
        merged = {t.config.key(): t for t in population + offspring}
        population = _survivors(list(merged.values()), cfg.population)

    best = best_trial(mine)
    if best is None:
        raise NoFeasibleTrial(least_violating(mine), mine)
    return best, mine


def per_slot_compression(config: PrecisionConfig) -> dict[str, float]:
    return {slot: FP32.total_bits / f.total_bits for slot, f in zip(SLOTS, config.formats())}


def reduction_summary(config: PrecisionConfig) -> dict[str, float]:
    """Both ways of averaging the size reduction: aggregate (160 / total
    bits) and the mean of per-slot 32 / bits ratios."""
    ratios = per_slot_compression(config)
    return {
        "aggregate": FP32.total_bits * len(SLOTS) / config.total_bits,
        "mean_per_slot": sum(ratios.values()) / len(ratios),
    }


def format_list(names: str) -> PrecisionConfig:
    """Parse 'E5M10,E4M3,...' (one format per slot) into a config."""
    parts = [p.strip() for p in names.split(",") if p.strip()]
    if len(parts) != len(SLOTS):
        raise ValueError(f"need {len(SLOTS)} comma-separated formats, got {len(parts)}")
    return PrecisionConfig(*(parse_format(p) for p in parts))

