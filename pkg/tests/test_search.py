import itertools
import json
import math

import numpy as np
import pytest

from precmotion.fpcodec import enumerate_formats, parse_format
from precmotion.precision import SLOTS, PrecisionConfig
from precmotion.search import (
    BaselineTargets,
    EvalResult,
    InfeasibleSlot,
    NoFeasibleTrial,
    NsgaSettings,
    SearchSpace,
    ThresholdEvaluator,
    TrialLog,
    best_trial,
    crowding_distance,
    dominates,
    format_list,
    judge,
    nondominated_sort,
    nsga2_search,
    per_tensor_binary_search,
    probe_order,
    random_reset_mutation,
    read_trials,
    reduce_space,
    reduction_summary,
    total_bits,
    uniform_crossover,
)

MOCK_THRESHOLDS = (16, 5, 4, 5, 6)

# combinatorial-search rows of the published per-environment grid
PUBLISHED_ROWS = {
    "bookshelf_small": "E5M10,E4M3,E2M1,E2M2,E4M3",
    "bookshelf_tall": "E5M10,E3M1,E2M1,E2M1,E3M1",
    "bookshelf_thin": "E5M10,E2M3,E3M1,E3M2,E2M2",
    "box": "E5M10,E3M2,E2M2,E3M2,E3M1",
    "box_flipped": "E5M10,E2M1,E3M2,E2M2,E3M1",
    "cage": "E5M10,E5M2,E2M1,E2M1,E2M3",
    "table_pick": "E8M7,E3M1,E3M1,E2M2,E3M2",
    "table_under_pick": "E5M10,E3M2,E2M2,E4M3,E4M3",
}


def mock_log(thresholds=MOCK_THRESHOLDS, phase="per-tensor", path=None):
    ev = ThresholdEvaluator(thresholds)
    return ev, TrialLog(ev, ev.targets(), 0, phase, path=path)


def two_phase_mock(seed, thresholds=MOCK_THRESHOLDS, budget=500):
    ev, log = mock_log(thresholds)
    results = [per_tensor_binary_search(s, log) for s in SLOTS]
    space = reduce_space([r.min_bits for r in results])
    witnesses = [PrecisionConfig().replace(r.slot, r.witness) for r in results]
    log.phase = "combinatorial"
    best, mine = nsga2_search(space, log, NsgaSettings(budget=budget), seed=seed, seed_configs=witnesses)
    return results, space, best, mine, log


# --------------------------------------------------------------------------- space arithmetic


def test_reduce_space_examples():
    table_pick = reduce_space((13, 4, 5, 4, 4))
    assert table_pick.size == 555_660
    assert round(table_pick.reduction_factor, 2) == 7.35
    others = reduce_space((15, 4, 4, 4, 4))
    assert others.size == 583_443
    assert others.reduction_factor == pytest.approx(7.0)
    full = reduce_space((4,) * 5)
    assert full.size == 4_084_101 == 21**5 == SearchSpace.full().size
    assert full.reduction_factor == 1.0
    assert reduce_space(dict(zip(SLOTS, (13, 4, 5, 4, 4)))) == table_pick


def test_space_genome_roundtrip():
    space = reduce_space((13, 4, 5, 4, 4))
    cfg = format_list("E5M10,E2M1,E3M2,E8M23,E2M1")
    assert space.contains(cfg)
    assert space.config(space.genome(cfg)) == cfg
    assert not space.contains(format_list("E4M3,E2M1,E3M2,E8M23,E2M1"))
    with pytest.raises(ValueError):
        SearchSpace(((),) * 5)


def test_published_rows_total_bits():
    bits = {name: total_bits(format_list(row)) for name, row in PUBLISHED_ROWS.items()}
    assert bits["bookshelf_small"] == 41
    assert bits["table_under_pick"] == 43
    assert min(bits.values()) >= 34 and max(bits.values()) == 43
    assert total_bits(PrecisionConfig()) == 160


def test_reduction_summary_both_definitions():
    cfg = format_list(PUBLISHED_ROWS["bookshelf_small"])
    red = reduction_summary(cfg)
    assert red["aggregate"] == pytest.approx(160 / 41)
    assert red["mean_per_slot"] == pytest.approx((2 + 4 + 8 + 32 / 5 + 4) / 5)


def test_format_list_validation():
    with pytest.raises(ValueError):
        format_list("E5M10,E2M1")
    with pytest.raises(ValueError):
        format_list("E5M10,E2M1,E2M1,E2M1,E9M1")


# --------------------------------------------------------------------------- dominance


def brute_force_fronts(pop):
    remaining = set(range(len(pop)))
    fronts = []
    while remaining:
        front = sorted(i for i in remaining if not any(dominates(pop[j], pop[i]) for j in remaining if j != i))
        fronts.append(front)
        remaining -= set(front)
    return fronts


def random_population(rng, size):
    pop = []
    for _ in range(size):
        objectives = tuple(float(v) for v in rng.integers(0, 6, size=int(rng.integers(1, 3))))
        violation = 0.0 if rng.random() < 0.6 else float(rng.integers(1, 4)) / 4
        pop.append((objectives, violation))
    # a single objective length per population
    k = len(pop[0][0])
    return [((o + (0.0,) * k)[:k], v) for o, v in pop]


def test_nondominated_sort_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        pop = random_population(rng, int(rng.integers(1, 51)))
        assert nondominated_sort(pop) == brute_force_fronts(pop)


def test_nondominated_sort_examples():
    assert nondominated_sort([((1,), 0.0), ((2,), 0.0), ((3,), 0.0)]) == [[0], [1], [2]]
    assert nondominated_sort([((40,), 0.5), ((50,), 0.0)]) == [[1], [0]]
    assert nondominated_sort([((40,), 0.5), ((30,), 0.25)]) == [[1], [0]]
    assert nondominated_sort([]) == []


def test_crowding_distance():
    assert crowding_distance([(1.0,), (2.0,)]) == [math.inf, math.inf]
    d = crowding_distance([(0.0,), (1.0,), (3.0,), (4.0,)])
    assert d[0] == d[3] == math.inf
    assert d[1] == pytest.approx(3 / 4) and d[2] == pytest.approx(3 / 4)
    assert crowding_distance([]) == []


def test_variation_operators():
    rng = np.random.default_rng(1)
    parent = (3, 1, 4, 1, 5)
    assert uniform_crossover(parent, parent, 1.0, rng) == (parent, parent)
    a, b = (0,) * 5, (1,) * 5
    for _ in range(50):
        c1, c2 = uniform_crossover(a, b, 1.0, rng)
        assert all({x, y} == {0, 1} for x, y in zip(c1, c2))
    assert uniform_crossover(a, b, 0.0, rng) == (a, b)
    sizes = (3, 21, 20, 21, 21)
    seen = [set() for _ in sizes]
    for _ in range(500):
        child = random_reset_mutation(parent, sizes, 1.0, rng)
        for k, g in enumerate(child):
            assert 0 <= g < sizes[k]
            seen[k].add(g)
    assert [len(s) for s in seen] == list(sizes)
    assert random_reset_mutation(parent, sizes, 0.0, rng) == parent


# --------------------------------------------------------------------------- feasibility


def test_judge_and_rates():
    targets = BaselineTargets({"a": 9, "b": 10}, {"a": 10, "b": 10})
    ok = EvalResult({"a": 9, "b": 10}, {"a": 10, "b": 10}, {"a": 10, "b": 10})
    assert judge(ok, targets) == (True, 0.0)
    short = EvalResult({"a": 8, "b": 10}, {"a": 10, "b": 10}, {"a": 10, "b": 10})
    feasible, violation = judge(short, targets)
    assert not feasible and violation == pytest.approx(0.1)
    stopped = EvalResult({"a": 6, "b": None}, {"a": 10, "b": 10}, {"a": 8, "b": 0})
    assert stopped.truncated
    assert stopped.rates() == {"a": 0.8, "b": None}
    assert not judge(stopped, targets)[0]


def test_trial_log_memoizes_and_writes(tmp_path):
    ev, log = mock_log(path=tmp_path / "trials.jsonl")
    cfg = PrecisionConfig()
    first = log.evaluate([cfg, cfg])
    assert ev.calls == 1 and log.evaluations == 1 and first[0] is first[1]
    log.evaluate([cfg])
    assert ev.calls == 1
    lines = (tmp_path / "trials.jsonl").read_text().splitlines()
    rec = json.loads(lines[0])
    assert rec["config"]["out_spheres"] == "E8M23" and rec["total_bits"] == 160 and rec["feasible"]
    assert "timestamp" not in rec
    assert json.loads((tmp_path / "trials_meta.jsonl").read_text())["trial"] == 0
    assert read_trials(tmp_path / "trials.jsonl")[0].config == cfg


def test_read_trials_rejects_malformed(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"trial": 0}\nnot json\n')
    with pytest.raises(ValueError, match="malformed"):
        read_trials(path)


def test_restore_requires_consecutive_ids():
    _, log = mock_log()
    trials = log.evaluate([PrecisionConfig(), PrecisionConfig.uniform("E5M10")])
    _, fresh = mock_log()
    with pytest.raises(ValueError):
        fresh.restore(trials[1:])
    fresh.restore(trials)
    assert fresh.evaluations == 2 and fresh.seen(PrecisionConfig.uniform("E5M10"))


# --------------------------------------------------------------------------- phase 1


def test_probe_order_prefers_balanced_splits():
    assert [f.name for f in probe_order(16)][:2] == ["E5M10", "E4M11"]
    assert {f.name for f in probe_order(4)} == {"E2M1"}
    assert len(probe_order(32)) == 7


def test_binary_search_threshold_sixteen():
    _, log = mock_log((16, 32, 32, 32, 32))
    result = per_tensor_binary_search("out_spheres", log)
    assert result.min_bits == 16 and result.witness.total_bits == 16
    assert result.monotonic
    assert len({p["bits"] for p in result.probes}) <= 6


def test_binary_search_lower_edge():
    _, log = mock_log((4,) * 5)
    result = per_tensor_binary_search("closest_pt", log)
    assert result.min_bits == 4 and result.witness == parse_format("E2M1") and result.monotonic


def test_binary_search_infeasible_slot():
    class NeverFeasible(ThresholdEvaluator):
        def __call__(self, config, targets=None):
            res = super().__call__(config, targets)
            res.successes = {k: v - 1 for k, v in res.successes.items()}
            return res

    ev = NeverFeasible((4,) * 5)
    log = TrialLog(ev, ev.targets(), 0, "per-tensor")
    with pytest.raises(InfeasibleSlot) as info:
        per_tensor_binary_search("out_vec", log)
    assert info.value.slot == "out_vec" and info.value.probes


# --------------------------------------------------------------------------- phase 2


def test_mock_two_phase_recovers_thresholds():
    results, space, best, mine, log = two_phase_mock(seed=0)
    assert [r.min_bits for r in results] == list(MOCK_THRESHOLDS)
    assert best.feasible and best.total_bits == 36
    assert all(space.contains(t.config) for t in mine)
    phase_one = sum(t.phase == "per-tensor" for t in log.trials)
    assert log.evaluations - phase_one <= 500
    logged_feasible = [t for t in log.trials if t.feasible]
    assert min(t.total_bits for t in logged_feasible) == best.total_bits


def test_mock_search_hits_optimum_across_seeds():
    hits = sum(two_phase_mock(seed)[2].total_bits == 36 for seed in range(10))
    assert hits >= 9


def test_search_is_deterministic():
    a = [t.to_log() for t in two_phase_mock(seed=3)[4].trials]
    b = [t.to_log() for t in two_phase_mock(seed=3)[4].trials]
    assert a == b


def test_single_config_space():
    space = SearchSpace(tuple((parse_format("E8M23"),) for _ in SLOTS))
    ev, log = mock_log()
    best, mine = nsga2_search(space, log, NsgaSettings(population=2, budget=10))
    assert ev.calls == 1 and len(mine) == 1 and best.config == PrecisionConfig()


def test_budget_must_cover_population():
    with pytest.raises(ValueError, match="budget must cover one population"):
        NsgaSettings(budget=0)


def test_no_feasible_trial():
    space = reduce_space((4,) * 5)
    restricted = SearchSpace(tuple(tuple(f for f in c if f.total_bits <= 5) for c in space.candidates))
    _, log = mock_log()
    with pytest.raises(NoFeasibleTrial) as info:
        nsga2_search(restricted, log, NsgaSettings(population=4, budget=20))
    flagged = info.value.least_violating
    assert flagged is not None and not flagged.feasible
    assert flagged.violation == min(t.violation for t in info.value.trials)


def test_best_trial_tie_break():
    _, log = mock_log((4,) * 5)
    a, b, c = log.evaluate(
        [format_list("E2M2,E2M1,E2M1,E2M1,E2M1"), format_list("E2M1,E2M2,E2M1,E2M1,E2M1"), format_list("E3M1,E2M1,E2M1,E2M1,E2M1")]
    )
    assert best_trial([a, b, c]) is b
    assert best_trial([]) is None


def test_every_space_member_enumerated_format():
    space = reduce_space((13, 4, 5, 4, 4))
    allowed = set(enumerate_formats())
    assert all(set(c) <= allowed for c in space.candidates)
    assert [len(c) for c in space.candidates] == [3, 21, 20, 21, 21]
    assert math.prod(len(c) for c in space.candidates) == space.size
    assert list(itertools.islice(space.candidates[0], 3)) == sorted(space.candidates[0], key=lambda f: f.total_bits)
