"""One pass/fail check per acceptance criterion."""

import json
import os
import time

import numpy as np
import pytest

import test_arm as arm_suite
import test_fpcodec as codec_suite
import test_lbfgs as lbfgs_suite
from conftest import ENV_NAMES
from precmotion.cli import EXIT_OK, load_experiment, build_parser, main, problem_seed
from precmotion.fpcodec import enumerate_formats, formats_at_or_above, make_format, quantize_tensor
from precmotion.pipeline import PipelineSettings, evaluate_success_rate, generate_problems
from precmotion.precision import SLOTS, PrecisionConfig
from precmotion.search import format_list, nondominated_sort, reduce_space
from test_search import PUBLISHED_ROWS, brute_force_fronts, random_population, two_phase_mock


def test_criterion_1_format_space_arithmetic():
    start = time.perf_counter()
    space = enumerate_formats()
    assert len(space) == 21
    assert [f.name for f in formats_at_or_above(space, 13)] == ["E5M10", "E8M7", "E8M23"]
    table_pick = reduce_space((13, 4, 5, 4, 4))
    assert table_pick.size == 555_660 and f"{table_pick.reduction_factor:.2f}" == "7.35"
    others = reduce_space((15, 4, 4, 4, 4))
    assert others.size == 583_443 and others.reduction_factor == 7.0
    assert 21**5 == 4_084_101 == reduce_space((4,) * 5).size
    assert time.perf_counter() - start < 1.0


def test_criterion_2_published_grid_arithmetic():
    start = time.perf_counter()
    bits = [format_list(row).total_bits for row in PUBLISHED_ROWS.values()]
    assert len(bits) == 8
    assert all(34 <= b <= 43 for b in bits) and max(bits) == 43
    assert PrecisionConfig.uniform("E8M23").total_bits == 160
    assert time.perf_counter() - start < 1.0


def test_criterion_3_codec_oracle_suite():
    start = time.perf_counter()
    small = [f for f in enumerate_formats() if f.total_bits <= 10]
    for fmt in small:
        rng = np.random.default_rng(1000 + fmt.total_bits * 10 + fmt.exponent_bits)
        x = codec_suite.random_inputs(fmt, 100_000, rng)
        mismatches = int(np.sum(quantize_tensor(x.copy(), fmt) != codec_suite.oracle_quantize(x, fmt)))
        assert mismatches == 0, fmt.name

    # 10^6 random (x, fmt) pairs over the whole space
    rng = np.random.default_rng(3)
    space = enumerate_formats()
    pick = rng.integers(0, len(space), 1_000_000)
    mags = 2.0 ** rng.uniform(-30, 30, pick.size)
    x = (rng.choice([-1.0, 1.0], pick.size) * mags).astype(np.float32)
    for k, fmt in enumerate(space):
        xs = np.sort(x[pick == k])
        q = quantize_tensor(xs.copy(), fmt)
        assert np.array_equal(quantize_tensor(q.copy(), fmt), q), fmt.name
        assert np.all(np.diff(q) >= 0), fmt.name
        assert np.array_equal(quantize_tensor(-xs, fmt), -q), fmt.name

    e5m10 = make_format(5, 10)
    mags = 2.0 ** rng.uniform(-27, 15.99, 100_000)
    y = (rng.choice([-1.0, 1.0], mags.size) * mags).astype(np.float32)
    y = y[np.abs(y) < 65504]
    assert np.array_equal(quantize_tensor(y.copy(), e5m10), y.astype(np.float16).astype(np.float32))
    assert time.perf_counter() - start < 60


def test_criterion_4_gradient_suite(model, envs):
    start = time.perf_counter()
    assert arm_suite.H == 1e-5 and arm_suite.POINTS == 100
    arm_suite.test_collision_gradient_finite_differences(envs, model)
    arm_suite.test_self_collision_gradient_finite_differences(model)
    arm_suite.test_pose_gradient_finite_differences()
    arm_suite.test_bound_gradient_finite_differences(model)
    arm_suite.test_bk_matches_finite_differences(model)
    arm_suite.test_swept_gradient_finite_differences(model)
    assert time.perf_counter() - start < 60


def test_criterion_5_optimizer_suite():
    lbfgs_suite.test_quadratic_converges_in_50_iterations()
    lbfgs_suite.test_rosenbrock_converges_in_500_iterations()


def test_criterion_6_nsga_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    for _ in range(200):
        pop = random_population(rng, int(rng.integers(1, 51)))
        assert nondominated_sort(pop) == brute_force_fronts(pop)
    hits = 0
    for seed in range(10):
        _, _, best, _, log = two_phase_mock(seed)
        combinatorial = sum(t.phase == "combinatorial" for t in log.trials)
        hits += best.feasible and best.total_bits == 36 and combinatorial <= 500
    assert hits >= 9
    assert time.perf_counter() - start < 120


def test_criterion_8_pipeline_invariants(model, envs):
    settings = PipelineSettings(max_attempts=1)
    count = 20
    for index, name in enumerate(ENV_NAMES):
        env = envs[name]
        problems = generate_problems(env, model, count, problem_seed(0, index), goal_clearance=0.1)
        full = evaluate_success_rate(problems, env, model, settings, PrecisionConfig.uniform("E8M23"))
        low = evaluate_success_rate(problems, env, model, settings, PrecisionConfig.uniform("E2M1"))
        assert sum(r.success for r in full.reports) >= sum(r.success for r in low.reports), name

    import test_pipeline as pipeline_suite

    pipeline_suite.test_validation_ignores_precision(model, envs, PipelineSettings())
    pipeline_suite.test_attempt_statistics()


@pytest.mark.slow
def test_criterion_7_end_to_end(tmp_path):
    jobs = os.cpu_count() or 1
    runs = []
    for name in ("first", "replay"):
        out = tmp_path / name
        assert main(["search-combinatorial", "--out", str(out), "--jobs", str(jobs)]) == EXIT_OK
        runs.append(out)
    first = runs[0]

    cfg = load_experiment(build_parser().parse_args(["baseline"]))
    assert len(cfg.environments) == 3 and cfg.problem_count == 50

    baseline = json.loads((first / "baseline.json").read_text())
    assert all(rate >= 0.9 for rate in baseline["rates"].values()), baseline["rates"]

    minima = json.loads((first / "minima.json").read_text())
    assert minima["slots"]["out_spheres"]["min_bits"] > minima["slots"]["grad_out_spheres"]["min_bits"]

    best = json.loads((first / "best.json").read_text())
    assert best["feasible"] and best["total_bits"] <= 100
    assert best["reduction"]["aggregate"] >= 1.6

    assert (runs[0] / "trials.jsonl").read_bytes() == (runs[1] / "trials.jsonl").read_bytes()
    assert set(SLOTS) == set(best["config"])
