"""Batched motion generation: IK optimization, interpolation seeding,
trajectory optimization and the attempt loop, with quantization hooks on the
five slot tensors."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .arm import ArmModel, Environment, ProblemInstance, configs_free, forward_kinematics
from .lbfgs import BatchLbfgs, LbfgsSettings
from .precision import Hooks, PrecisionConfig, SlotStats

log = logging.getLogger(__name__)

STAGE_IK = 0
STAGE_TO = 1


class NoIkSolution(RuntimeError):
    pass


@dataclass
class CostWeights:
    pose_position: float = 1000.0
    pose_orientation: float = 100.0
    collision: float = 1000.0
    self_collision: float = 1000.0
    bound: float = 100.0
    velocity: float = 1.0
    acceleration: float = 1.0


@dataclass
class PipelineSettings:
    ik_seeds: int = 64
    to_seeds: int = 4
    max_attempts: int = 5
    horizon: int = 32
    position_tolerance: float = 0.005
    angle_tolerance: float = 0.05
    interpolation_substeps: int = 4
    validation_substeps: int = 8
    ik_iters: int = 50
    to_iters: int = 80
    slot_dtype: str = "float32"
    weights: CostWeights = field(default_factory=CostWeights)
    lbfgs: LbfgsSettings = field(default_factory=LbfgsSettings)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = CostWeights(**self.weights)
        if isinstance(self.lbfgs, dict):
            self.lbfgs = LbfgsSettings(**self.lbfgs)
        if not self.ik_seeds >= self.to_seeds >= 1:
            raise ValueError("need ik_seeds >= to_seeds >= 1")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.horizon < 3:
            raise ValueError("horizon must be >= 3")
        if self.interpolation_substeps < 1 or self.validation_substeps < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def dtype(self):
        return np.dtype(self.slot_dtype)

    def lbfgs_for(self, iters: int) -> LbfgsSettings:
        data = self.lbfgs.to_dict()
        data["max_iters"] = iters
        return LbfgsSettings(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lbfgs"] = self.lbfgs.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> PipelineSettings:
        return cls(**data)


@dataclass
class IkSolution:
    theta: np.ndarray
    cost: float
    position_error: float
    angle_error: float


@dataclass
class SeedTrajectory:
    trajectory: np.ndarray  # (T, n)
    kind: str  # "direct" | "retract"
    feasible: bool


@dataclass
class SuccessReport:
    success: bool
    attempts_used: int
    trajectory: np.ndarray | None = None
    costs: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "attempts_used": self.attempts_used,
            "trajectory": None if self.trajectory is None else self.trajectory.tolist(),
            "costs": self.costs,
            "wall_time": self.wall_time,
        }


def substream(seed: np.random.SeedSequence, *key: int) -> np.random.SeedSequence:
    """Counter-style child stream: same (seed, key) always gives the same stream."""
    return np.random.SeedSequence(entropy=seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(key))


def pose_errors(ee: np.ndarray, goal) -> tuple[np.ndarray, np.ndarray]:
    goal = np.asarray(goal, dtype=np.float64)
    pos = np.hypot(ee[..., 0] - goal[0], ee[..., 1] - goal[1])
    ang = np.abs(np.pi - np.mod(np.pi - (ee[..., 2] - goal[2]), 2 * np.pi))
    return pos, ang


class IkCost:
    """Pose + collision + self-collision + bound cost over configurations."""

    def __init__(self, goal, env: Environment, model: ArmModel, settings: PipelineSettings, hooks: Hooks):
        self.goal = np.asarray(goal, dtype=np.float64)
        self.env = env
        self.model = model
        self.w = settings.weights
        self.dtype = settings.dtype
        self.hooks = hooks

    def __call__(self, X: np.ndarray, need_grad: bool = True):
        model, env, w, hooks = self.model, self.env, self.w, self.hooks
        X = np.ascontiguousarray(X, dtype=np.float64)
        K = X.shape[0]
        NS = model.n_spheres
        spheres = np.empty((K, NS, 3), dtype=self.dtype)
        ee = np.empty((K, 3))
        kernels.fk(X, model.lengths, model.fracs, model.sphere_radius, spheres, ee)
        hooks("out_spheres", spheres)

        c_coll = np.empty(K)
        if need_grad:
            fld = np.empty((K, NS, 3), dtype=self.dtype)
            kernels.collision(spheres, env.obstacles, env.activation_margin, model.spheres_per_link, c_coll, fld)
            hooks("closest_pt", fld)
        else:
            kernels.collision_cost_only(spheres, env.obstacles, env.activation_margin, model.spheres_per_link, c_coll)

        out_vec = np.zeros((K, model.n_pairs), dtype=self.dtype)
        active = np.empty(spheres.shape[0], dtype=np.bool_)
        kernels.self_penetration(spheres, model.link_pairs, model.spheres_per_link, out_vec, active)
        hooks("out_vec", out_vec)
        c_self = np.empty(K)
        gsph = np.zeros((K, NS, 2))
        kernels.self_cost_grad(
            spheres, model.pair_a, model.pair_b, out_vec, active, w.self_collision, c_self, gsph, need_grad
        )

        terms = np.empty((K, 2))
        g = np.zeros_like(X)
        g_pose = np.zeros((K, 3))
        kernels.config_terms(
            X, ee, model.lower, model.upper, self.goal, w.bound, w.pose_position, w.pose_orientation, terms, g, g_pose
        )
        cost = terms[:, 0] + w.collision * c_coll + w.self_collision * c_self + terms[:, 1]
        if not need_grad:
            return cost
        kernels.field_to_grad(fld.reshape(-1, 3), w.collision, gsph.reshape(-1, 2))
        grad_out = gsph.astype(self.dtype)
        hooks("grad_out_spheres", grad_out)
        g_arm = np.empty_like(X)
        kernels.bk(X, model.lengths, model.fracs, grad_out, g_pose, True, g_arm)
        return cost, g + g_arm


class TrajectoryCost:
    """Swept collision, self-collision, smoothness, bound and terminal pose
    cost over the free waypoints 1..T-1 (waypoint 0 is the fixed start)."""

    def __init__(self, start, goal, env: Environment, model: ArmModel, settings: PipelineSettings, hooks: Hooks):
        self.start = np.asarray(start, dtype=np.float64)
        self.goal = np.asarray(goal, dtype=np.float64)
        self.env = env
        self.model = model
        self.T = settings.horizon
        self.substeps = settings.interpolation_substeps
        self.w = settings.weights
        self.dtype = settings.dtype
        self.hooks = hooks

    def full(self, X: np.ndarray) -> np.ndarray:
        n = self.model.n_joints
        K = X.shape[0]
        traj = np.empty((K, self.T, n))
        traj[:, 0] = self.start
        traj[:, 1:] = X.reshape(K, self.T - 1, n)
        return traj

    def __call__(self, X: np.ndarray, need_grad: bool = True, breakdown: bool = False):
        model, env, w, hooks = self.model, self.env, self.w, self.hooks
        T, n, NS = self.T, model.n_joints, model.n_spheres
        K = X.shape[0]
        traj = self.full(np.asarray(X, dtype=np.float64))
        flat = traj.reshape(K * T, n)

        spheres = np.empty((K * T, NS, 3), dtype=self.dtype)
        ee = np.empty((K * T, 3))
        kernels.fk(flat, model.lengths, model.fracs, model.sphere_radius, spheres, ee)
        hooks("out_spheres", spheres)

        c_coll = np.empty(K)
        fld = np.empty((K, T, NS, 3), dtype=self.dtype)
        kernels.swept(
            spheres.reshape(K, T, NS, 3), env.obstacles, env.activation_margin,
            self.substeps, model.spheres_per_link, c_coll, fld, need_grad,
        )
        if need_grad:
            hooks("closest_pt_swept", fld)

        out_vec = np.zeros((K * T, model.n_pairs), dtype=self.dtype)
        active = np.empty(spheres.shape[0], dtype=np.bool_)
        kernels.self_penetration(spheres, model.link_pairs, model.spheres_per_link, out_vec, active)
        hooks("out_vec", out_vec)
        c_self_flat = np.empty(K * T)
        gsph = np.zeros((K * T, NS, 2))
        kernels.self_cost_grad(
            spheres, model.pair_a, model.pair_b, out_vec, active, w.self_collision, c_self_flat, gsph, need_grad
        )
        c_self = c_self_flat.reshape(K, T).sum(axis=1)

        terms = np.empty((K, 3))
        g = np.zeros((K, T, n))
        g_ee = np.zeros((K, T, 3))
        kernels.trajectory_terms(
            traj, ee.reshape(K, T, 3), model.lower, model.upper, self.goal, w.velocity, w.acceleration,
            w.bound, w.pose_position, w.pose_orientation, terms, g, g_ee,
        )
        cost = w.collision * c_coll + w.self_collision * c_self + terms.sum(axis=1)
        if breakdown:
            return {
                "collision": w.collision * c_coll,
                "self_collision": w.self_collision * c_self,
                "smoothness": terms[:, 0],
                "bound": terms[:, 1],
                "pose": terms[:, 2],
                "total": cost,
            }
        if not need_grad:
            return cost

        kernels.field_to_grad(fld.reshape(-1, 3), w.collision, gsph.reshape(-1, 2))
        grad_out = gsph.astype(self.dtype)
        hooks("grad_out_spheres", grad_out)
        g_arm = np.empty((K * T, n))
        kernels.bk(flat, model.lengths, model.fracs, grad_out, g_ee.reshape(K * T, 3), True, g_arm)
        g += g_arm.reshape(K, T, n)
        return cost, g[:, 1:].reshape(K, (T - 1) * n)


def _batch_cost_fns(cost):
    return (lambda X: cost(X, need_grad=False)), (lambda X: cost(X, need_grad=True))


def solve_ik(
    goal_pose,
    env: Environment,
    model: ArmModel,
    settings: PipelineSettings,
    precision: PrecisionConfig | Hooks | None,
    rng: np.random.SeedSequence,
) -> list[IkSolution]:
    """Optimize ``ik_seeds`` random configurations towards ``goal_pose``.

    Each seed draws its start from its own substream of ``rng``. Returns the
    solutions within pose tolerance, lowest cost first.
    """
    hooks = precision if isinstance(precision, Hooks) else Hooks(precision)
    seeds = np.empty((settings.ik_seeds, model.n_joints))
    for i in range(settings.ik_seeds):
        gen = np.random.default_rng(substream(rng, STAGE_IK, i))
        seeds[i] = gen.uniform(model.lower, model.upper)
    cost = IkCost(goal_pose, env, model, settings, hooks)
    res = BatchLbfgs(settings.lbfgs_for(settings.ik_iters)).run(seeds, *_batch_cost_fns(cost))
    _, ee = forward_kinematics(res.theta, model, dtype=np.float64)
    pos_err, ang_err = pose_errors(ee, goal_pose)
    ok = (
        ~res.failed
        & (pos_err <= settings.position_tolerance)
        & (ang_err <= settings.angle_tolerance)
        & model.within_limits(res.theta)
    )
    order = sorted(np.flatnonzero(ok), key=lambda i: (res.cost[i], i))
    if not order:
        raise NoIkSolution("no IK seed reached the goal tolerance")
    return [IkSolution(res.theta[i].copy(), float(res.cost[i]), float(pos_err[i]), float(ang_err[i])) for i in order]


def interpolate(a, b, count: int) -> np.ndarray:
    """``count`` evenly spaced configurations from a to b inclusive."""
    t = np.linspace(0.0, 1.0, count)[:, None]
    return (1.0 - t) * np.asarray(a, dtype=np.float64) + t * np.asarray(b, dtype=np.float64)


def densify(traj: np.ndarray, substeps: int) -> np.ndarray:
    """Waypoints plus ``substeps - 1`` joint-space interpolants per segment."""
    traj = np.asarray(traj, dtype=np.float64)
    if substeps == 1:
        return traj
    a = np.arange(substeps) / substeps
    seg = (1.0 - a)[None, :, None] * traj[:-1, None, :] + a[None, :, None] * traj[1:, None, :]
    return np.concatenate([seg.reshape(-1, traj.shape[1]), traj[-1:]], axis=0)


def path_free(traj, env: Environment, model: ArmModel, substeps: int) -> bool:
    return bool(np.all(configs_free(densify(traj, substeps), env, model)))


def path_penetration(traj, env: Environment, model: ArmModel, substeps: int) -> float:
    """Summed squared environment and self penetration along the dense path."""
    dense = densify(traj, substeps)
    spheres, _ = forward_kinematics(dense, model, dtype=np.float32)
    total = 0.0
    if env.obstacles.shape[0]:
        c = np.empty(dense.shape[0])
        kernels.collision_cost_only(spheres, env.obstacles, 0.0, model.spheres_per_link, c)
        total += float(c.sum())
    out_vec = np.zeros((dense.shape[0], model.n_pairs), dtype=np.float32)
    active = np.empty(dense.shape[0], dtype=np.bool_)
    kernels.self_penetration(spheres, model.link_pairs, model.spheres_per_link, out_vec, active)
    return total + float(np.sum(out_vec.astype(np.float64) ** 2))


def seed_trajectories(start, ik_solutions, env: Environment, model: ArmModel, settings: PipelineSettings) -> list[SeedTrajectory]:
    """Direct interpolation when it passes the dense check, else a detour
    through the retract configuration. If both collide, whichever penetrates
    less is kept and flagged infeasible."""
    T = settings.horizon
    sub = settings.validation_substeps
    retract = np.asarray(model.retract_config)
    first = T // 2
    out = []
    for sol in ik_solutions[: settings.to_seeds]:
        direct = interpolate(start, sol.theta, T)
        if path_free(direct, env, model, sub):
            out.append(SeedTrajectory(direct, "direct", True))
            continue
        detour = np.concatenate(
            [interpolate(start, retract, first + 1)[:-1], interpolate(retract, sol.theta, T - first)]
        )
        if path_free(detour, env, model, sub):
            out.append(SeedTrajectory(detour, "retract", True))
        elif path_penetration(detour, env, model, sub) < path_penetration(direct, env, model, sub):
            out.append(SeedTrajectory(detour, "retract", False))
        else:
            out.append(SeedTrajectory(direct, "direct", False))
    return out


def optimize_trajectory(
    start,
    seeds: np.ndarray,
    goal_pose,
    env: Environment,
    model: ArmModel,
    settings: PipelineSettings,
    precision: PrecisionConfig | Hooks | None,
):
    """Optimize a batch of seed trajectories (K, T, n) with the start pinned.

    Returns (trajectories (K, T, n), costs (K,), failed (K,)).
    """
    hooks = precision if isinstance(precision, Hooks) else Hooks(precision)
    seeds = np.asarray(seeds, dtype=np.float64)
    if seeds.ndim == 2:
        seeds = seeds[None]
    K, T, n = seeds.shape
    cost = TrajectoryCost(start, goal_pose, env, model, settings, hooks)
    X0 = seeds[:, 1:].reshape(K, (T - 1) * n)
    res = BatchLbfgs(settings.lbfgs_for(settings.to_iters)).run(X0, *_batch_cost_fns(cost))
    return cost.full(res.theta), res.cost, res.failed


def validate_trajectory(traj, goal_pose, env: Environment, model: ArmModel, settings: PipelineSettings):
    """Full-precision success check; returns (ok, reasons)."""
    traj = np.asarray(traj, dtype=np.float64)
    reasons = []
    if not np.all(model.within_limits(traj)):
        reasons.append("joint_limits")
    dense = densify(traj, settings.validation_substeps)
    spheres, _ = forward_kinematics(dense, model, dtype=np.float32)
    if env.obstacles.shape[0]:
        c = np.empty(dense.shape[0])
        kernels.collision_cost_only(spheres, env.obstacles, 0.0, model.spheres_per_link, c)
        if np.any(c > 0):
            reasons.append("collision")
    out_vec = np.zeros((dense.shape[0], model.n_pairs), dtype=np.float32)
    active = np.empty(spheres.shape[0], dtype=np.bool_)
    kernels.self_penetration(spheres, model.link_pairs, model.spheres_per_link, out_vec, active)
    if np.any(active):
        reasons.append("self_collision")
    _, ee = forward_kinematics(traj[-1], model, dtype=np.float64)
    pos, ang = pose_errors(ee[0], goal_pose)
    if pos > settings.position_tolerance or ang > settings.angle_tolerance:
        reasons.append("goal_pose")
    return not reasons, reasons


def generate_motion(
    problem: ProblemInstance,
    env: Environment,
    model: ArmModel,
    settings: PipelineSettings,
    precision: PrecisionConfig | None = None,
    stats: SlotStats | None = None,
) -> SuccessReport:
    t0 = time.perf_counter()
    hooks = Hooks(precision, stats)
    root = np.random.SeedSequence(problem.rng_seed)
    start = np.asarray(problem.start_config, dtype=np.float64)
    for attempt in range(settings.max_attempts):
        attempt_rng = substream(root, attempt)
        try:
            sols = solve_ik(problem.goal_pose, env, model, settings, hooks, attempt_rng)
        except NoIkSolution:
            continue
        seeds = seed_trajectories(start, sols, env, model, settings)
        trajs, costs, failed = optimize_trajectory(
            start, np.stack([s.trajectory for s in seeds]), problem.goal_pose, env, model, settings, hooks
        )
        for k in np.argsort(costs, kind="stable"):
            if failed[k]:
                continue
            ok, _ = validate_trajectory(trajs[k], problem.goal_pose, env, model, settings)
            if ok:
                breakdown = TrajectoryCost(start, problem.goal_pose, env, model, settings, Hooks())(
                    trajs[k][None, 1:].reshape(1, -1), breakdown=True
                )
                return SuccessReport(
                    True,
                    attempt + 1,
                    trajs[k],
                    {name: float(v[0]) for name, v in breakdown.items()},
                    time.perf_counter() - t0,
                )
    return SuccessReport(False, settings.max_attempts, None, {}, time.perf_counter() - t0)


def attempt_statistics(attempts) -> tuple[float, float, float]:
    """(median, 75th percentile, mean); percentiles use the inverted-CDF rule."""
    a = np.asarray(attempts, dtype=np.float64)
    if a.size == 0:
        raise ValueError("no attempts to summarize")
    med = float(np.percentile(a, 50, method="inverted_cdf"))
    p75 = float(np.percentile(a, 75, method="inverted_cdf"))
    return med, p75, float(a.mean())


def format_attempt_stats(stats) -> str:
    def num(x):
        return str(int(x)) if float(x).is_integer() else f"{x:g}"

    med, p75, mean = stats
    return f"({num(med)}, {num(p75)}, {round(mean, 2)})"


@dataclass
class RateResult:
    rate: float
    attempt_stats: tuple[float, float, float]
    reports: list[SuccessReport]
    sparsity: dict | None = None

    @property
    def successes(self) -> int:
        return sum(r.success for r in self.reports)


def _run_one(args):
    problem, env, model, settings, precision, collect = args
    stats = SlotStats() if collect else None
    report = generate_motion(problem, env, model, settings, precision, stats)
    return report, stats


def evaluate_success_rate(
    problems,
    env: Environment,
    model: ArmModel,
    settings: PipelineSettings,
    precision: PrecisionConfig | None = None,
    jobs: int = 1,
    collect_sparsity: bool = False,
    executor: ProcessPoolExecutor | None = None,
) -> RateResult:
    if not problems:
        raise ValueError("need at least one problem")
    tasks = [(p, env, model, settings, precision, collect_sparsity) for p in problems]
    if executor is not None:
        results = list(executor.map(_run_one, tasks))
    elif jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    reports = [r for r, _ in results]
    sparsity = None
    if collect_sparsity:
        total = SlotStats()
        for _, s in results:
            total.merge(s)
        sparsity = total.sparsity()
    rate = sum(r.success for r in reports) / len(reports)
    return RateResult(rate, attempt_statistics([r.attempts_used for r in reports]), reports, sparsity)


def generate_problems(
    env: Environment,
    model: ArmModel,
    count: int,
    seed: int,
    horizon: int = 32,
    substeps: int = 8,
    goal_clearance: float | None = None,
    max_tries: int = 100000,
) -> list[ProblemInstance]:
    """Random start/goal configuration pairs, both clear of obstacles by the
    activation margin and joined by a collision-free straight joint-space
    motion; the goal pose is the tip pose of the goal configuration. Every
    problem is therefore solvable, though the IK solutions the pipeline
    finds generally differ from the sampled goal configuration.

    With ``goal_clearance`` set, the goal configuration must also come within
    that distance of some obstacle (pick-from-clutter style goals). An
    obstacle-free environment ignores it.
    """
    rng = np.random.default_rng(seed)
    problems = []
    tries = 0
    while len(problems) < count:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not sample {count} free problems in {env.name!r}")
        pair = rng.uniform(model.lower, model.upper, size=(2, model.n_joints))
        if not np.all(configs_free(pair, env, model, env.activation_margin)):
            continue
        if goal_clearance is not None and env.obstacles.shape[0] and configs_free(pair[1], env, model, goal_clearance)[0]:
            continue
        if not path_free(interpolate(pair[0], pair[1], horizon), env, model, substeps):
            continue
        _, ee = forward_kinematics(pair[1], model, dtype=np.float64)
        goal = (float(ee[0, 0]), float(ee[0, 1]), float(math.remainder(ee[0, 2], 2 * math.pi)))
        problem_seed = int(np.random.SeedSequence([seed, len(problems)]).generate_state(1)[0])
        problems.append(ProblemInstance(tuple(float(x) for x in pair[0]), goal, problem_seed))
    return problems
