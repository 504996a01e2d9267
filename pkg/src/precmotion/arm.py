"""Sphere-approximated planar arm in a world of circular obstacles, with the
cost terms used by IK and trajectory optimization.

Shapes: joint batches are (B, n); sphere sets are (B, NS, 3) holding
(x, y, radius); sphere gradients are (B, NS, 2); closest-point fields are
(B, NS, 3) holding (depth, unit direction). Distances are meters, angles
radians.

The collision functional (squared hinge on signed distance, nearest obstacle
only) is a stand-in for the closed-source original.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

DEFAULT_LINKS = 7
DEFAULT_LINK_LENGTH = 0.3
DEFAULT_LIMIT = 2.9
RETRACT_FOLD = 2.6


def folded_retract(n: int) -> tuple[float, ...]:
    """Compact zig-zag posture pointing up; keeps the arm well inside its reach."""
    return (math.pi / 2,) + tuple(RETRACT_FOLD * (-1) ** k for k in range(n - 1))


@dataclass
class ArmModel:
    link_lengths: tuple[float, ...] = (DEFAULT_LINK_LENGTH,) * DEFAULT_LINKS
    joint_limits: tuple[tuple[float, float], ...] = ((-DEFAULT_LIMIT, DEFAULT_LIMIT),) * DEFAULT_LINKS
    spheres_per_link: int = 3
    sphere_radius: float = 0.05
    retract_config: tuple[float, ...] = folded_retract(DEFAULT_LINKS)

    lengths: np.ndarray = field(init=False, repr=False, compare=False)
    lower: np.ndarray = field(init=False, repr=False, compare=False)
    upper: np.ndarray = field(init=False, repr=False, compare=False)
    fracs: np.ndarray = field(init=False, repr=False, compare=False)
    pair_a: np.ndarray = field(init=False, repr=False, compare=False)
    pair_b: np.ndarray = field(init=False, repr=False, compare=False)
    link_pairs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.link_lengths = tuple(float(x) for x in self.link_lengths)
        self.joint_limits = tuple((float(lo), float(hi)) for lo, hi in self.joint_limits)
        self.retract_config = tuple(float(x) for x in self.retract_config)
        n = len(self.link_lengths)
        if n < 1 or any(x <= 0 for x in self.link_lengths):
            raise ValueError("link lengths must be positive")
        if len(self.joint_limits) != n or any(lo >= hi for lo, hi in self.joint_limits):
            raise ValueError("need one (lo, hi) with lo < hi per joint")
        if self.spheres_per_link < 1 or self.sphere_radius <= 0:
            raise ValueError("spheres_per_link >= 1 and sphere_radius > 0 required")
        if len(self.retract_config) != n:
            raise ValueError("retract_config has the wrong length")
        self.lengths = np.asarray(self.link_lengths, dtype=np.float64)
        self.lower = np.array([lo for lo, _ in self.joint_limits])
        self.upper = np.array([hi for _, hi in self.joint_limits])
        if not self.within_limits(np.asarray(self.retract_config)):
            raise ValueError("retract_config violates the joint limits")
        S = self.spheres_per_link
        self.fracs = (np.arange(S) + 0.5) / S
        # Sphere pairs on links at least two apart, grouped by link pair so
        # each link pair owns a contiguous block of S*S entries.
        self.link_pairs = np.array(
            [(i, j) for i in range(n) for j in range(i + 2, n)], dtype=np.int64
        ).reshape(-1, 2)
        k = np.arange(S)
        ka, kb = np.repeat(k, S), np.tile(k, S)
        self.pair_a = (self.link_pairs[:, :1] * S + ka).reshape(-1).astype(np.int64)
        self.pair_b = (self.link_pairs[:, 1:] * S + kb).reshape(-1).astype(np.int64)

    @property
    def n_joints(self) -> int:
        return len(self.link_lengths)

    @property
    def n_spheres(self) -> int:
        return self.n_joints * self.spheres_per_link

    @property
    def n_pairs(self) -> int:
        return int(self.pair_a.size)

    @property
    def reach(self) -> float:
        return float(self.lengths.sum())

    def within_limits(self, theta: np.ndarray) -> np.ndarray:
        return np.all((theta >= self.lower) & (theta <= self.upper), axis=-1)

    def to_dict(self) -> dict:
        return {
            "link_lengths": list(self.link_lengths),
            "joint_limits": [list(x) for x in self.joint_limits],
            "spheres_per_link": self.spheres_per_link,
            "sphere_radius": self.sphere_radius,
            "retract_config": list(self.retract_config),
        }

    @classmethod
    def from_dict(cls, data: dict) -> ArmModel:
        n = len(data.get("link_lengths", (DEFAULT_LINK_LENGTH,) * DEFAULT_LINKS))
        defaults = cls()
        return cls(
            link_lengths=data.get("link_lengths", defaults.link_lengths),
            joint_limits=data.get("joint_limits", ((-DEFAULT_LIMIT, DEFAULT_LIMIT),) * n),
            spheres_per_link=int(data.get("spheres_per_link", 3)),
            sphere_radius=float(data.get("sphere_radius", 0.05)),
            retract_config=data.get("retract_config", folded_retract(n)),
        )


@dataclass
class Environment:
    name: str
    obstacles: np.ndarray  # (K, 3): center x, center y, radius
    activation_margin: float = 0.03

    def __post_init__(self):
        self.obstacles = np.asarray(self.obstacles, dtype=np.float64).reshape(-1, 3)
        if np.any(self.obstacles[:, 2] <= 0):
            raise ValueError(f"environment {self.name!r}: obstacle radii must be positive")
        if self.activation_margin < 0:
            raise ValueError(f"environment {self.name!r}: activation_margin must be >= 0")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "activation_margin": self.activation_margin,
            "obstacles": [
                {"center": [float(x), float(y)], "radius": float(r)} for x, y, r in self.obstacles
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> Environment:
        obstacles = [(*o["center"], o["radius"]) for o in data.get("obstacles", [])]
        return cls(
            name=data["name"],
            obstacles=np.array(obstacles, dtype=np.float64).reshape(-1, 3),
            activation_margin=float(data.get("activation_margin", 0.03)),
        )


@dataclass(frozen=True)
class ProblemInstance:
    start_config: tuple[float, ...]
    goal_pose: tuple[float, float, float]  # x, y, orientation
    rng_seed: int

    def to_dict(self) -> dict:
        return {
            "start_config": list(self.start_config),
            "goal_pose": list(self.goal_pose),
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ProblemInstance:
        return cls(
            start_config=tuple(float(x) for x in data["start_config"]),
            goal_pose=tuple(float(x) for x in data["goal_pose"]),
            rng_seed=int(data["rng_seed"]),
        )


def load_json(path: str | Path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def load_model(path: str | Path) -> ArmModel:
    return ArmModel.from_dict(load_json(path))


def load_environment(path: str | Path) -> Environment:
    return Environment.from_dict(load_json(path))


def _batch(theta) -> np.ndarray:
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    return theta.reshape(1, -1) if theta.ndim == 1 else theta


def forward_kinematics(theta, model: ArmModel, dtype=np.float32):
    """Sphere centers along each link and the tip pose (x, y, angle)."""
    theta = _batch(theta)
    spheres = np.empty((theta.shape[0], model.n_spheres, 3), dtype=dtype)
    ee = np.empty((theta.shape[0], 3))
    kernels.fk(theta, model.lengths, model.fracs, model.sphere_radius, spheres, ee)
    return spheres, ee


def backward_kinematics(theta, grad_spheres, model: ArmModel, grad_ee=None) -> np.ndarray:
    theta = _batch(theta)
    grad_spheres = np.ascontiguousarray(grad_spheres)
    out = np.empty_like(theta)
    if grad_ee is None:
        kernels.bk(theta, model.lengths, model.fracs, grad_spheres, np.zeros((1, 3)), False, out)
    else:
        grad_ee = np.ascontiguousarray(grad_ee, dtype=np.float64).reshape(theta.shape[0], 3)
        kernels.bk(theta, model.lengths, model.fracs, grad_spheres, grad_ee, True, out)
    return out


def collision_cost(spheres: np.ndarray, env: Environment, model: ArmModel | None = None):
    """Returns ``(cost, field, grad_centers)``; cost is the per-item sum(p**2).

    Passing the model lets the kernel cull whole links; results are identical.
    """
    B, NS = spheres.shape[:2]
    group = model.spheres_per_link if model is not None and NS % model.spheres_per_link == 0 else 1
    cost = np.empty(B)
    fld = np.empty((B, NS, 3), dtype=spheres.dtype)
    kernels.collision(spheres, env.obstacles, env.activation_margin, group, cost, fld)
    grad = np.zeros((B, NS, 2), dtype=np.float64)
    kernels.field_to_grad(fld.reshape(-1, 3), 1.0, grad.reshape(-1, 2))
    return cost, fld, grad


def swept_collision_cost(trajectory, env: Environment, model: ArmModel, substeps: int = 2, dtype=np.float64):
    """Collision along ``trajectory`` (T, n) or (B, T, n).

    Returns per-item cost, the swept field (B, T, NS, 3) and the per-waypoint
    sphere gradient (B, T, NS, 2).
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim == 2:
        traj = traj[None]
    B, T, n = traj.shape
    spheres, _ = forward_kinematics(traj.reshape(B * T, n), model, dtype=dtype)
    spheres = spheres.reshape(B, T, model.n_spheres, 3)
    cost = np.empty(B)
    fld = np.empty((B, T, model.n_spheres, 3), dtype=dtype)
    kernels.swept(spheres, env.obstacles, env.activation_margin, int(substeps), model.spheres_per_link, cost, fld, True)
    grad = np.zeros((B, T, model.n_spheres, 2))
    kernels.field_to_grad(fld.reshape(-1, 3), 1.0, grad.reshape(-1, 2))
    return cost, fld, grad


def self_collision_cost(spheres: np.ndarray, model: ArmModel):
    B = spheres.shape[0]
    out_vec = np.zeros((B, model.n_pairs), dtype=spheres.dtype)
    active = np.empty(spheres.shape[0], dtype=np.bool_)
    kernels.self_penetration(spheres, model.link_pairs, model.spheres_per_link, out_vec, active)
    cost = np.empty(B)
    grad = np.zeros((B, spheres.shape[1], 2))
    kernels.self_cost_grad(spheres, model.pair_a, model.pair_b, out_vec, active, 1.0, cost, grad, True)
    return cost, out_vec, grad


def pose_cost(ee_pose, goal_pose, w_pos: float = 1.0, w_rot: float = 1.0):
    ee = _batch(ee_pose)
    goal = np.broadcast_to(np.asarray(goal_pose, dtype=np.float64), ee.shape).copy()
    cost = np.empty(ee.shape[0])
    grad = np.empty_like(ee)
    kernels.pose(ee, goal, float(w_pos), float(w_rot), cost, grad)
    return cost, grad


def bound_cost(theta, model: ArmModel):
    theta = _batch(theta)
    cost = np.empty(theta.shape[0])
    grad = np.empty_like(theta)
    kernels.bound(theta, model.lower, model.upper, cost, grad)
    return cost, grad


def sparsity_stats(tensor) -> float:
    """Fraction of exact zeros; an empty tensor counts as fully sparse."""
    tensor = np.asarray(tensor)
    if tensor.size == 0:
        return 1.0
    return float(tensor.size - np.count_nonzero(tensor)) / tensor.size


def wrap_angle(a):
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2 * np.pi)


def configs_free(theta, env: Environment, model: ArmModel, clearance: float = 0.0) -> np.ndarray:
    """Per-config check at float32: within joint limits, free of self
    penetration, with every sphere at least ``clearance`` from all obstacles."""
    theta = _batch(theta)
    spheres, _ = forward_kinematics(theta, model, dtype=np.float32)
    cost = np.empty(theta.shape[0])
    if env.obstacles.shape[0]:
        kernels.collision_cost_only(spheres, env.obstacles, float(clearance), model.spheres_per_link, cost)
        env_free = cost == 0.0
    else:
        env_free = np.ones(theta.shape[0], dtype=bool)
    out_vec = np.zeros((theta.shape[0], model.n_pairs), dtype=np.float32)
    active = np.empty(spheres.shape[0], dtype=np.bool_)
    kernels.self_penetration(spheres, model.link_pairs, model.spheres_per_link, out_vec, active)
    self_free = ~active
    return env_free & self_free & model.within_limits(theta)
