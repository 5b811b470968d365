"""Planar two-link reaching environment and task distribution.

A torque-controlled two-link arm, base at the center of a 0.6 x 0.6 m arena,
must reach the target-colored object among two distractors. Tasks fix the
colors; object positions are re-sampled every episode. Meta-test target
colors come from a color region disjoint (by at least 0.1 in RGB) from the
meta-train region. Everything is a pure function of (task seed, episode
seed, action sequence).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "EnvConfig", "Task", "ArmState", "Observation", "Episode", "Demonstration",
    "sample_task", "reset", "step", "render", "is_success", "rollout",
    "forward_kinematics", "dynamics_step", "dynamics_jacobian",
]

# seed-derivation namespaces
_TAG_TASK, _TAG_EPISODE, _TAG_NOISE, _TAG_ORDER = 101, 202, 303, 404

SUCCESS_RADIUS = 0.05
SUCCESS_WINDOW = 10

MODALITIES = ("full", "video+state", "video")


@dataclass(frozen=True)
class EnvConfig:
    vision: bool = False
    image_hw: tuple[int, int] = (32, 40)
    horizon: int = 50
    dt: float = 0.05
    torque_limit: float = 1.0
    link_lengths: tuple[float, float] = (0.1, 0.1)
    link_masses: tuple[float, float] = (1.0, 1.0)
    damping: float = 0.1
    arena: float = 0.6
    n_distractors: int = 2
    object_radius: float = 0.03          # rendered disc radius, meters
    reach_range: tuple[float, float] = (0.08, 0.19)   # object distance from base
    min_object_sep: float = 0.05
    min_color_sep: float = 0.1
    rest_pose: tuple[float, float] = (np.pi / 4, np.pi / 2)

    def __post_init__(self):
        if self.horizon < SUCCESS_WINDOW:
            raise ValueError(f"horizon must be >= {SUCCESS_WINDOW}")
        reach = sum(self.link_lengths)
        if self.reach_range[1] >= reach:
            raise ValueError("objects must stay inside the reachable disc")

    @property
    def base(self) -> np.ndarray:
        return np.array([self.arena / 2, self.arena / 2])

    @property
    def n_objects(self) -> int:
        return self.n_distractors + 1

    @property
    def state_dim(self) -> int:
        # joint angles, end-effector position, per-object (position, color)
        return 4 + self.n_objects * 5

    @property
    def config_dim(self) -> int:
        return 4


@dataclass(frozen=True)
class Task:
    target_color: np.ndarray          # (3,) RGB in [0, 1]
    distractor_colors: np.ndarray     # (n_distractors, 3)
    seed: int
    split: str                        # "meta-train" | "meta-test"


@dataclass
class ArmState:
    q: np.ndarray                     # joint angles, radians
    dq: np.ndarray                    # joint velocities, rad/s

    def vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.dq])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "ArmState":
        return cls(q=x[:2].copy(), dq=x[2:].copy())


@dataclass
class Observation:
    state: np.ndarray | None = None    # (state_dim,) in non-vision mode
    image: np.ndarray | None = None    # (3, H, W) in vision mode
    config: np.ndarray | None = None   # (4,) joint angles + end-effector


@dataclass(frozen=True)
class Episode:
    """Per-episode context: object layout and observation slot order."""
    cfg: EnvConfig
    task: Task
    positions: np.ndarray      # (n_objects, 2), row 0 is the target
    slot_order: np.ndarray     # permutation mapping observation slot -> object
    episode_seed: int

    @property
    def goal(self) -> np.ndarray:
        return self.positions[0]


@dataclass
class Demonstration:
    """A fixed-horizon trajectory with observations and (optionally) actions."""
    task_seed: int
    split: str
    episode_seed: int
    modality: str = "full"
    actions: np.ndarray | None = None       # (T, 2)
    ee: np.ndarray | None = None            # (T+1, 2)
    state_obs: np.ndarray | None = None     # (T, state_dim), non-vision
    images: np.ndarray | None = None        # (T, 3, H, W), vision
    configs: np.ndarray | None = None       # (T, 4), vision
    goal: np.ndarray | None = None
    success: bool = False

    @property
    def horizon(self) -> int:
        if self.state_obs is not None:
            return self.state_obs.shape[0]
        return self.images.shape[0]

    def policy_inputs(self):
        if self.state_obs is not None:
            return self.state_obs
        return (self.images, self.configs)

    def final_observation(self):
        if self.state_obs is not None:
            return self.state_obs[-1]
        return (self.images[-1], self.configs[-1])


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def _split_code(split: str) -> int:
    if split not in ("meta-train", "meta-test"):
        raise ValueError(f"unknown split {split!r}")
    return 0 if split == "meta-train" else 1


def _sample_color(rng: np.random.Generator, split: str) -> np.ndarray:
    """Target colors: red channel in [0, 0.45] for meta-train, [0.55, 1] for
    meta-test. The 0.1 gap keeps the two target-color regions at least 0.1
    apart in RGB; distractors are unrestricted."""
    c = rng.uniform(0.0, 1.0, size=3)
    c[0] = rng.uniform(0.0, 0.45) if split == "meta-train" else rng.uniform(0.55, 1.0)
    return c


def sample_task(cfg: EnvConfig, seed: int, split: str) -> Task:
    """Deterministic task draw: target color from the split's region, then
    distractor colors rejected until pairwise RGB distance >= min_color_sep."""
    rng = _rng(_TAG_TASK, _split_code(split), seed)
    target = _sample_color(rng, split)
    chosen = [target]
    while len(chosen) < cfg.n_objects:
        c = rng.uniform(0.0, 1.0, size=3)
        if all(np.linalg.norm(c - other) >= cfg.min_color_sep for other in chosen):
            chosen.append(c)
    return Task(target_color=target, distractor_colors=np.array(chosen[1:]),
                seed=int(seed), split=split)


def _sample_positions(cfg: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    """Object positions in the reachable annulus around the base, pairwise
    separated, all inside the arena."""
    lo, hi = cfg.reach_range
    points: list[np.ndarray] = []
    while len(points) < cfg.n_objects:
        r = np.sqrt(rng.uniform(lo ** 2, hi ** 2))
        phi = rng.uniform(0.0, 2 * np.pi)
        p = cfg.base + r * np.array([np.cos(phi), np.sin(phi)])
        if all(np.linalg.norm(p - other) >= cfg.min_object_sep for other in points):
            points.append(p)
    return np.array(points)


def forward_kinematics(cfg: EnvConfig, q: np.ndarray) -> np.ndarray:
    l1, l2 = cfg.link_lengths
    return cfg.base + np.array([
        l1 * np.cos(q[0]) + l2 * np.cos(q[0] + q[1]),
        l1 * np.sin(q[0]) + l2 * np.sin(q[0] + q[1]),
    ])


def _observe(ep: Episode, state: ArmState) -> Observation:
    cfg = ep.cfg
    ee = forward_kinematics(cfg, state.q)
    config = np.concatenate([state.q, ee])
    if cfg.vision:
        return Observation(image=render(cfg, ep, state), config=config)
    parts = [config]
    colors = np.vstack([ep.task.target_color[None], ep.task.distractor_colors])
    for obj in ep.slot_order:
        parts.append(ep.positions[obj])
        parts.append(colors[obj])
    return Observation(state=np.concatenate(parts))


def reset(cfg: EnvConfig, task: Task, episode_seed: int) -> tuple[Episode, ArmState, Observation]:
    """Arm at rest at the canonical pose; object positions and the observation
    slot order re-sampled from the episode seed."""
    rng = _rng(_TAG_EPISODE, task.seed, episode_seed)
    positions = _sample_positions(cfg, rng)
    order_rng = _rng(_TAG_ORDER, task.seed, episode_seed)
    slot_order = order_rng.permutation(cfg.n_objects)
    ep = Episode(cfg=cfg, task=task, positions=positions,
                 slot_order=slot_order, episode_seed=int(episode_seed))
    state = ArmState(q=np.array(cfg.rest_pose), dq=np.zeros(2))
    return ep, state, _observe(ep, state)


# ---------------------------------------------------------------------------
# dynamics: point masses at the link ends, viscous joint damping, no gravity

def _mass_coriolis(cfg: EnvConfig, q2: float, dq: np.ndarray):
    l1, l2 = cfg.link_lengths
    m1, m2 = cfg.link_masses
    a = (m1 + m2) * l1 ** 2 + m2 * l2 ** 2
    b = m2 * l1 * l2
    d = m2 * l2 ** 2
    c2, s2 = np.cos(q2), np.sin(q2)
    M = np.array([[a + 2 * b * c2, d + b * c2],
                  [d + b * c2, d]])
    cor = np.array([-b * s2 * (2 * dq[0] * dq[1] + dq[1] ** 2),
                    b * s2 * dq[0] ** 2])
    return M, cor, b, s2, c2


def dynamics_step(cfg: EnvConfig, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Semi-implicit Euler step of the unclamped dynamics; x = (q, dq)."""
    q, dq = x[:2], x[2:]
    M, cor, _, _, _ = _mass_coriolis(cfg, q[1], dq)
    accel = np.linalg.solve(M, u - cor - cfg.damping * dq)
    dq_next = dq + cfg.dt * accel
    q_next = q + cfg.dt * dq_next
    return np.concatenate([q_next, dq_next])


def dynamics_jacobian(cfg: EnvConfig, x: np.ndarray, u: np.ndarray):
    """Analytic Jacobians (A, B) of dynamics_step at (x, u)."""
    q, dq = x[:2], x[2:]
    M, cor, b, s2, c2 = _mass_coriolis(cfg, q[1], dq)
    Minv = np.linalg.inv(M)
    f = u - cor - cfg.damping * dq
    accel = Minv @ f

    dcor_ddq = np.array([[-2 * b * s2 * dq[1], -2 * b * s2 * (dq[0] + dq[1])],
                         [2 * b * s2 * dq[0], 0.0]])
    dcor_dq2 = np.array([-b * c2 * (2 * dq[0] * dq[1] + dq[1] ** 2),
                         b * c2 * dq[0] ** 2])
    dM_dq2 = np.array([[-2 * b * s2, -b * s2],
                       [-b * s2, 0.0]])

    dacc_ddq = Minv @ (-dcor_ddq - cfg.damping * np.eye(2))
    dacc_dq = np.zeros((2, 2))
    dacc_dq[:, 1] = Minv @ (-dcor_dq2 - dM_dq2 @ accel)

    dt = cfg.dt
    ddq_dq = dt * dacc_dq
    ddq_ddq = np.eye(2) + dt * dacc_ddq
    A = np.block([[np.eye(2) + dt * ddq_dq, dt * ddq_ddq],
                  [ddq_dq, ddq_ddq]])
    B = np.vstack([dt ** 2 * Minv, dt * Minv])
    return A, B


def step(cfg: EnvConfig, ep: Episode, state: ArmState,
         torque: np.ndarray) -> tuple[ArmState, Observation]:
    """Advance one timestep; torques are clamped to the actuator limit."""
    torque = np.asarray(torque, dtype=np.float64)
    if not np.all(np.isfinite(torque)):
        raise FloatingPointError("non-finite torque")
    u = np.clip(torque, -cfg.torque_limit, cfg.torque_limit)
    x = dynamics_step(cfg, state.vector(), u)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("simulator divergence")
    nxt = ArmState.from_vector(x)
    return nxt, _observe(ep, nxt)


# ---------------------------------------------------------------------------
# rendering

_pixel_grid_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _pixel_grid(cfg: EnvConfig):
    key = (cfg.image_hw, cfg.arena)
    if key not in _pixel_grid_cache:
        h, w = cfg.image_hw
        xs = (np.arange(w) + 0.5) * (cfg.arena / w)
        ys = cfg.arena - (np.arange(h) + 0.5) * (cfg.arena / h)   # row 0 on top
        _pixel_grid_cache[key] = np.meshgrid(xs, ys)
    return _pixel_grid_cache[key]


def _segment_mask(px, py, p0, p1, halfwidth):
    d = p1 - p0
    t = ((px - p0[0]) * d[0] + (py - p0[1]) * d[1]) / max(float(d @ d), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (p0[0] + t * d[0]), py - (p0[1] + t * d[1])) <= halfwidth


def render(cfg: EnvConfig, ep: Episode, state: ArmState) -> np.ndarray:
    """Deterministic rasterization: colored discs for objects on a black
    background, the arm drawn as two light-gray segments underneath."""
    h, w = cfg.image_hw
    px, py = _pixel_grid(cfg)
    img = np.zeros((3, h, w))

    l1, _ = cfg.link_lengths
    elbow = cfg.base + l1 * np.array([np.cos(state.q[0]), np.sin(state.q[0])])
    ee = forward_kinematics(cfg, state.q)
    arm = _segment_mask(px, py, cfg.base, elbow, 0.01) | _segment_mask(px, py, elbow, ee, 0.01)
    img[:, arm] = 0.8

    colors = np.vstack([ep.task.target_color[None], ep.task.distractor_colors])
    for obj in ep.slot_order:          # fixed draw order per episode
        mask = np.hypot(px - ep.positions[obj, 0], py - ep.positions[obj, 1]) <= cfg.object_radius
        img[:, mask] = colors[obj][:, None]
    return img


# ---------------------------------------------------------------------------
# evaluation helpers

def is_success(ee_trajectory: np.ndarray, goal: np.ndarray,
               radius: float = SUCCESS_RADIUS, window: int = SUCCESS_WINDOW) -> bool:
    """True iff the end-effector comes within ``radius`` of the goal at some
    point during the final ``window`` timesteps."""
    ee = np.asarray(ee_trajectory, dtype=np.float64)
    if ee.shape[0] < window:
        raise ValueError(f"trajectory shorter than the {window}-step success window")
    dists = np.linalg.norm(ee[-window:] - np.asarray(goal), axis=1)
    return bool(np.any(dists <= radius))


def rollout(cfg: EnvConfig, policy, task: Task, episode_seed: int,
            horizon: int | None = None) -> Demonstration:
    """Closed-loop rollout of ``policy(observation, state) -> torque``.

    Records observations, applied (clamped) torques, and end-effector
    positions; scores success against the episode's goal.
    """
    horizon = cfg.horizon if horizon is None else horizon
    if horizon < SUCCESS_WINDOW:
        raise ValueError(f"horizon must be >= {SUCCESS_WINDOW}")
    ep, state, obs = reset(cfg, task, episode_seed)
    actions = np.zeros((horizon, 2))
    ee = np.zeros((horizon + 1, 2))
    ee[0] = forward_kinematics(cfg, state.q)
    state_obs = None if cfg.vision else np.zeros((horizon, cfg.state_dim))
    images = np.zeros((horizon, 3, *cfg.image_hw)) if cfg.vision else None
    configs = np.zeros((horizon, 4)) if cfg.vision else None

    for t in range(horizon):
        if cfg.vision:
            images[t] = obs.image
            configs[t] = obs.config
        else:
            state_obs[t] = obs.state
        u = np.clip(np.asarray(policy(obs, state), dtype=np.float64),
                    -cfg.torque_limit, cfg.torque_limit)
        actions[t] = u
        state, obs = step(cfg, ep, state, u)
        ee[t + 1] = forward_kinematics(cfg, state.q)

    return Demonstration(
        task_seed=task.seed, split=task.split, episode_seed=int(episode_seed),
        modality="full", actions=actions, ee=ee, state_obs=state_obs,
        images=images, configs=configs, goal=ep.goal.copy(),
        success=is_success(ee, ep.goal))
