"""iLQG trajectory optimization for expert reaching policies and noisy
demonstration generation.

The solver is generic over an :class:`OCProblem` (dynamics + cost with
derivatives): a regularized backward pass (Levenberg-style diagonal shift on
the control Hessian) alternates with a backtracking line search on the
forward pass, so the accepted cost sequence is non-increasing. On a linear
system with quadratic cost it reduces to finite-horizon LQR after a single
iteration and the regularizer never activates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import env as envmod
from .env import (Demonstration, EnvConfig, Episode, Task, dynamics_jacobian,
                  dynamics_step, forward_kinematics, is_success, reset, step)

__all__ = ["OCProblem", "SolveStats", "ILQGController", "ilqg_solve_problem",
           "reach_problem", "torque_squash", "ilqg_solve", "generate_demo", "make_expert_demo"]


@dataclass
class OCProblem:
    horizon: int
    x0: np.ndarray
    dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dynamics_jac: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]
    cost: Callable[[np.ndarray, np.ndarray, int], float]
    cost_derivs: Callable[[np.ndarray, np.ndarray, int], tuple]
    final_cost: Callable[[np.ndarray], float]
    final_derivs: Callable[[np.ndarray], tuple]
    control_dim: int
    # candidate trajectories leaving the valid region are rejected by the
    # line search, exactly like non-finite costs
    state_valid: Callable[[np.ndarray], bool] | None = None


@dataclass
class SolveStats:
    iterations: int = 0
    costs: list[float] = field(default_factory=list)
    converged: bool = False
    reg_used: bool = False
    line_search_failed: bool = False


@dataclass
class ILQGController:
    """Time-varying affine feedback around a nominal trajectory.

    When ``squash`` is set, the optimization ran in a pre-actuator control
    space and the affine law is mapped through it, so emitted torques respect
    the actuator limit by construction.
    """
    K: np.ndarray        # (T, m, n) feedback gains
    k: np.ndarray        # (T, m) feedforward
    x_nom: np.ndarray    # (T+1, n)
    u_nom: np.ndarray    # (T, m)
    stats: SolveStats
    squash: Callable[[np.ndarray], np.ndarray] | None = None
    task_seed: int | None = None
    episode_seed: int | None = None
    goal: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return self.u_nom.shape[0]

    def action(self, t: int, x: np.ndarray) -> np.ndarray:
        u = self.u_nom[t] + self.k[t] + self.K[t] @ (x - self.x_nom[t])
        return u if self.squash is None else self.squash(u)


def _rollout_nominal(prob: OCProblem, u_seq: np.ndarray) -> tuple[np.ndarray, float]:
    xs = np.zeros((prob.horizon + 1, prob.x0.size))
    xs[0] = prob.x0
    total = 0.0
    for t in range(prob.horizon):
        total += prob.cost(xs[t], u_seq[t], t)
        xs[t + 1] = prob.dynamics(xs[t], u_seq[t])
    total += prob.final_cost(xs[-1])
    return xs, total


def _rollout_feedback(prob: OCProblem, x_nom, u_nom, K, k, eps: float):
    """Candidate rollout; cost is +inf for non-finite or invalid states."""
    xs = np.zeros_like(x_nom)
    us = np.zeros_like(u_nom)
    xs[0] = prob.x0
    total = 0.0
    with np.errstate(all="ignore"):
        for t in range(prob.horizon):
            us[t] = u_nom[t] + eps * k[t] + K[t] @ (xs[t] - x_nom[t])
            total += prob.cost(xs[t], us[t], t)
            xs[t + 1] = prob.dynamics(xs[t], us[t])
            if not np.all(np.isfinite(xs[t + 1])) or (
                    prob.state_valid is not None and not prob.state_valid(xs[t + 1])):
                return xs, us, np.inf
        total += prob.final_cost(xs[-1])
    return xs, us, total


def _backward_pass(prob: OCProblem, xs, us, reg: float):
    T, m, n = prob.horizon, prob.control_dim, prob.x0.size
    K = np.zeros((T, m, n))
    k = np.zeros((T, m))
    Vx, Vxx = prob.final_derivs(xs[-1])
    dv1 = dv2 = 0.0
    for t in reversed(range(T)):
        lx, lu, lxx, luu, lux = prob.cost_derivs(xs[t], us[t], t)
        A, B = prob.dynamics_jac(xs[t], us[t])
        Qx = lx + A.T @ Vx
        Qu = lu + B.T @ Vx
        Qxx = lxx + A.T @ Vxx @ A
        Quu = luu + B.T @ Vxx @ B + reg * np.eye(m)
        Qux = lux + B.T @ Vxx @ A
        try:
            chol = np.linalg.cholesky(Quu)
        except np.linalg.LinAlgError:
            return None
        rhs = np.column_stack([Qu, Qux])
        sol = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        k[t] = -sol[:, 0]
        K[t] = -sol[:, 1:]
        dv1 += k[t] @ Qu
        dv2 += 0.5 * k[t] @ Quu @ k[t]
        Vx = Qx + K[t].T @ Quu @ k[t] + K[t].T @ Qu + Qux.T @ k[t]
        Vxx = Qxx + K[t].T @ Quu @ K[t] + K[t].T @ Qux + Qux.T @ K[t]
        Vxx = 0.5 * (Vxx + Vxx.T)
    return K, k, dv1, dv2


def ilqg_solve_problem(prob: OCProblem, iterations: int = 30, tol: float = 1e-8,
                       max_backtracks: int = 8, reg_max: float = 1e8
                       ) -> tuple[ILQGController, SolveStats]:
    """Run iLQG from a zero-control warm start.

    If the line search cannot find a decrease after ``max_backtracks`` steps
    and the regularizer is exhausted, returns the best trajectory so far with
    ``stats.line_search_failed`` set.
    """
    stats = SolveStats()
    u_nom = np.zeros((prob.horizon, prob.control_dim))
    x_nom, cost = _rollout_nominal(prob, u_nom)
    stats.costs.append(cost)
    reg = 0.0
    K = np.zeros((prob.horizon, prob.control_dim, prob.x0.size))
    k = np.zeros((prob.horizon, prob.control_dim))

    for it in range(iterations):
        stats.iterations = it + 1
        bp = _backward_pass(prob, x_nom, u_nom, reg)
        while bp is None:
            reg = max(reg * 10.0, 1e-6)
            stats.reg_used = True
            if reg > reg_max:
                stats.line_search_failed = True
                ctrl = ILQGController(K=K, k=k, x_nom=x_nom, u_nom=u_nom, stats=stats)
                return ctrl, stats
            bp = _backward_pass(prob, x_nom, u_nom, reg)
        K, k, dv1, dv2 = bp

        if abs(dv1) + abs(dv2) < tol:
            stats.converged = True
            break

        improved = False
        eps = 1.0
        for _ in range(max_backtracks):
            xs, us, new_cost = _rollout_feedback(prob, x_nom, u_nom, K, k, eps)
            if np.isfinite(new_cost) and new_cost < cost:
                x_nom, u_nom, cost = xs, us, new_cost
                stats.costs.append(cost)
                improved = True
                break
            eps *= 0.5
        if improved:
            reg = 0.0 if reg < 1e-6 else reg / 10.0
        else:
            reg = max(reg * 10.0, 1e-6)
            stats.reg_used = True
            if reg > reg_max:
                stats.line_search_failed = True
                break

    # final gains consistent with the accepted nominal trajectory
    bp = _backward_pass(prob, x_nom, u_nom, max(reg, 0.0))
    if bp is not None:
        K, k = bp[0], bp[1]
    ctrl = ILQGController(K=K, k=k, x_nom=x_nom, u_nom=u_nom, stats=stats)
    return ctrl, stats


# ---------------------------------------------------------------------------
# the reaching problem

def _ee_jacobian(cfg: EnvConfig, q: np.ndarray) -> np.ndarray:
    l1, l2 = cfg.link_lengths
    s1, c1 = np.sin(q[0]), np.cos(q[0])
    s12, c12 = np.sin(q[0] + q[1]), np.cos(q[0] + q[1])
    return np.array([[-l1 * s1 - l2 * s12, -l2 * s12],
                     [l1 * c1 + l2 * c12, l2 * c12]])


def torque_squash(cfg: EnvConfig):
    """Smooth actuator map ``u = tau_max * tanh(v / tau_max)``; near-identity
    for small commands, saturating at the torque limit."""
    tm = cfg.torque_limit

    def squash(v):
        return tm * np.tanh(v / tm)

    def dsquash(v):
        return 1.0 - np.tanh(v / tm) ** 2

    return squash, dsquash


def reach_problem(cfg: EnvConfig, goal: np.ndarray, x0: np.ndarray,
                  horizon: int, w_ee: float = 1.0, w_u: float = 1e-3,
                  terminal_mult: float = 10.0) -> OCProblem:
    """Reaching cost: squared distance to goal plus a control penalty
    1e-3 ||u||^2 on the applied torque, terminal distance term weighted 10x.

    The optimization variable is the pre-actuator command ``v`` with
    ``u = tau_max tanh(v / tau_max)``, so solutions never rely on torques the
    environment would clamp (an unconstrained optimum here can demand several
    times the actuator limit and destabilize the closed loop). Joint speeds
    above a cruise threshold incur a quadratic hinge penalty and candidates
    beyond the integrator's stable envelope are rejected outright: the
    discrete dynamics self-amplify once the quadratic Coriolis terms outgrow
    the linear damping, so fast solutions are integrator artifacts, not
    skill. Hessians use the Gauss-Newton approximation, positive
    semi-definite by construction.
    """
    squash, dsquash = torque_squash(cfg)
    dq_soft, w_dq = 6.0, 0.05     # hinge threshold and weight
    dq_hard = 16.0                # stability backstop

    def ee_terms(q, weight):
        r = forward_kinematics(cfg, q) - goal
        J = _ee_jacobian(cfg, q)
        lx = np.zeros(4)
        lx[:2] = 2 * weight * J.T @ r
        lxx = np.zeros((4, 4))
        lxx[:2, :2] = 2 * weight * J.T @ J
        return weight * float(r @ r), lx, lxx

    def speed_excess(dq):
        return np.maximum(np.abs(dq) - dq_soft, 0.0)

    def cost(x, v, t):
        u = squash(v)
        excess = speed_excess(x[2:])
        return (ee_terms(x[:2], w_ee)[0] + w_u * float(u @ u)
                + w_dq * float(excess @ excess))

    def cost_derivs(x, v, t):
        _, lx, lxx = ee_terms(x[:2], w_ee)
        excess = speed_excess(x[2:])
        lx[2:] = 2 * w_dq * np.sign(x[2:]) * excess
        lxx[2:, 2:] = np.diag(2 * w_dq * (excess > 0))
        u, sp = squash(v), dsquash(v)
        lu = 2 * w_u * u * sp
        luu = np.diag(2 * w_u * sp * sp)
        return lx, lu, lxx, luu, np.zeros((2, 4))

    def final_cost(x):
        return ee_terms(x[:2], terminal_mult * w_ee)[0]

    def final_derivs(x):
        _, lx, lxx = ee_terms(x[:2], terminal_mult * w_ee)
        return lx, lxx

    def dyn(x, v):
        return dynamics_step(cfg, x, squash(v))

    def dyn_jac(x, v):
        A, B = dynamics_jacobian(cfg, x, squash(v))
        return A, B * dsquash(v)[None, :]

    return OCProblem(horizon=horizon, x0=x0, dynamics=dyn, dynamics_jac=dyn_jac,
                     cost=cost, cost_derivs=cost_derivs,
                     final_cost=final_cost, final_derivs=final_derivs,
                     control_dim=2,
                     state_valid=lambda x: bool(np.abs(x[2:]).max() <= dq_hard))


def ilqg_solve(cfg: EnvConfig, task: Task, episode_seed: int,
               horizon: int | None = None, iterations: int = 40
               ) -> tuple[ILQGController, Episode]:
    """Solve the reaching problem for one episode of a task (the goal is the
    episode's target position, known to the expert)."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    horizon = cfg.horizon if horizon is None else horizon
    ep, state, _ = reset(cfg, task, episode_seed)
    prob = reach_problem(cfg, ep.goal, state.vector(), horizon)
    ctrl, _ = ilqg_solve_problem(prob, iterations=iterations)
    ctrl.squash = torque_squash(cfg)[0]
    ctrl.task_seed = task.seed
    ctrl.episode_seed = int(episode_seed)
    ctrl.goal = ep.goal.copy()
    return ctrl, ep


def generate_demo(cfg: EnvConfig, controller: ILQGController, task: Task,
                  noise_sigma: float, episode_seed: int | None = None,
                  modality: str = "full") -> Demonstration:
    """Closed-loop rollout of the controller with Gaussian torque noise.

    ``u_t = u_nom_t + k_t + K_t (x_t - x_nom_t) + eps_t`` with
    ``eps_t ~ N(0, sigma^2 I)`` drawn from a generator derived from the task
    and episode seeds, so demonstrations are reproducible bit-for-bit.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if modality not in envmod.MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    episode_seed = controller.episode_seed if episode_seed is None else episode_seed
    rng = envmod._rng(envmod._TAG_NOISE, task.seed, episode_seed)

    ep, state, obs = reset(cfg, task, episode_seed)
    T = controller.horizon
    actions = np.zeros((T, 2))
    ee = np.zeros((T + 1, 2))
    ee[0] = forward_kinematics(cfg, state.q)
    state_obs = None if cfg.vision else np.zeros((T, cfg.state_dim))
    images = np.zeros((T, 3, *cfg.image_hw)) if cfg.vision else None
    configs = np.zeros((T, 4)) if cfg.vision else None

    for t in range(T):
        if cfg.vision:
            images[t] = obs.image
            configs[t] = obs.config
        else:
            state_obs[t] = obs.state
        u = controller.action(t, state.vector())
        if noise_sigma > 0:
            u = u + noise_sigma * rng.standard_normal(2)
        u = np.clip(u, -cfg.torque_limit, cfg.torque_limit)
        actions[t] = u
        state, obs = step(cfg, ep, state, u)
        ee[t + 1] = forward_kinematics(cfg, state.q)

    demo = Demonstration(
        task_seed=task.seed, split=task.split, episode_seed=int(episode_seed),
        modality=modality, actions=actions, ee=ee, state_obs=state_obs,
        images=images, configs=configs, goal=ep.goal.copy(),
        success=is_success(ee, ep.goal))
    return apply_modality(demo, modality)


def apply_modality(demo: Demonstration, modality: str) -> Demonstration:
    """Strip demonstration fields according to the modality tag: actions are
    present only for ``full``; ``video`` additionally zeroes the robot
    configuration stream."""
    if modality not in envmod.MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    demo.modality = modality
    if modality != "full":
        demo.actions = None
    if modality == "video" and demo.configs is not None:
        demo.configs = np.zeros_like(demo.configs)
    return demo


def make_expert_demo(cfg: EnvConfig, task: Task, episode_seed: int,
                     noise_sigma: float = 0.05, modality: str = "full",
                     horizon: int | None = None, iterations: int = 40
                     ) -> tuple[Demonstration, ILQGController]:
    """Solve the episode's reaching problem and roll out one noisy demo."""
    ctrl, _ = ilqg_solve(cfg, task, episode_seed, horizon=horizon, iterations=iterations)
    demo = generate_demo(cfg, ctrl, task, noise_sigma, episode_seed, modality)
    return demo, ctrl
