"""Finite-difference verification suites for every backward path: layers,
full policies (both modalities), baselines, and the meta-gradient through the
adaptation step for all three inner losses.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import (constant, differentiable_sgd_step, fd_gradient,
                       gradient, mul, nsum)
from .baselines import (contextual_arch, contextual_forward, init_lstm_params,
                        lstm_arch, lstm_forward)
from .env import Demonstration
from .layers import (bias_transform, conv2d, dense, layer_norm,
                     spatial_soft_argmax)
from .meta import TrainConfig, bc_loss, meta_loss
from .policy import ArchitectureConfig, init_params, param_count, policy_forward

__all__ = ["CheckResult", "rel_err", "check_layers", "check_policy",
           "check_baselines", "check_meta", "check_quadratic_special_case",
           "run_all", "TINY_ARCH", "MINI_VISION_ARCH"]

DEFAULT_THRESHOLD = 1e-4

TINY_ARCH = ArchitectureConfig(vision=False, fc_layers=3, fc_width=8,
                               bias_dim=2, state_dim=7, action_dim=2)
MINI_VISION_ARCH = ArchitectureConfig(vision=True, image_hw=(8, 8),
                                      image_channels=2, conv_layers=2,
                                      conv_filters=2, conv_kernel=3,
                                      conv_stride=2, fc_layers=3, fc_width=8,
                                      bias_dim=2, config_dim=4, action_dim=2)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    threshold: float = DEFAULT_THRESHOLD

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Scale-invariant worst-case disagreement between two gradients."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def _check_scalar_graph(build, params: dict[str, np.ndarray], eps=1e-5) -> float:
    """Worst relative error between autodiff and central differences for a
    scalar-valued graph over the named parameters."""
    leaves = {k: constant(v, name=k) for k, v in params.items()}
    grads = gradient(build(leaves), leaves)
    worst = 0.0
    for k, v in params.items():
        def f(x, _k=k):
            probe = {kk: constant(vv) for kk, vv in params.items()}
            probe[_k] = constant(x)
            return float(build(probe).value)
        worst = max(worst, rel_err(grads[k].value, fd_gradient(f, v, eps)))
    return worst


def check_layers(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((5, 3))
    b = rng.standard_normal(3)
    r = rng.standard_normal((4, 3))
    results.append(CheckResult("dense", _check_scalar_graph(
        lambda p: nsum(mul(dense(p["x"], p["w"], p["b"]), r)),
        {"x": x, "w": w, "b": b}), 1e-6))

    img = rng.standard_normal((2, 3, 7, 6))
    ker = rng.standard_normal((4, 3, 3, 3))
    rc = rng.standard_normal((2, 4, 3, 2))
    results.append(CheckResult("conv2d", _check_scalar_graph(
        lambda p: nsum(mul(conv2d(p["img"], p["ker"], 2), rc)),
        {"img": img, "ker": ker}), 1e-6))

    xs = 2.0 + rng.standard_normal((3, 9))
    g = rng.standard_normal(9)
    be = rng.standard_normal(9)
    rn = rng.standard_normal((3, 9))
    results.append(CheckResult("layer_norm", _check_scalar_graph(
        lambda p: nsum(mul(layer_norm(p["x"], p["g"], p["b"]), rn)),
        {"x": xs, "g": g, "b": be}), 1e-5))

    feats = rng.standard_normal((2, 3, 5, 4))
    rs = rng.standard_normal((2, 6))
    results.append(CheckResult("spatial_soft_argmax", _check_scalar_graph(
        lambda p: nsum(mul(spatial_soft_argmax(p["f"]), rs)), {"f": feats}), 1e-6))

    z = rng.standard_normal(3)
    w1 = rng.standard_normal((5, 4))
    w2 = rng.standard_normal((3, 4))
    bb = rng.standard_normal(4)
    xb = rng.standard_normal((2, 5))
    rb = rng.standard_normal((2, 4))
    results.append(CheckResult("bias_transform", _check_scalar_graph(
        lambda p: nsum(mul(bias_transform(p["x"], p["z"], p["w1"], p["w2"], p["b"]), rb)),
        {"x": xb, "z": z, "w1": w1, "w2": w2, "b": bb}), 1e-6))
    return results


def _random_demo(arch: ArchitectureConfig, rng, horizon=4) -> Demonstration:
    if arch.vision:
        obs = dict(images=rng.uniform(0, 1, (horizon, arch.image_channels, *arch.image_hw)),
                   configs=rng.standard_normal((horizon, arch.config_dim)))
    else:
        obs = dict(state_obs=rng.standard_normal((horizon, arch.state_dim)))
    return Demonstration(task_seed=0, split="meta-train", episode_seed=0,
                         actions=0.3 * rng.standard_normal((horizon, arch.action_dim)),
                         **obs)


def check_policy(arch: ArchitectureConfig, name: str, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    params = init_params(arch, rng)
    demo = _random_demo(arch, rng)
    err = _check_scalar_graph(lambda p: bc_loss(arch, p, demo), params)
    return CheckResult(f"policy[{name}]", err, 1e-5)


def check_baselines(seed: int = 2) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    cx_arch = contextual_arch(TINY_ARCH)
    params = init_params(cx_arch, rng)
    demo = _random_demo(TINY_ARCH, rng)
    query = rng.standard_normal((3, TINY_ARCH.state_dim))
    target = rng.standard_normal((3, 2))

    def cx_loss(p):
        d = contextual_forward(cx_arch, p, demo.final_observation(), query) - target
        return nsum(mul(d, d))

    results.append(CheckResult("contextual", _check_scalar_graph(cx_loss, params), 1e-6))

    ls_arch, _ = lstm_arch(TINY_ARCH, 8)
    lp = init_lstm_params(ls_arch, 8, rng)
    ldemo = _random_demo(TINY_ARCH, rng, horizon=3)

    def lstm_loss(p):
        d = lstm_forward(ls_arch, 8, p, ldemo, query) - target
        return nsum(mul(d, d))

    results.append(CheckResult("lstm", _check_scalar_graph(lstm_loss, lp), 1e-5))
    return results


def check_meta(arch: ArchitectureConfig, inner_loss: str, name: str,
               seed: int = 3, alpha: float = 0.05) -> CheckResult:
    """Finite differences of the full composed objective (adapt, then score
    the validation demo), so the oracle includes the second-order term."""
    rng = np.random.default_rng(seed)
    two_head = inner_loss in ("two-head", "action-free")
    net = replace(arch, two_head=two_head)
    params = init_params(net, rng)
    for k in params:    # generic position so ReLU masks sit away from zero
        params[k] = params[k] + 0.05 * rng.standard_normal(params[k].shape)
    assert param_count(params) <= 500, "meta-gradient checks are sized for <= 500 params"
    tc = TrainConfig(inner_lr=alpha, inner_steps=1, inner_loss=inner_loss,
                     meta_clip=None)
    train_demo = _random_demo(net, rng)
    val_demo = _random_demo(net, rng)
    batch = [([train_demo], val_demo)]
    err = _check_scalar_graph(lambda p: meta_loss(net, tc, p, batch), params, eps=1e-5)
    return CheckResult(f"meta[{name}:{inner_loss}]", err, DEFAULT_THRESHOLD)


def check_quadratic_special_case(alpha: float = 0.3) -> CheckResult:
    """Inner and outer loss 0.5 * ||theta||^2: after one step the composed
    objective is 0.5 (1 - alpha)^2 ||theta||^2, so the meta-gradient must be
    (1 - alpha)^2 theta to round-off."""
    theta = np.array([1.5, -2.0, 0.25])
    leaves = {"theta": constant(theta, name="theta")}

    def half_sq(nodes):
        return mul(nsum(mul(nodes["theta"], nodes["theta"])), 0.5)

    stepped = differentiable_sgd_step(leaves, half_sq(leaves), alpha)
    outer = half_sq(stepped)
    g = gradient(outer, leaves)["theta"].value
    return CheckResult("meta[quadratic]", rel_err(g, (1 - alpha) ** 2 * theta), 1e-10)


def run_all(include_vision: bool = True) -> list[CheckResult]:
    results = check_layers()
    results.append(check_policy(TINY_ARCH, "state"))
    if include_vision:
        results.append(check_policy(MINI_VISION_ARCH, "vision"))
        results.append(check_policy(replace(MINI_VISION_ARCH, flatten_conv=False),
                                    "vision-softargmax"))
    results.extend(check_baselines())
    for kind in ("bc", "two-head", "action-free"):
        results.append(check_meta(TINY_ARCH, kind, "state"))
    if include_vision:
        results.append(check_meta(MINI_VISION_ARCH, "bc", "vision"))
    results.append(check_quadratic_special_case())
    return results
