"""Policy architecture: conv/dense trunk with layer normalization, bias
transformation, and single- or two-head action readout.

The vision trunk is strided convolutions followed by either a flattened
feature map (the reaching default) or a spatial soft-argmax, concatenated
with the robot configuration vector. The non-vision trunk consumes the state
vector directly. The learned vector ``z`` feeds the first fully-connected
layer through its own weight matrix (the bias transformation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, ShapeError, concat, reshape, _lift
from .layers import (bias_transform, conv2d, conv_output_hw, dense, layer_norm,
                     relu, spatial_soft_argmax)

__all__ = ["ArchitectureConfig", "init_params", "policy_forward",
           "policy_action", "param_count", "truncated_normal"]


@dataclass(frozen=True)
class ArchitectureConfig:
    vision: bool = False
    image_hw: tuple[int, int] = (32, 40)
    image_channels: int = 3
    conv_layers: int = 3
    conv_filters: int = 40
    conv_kernel: int = 3
    conv_stride: int = 2
    fc_layers: int = 4            # hidden layers plus the linear output layer
    fc_width: int = 200
    bias_dim: int = 10
    two_head: bool = False
    action_dim: int = 2
    state_dim: int = 19           # non-vision observation length
    config_dim: int = 4           # robot configuration length in vision mode
    flatten_conv: bool = True     # False: spatial soft-argmax feature points

    def __post_init__(self):
        if self.fc_layers < 2:
            raise ValueError("need at least one hidden and one output layer")
        if min(self.fc_width, self.action_dim) < 1 or self.bias_dim < 0:
            raise ValueError("widths must be positive, bias_dim non-negative")
        if self.vision:
            h, w = self.image_hw
            if min(h, w, self.image_channels, self.conv_layers,
                   self.conv_filters, self.conv_kernel) < 1:
                raise ValueError("vision extents must be positive")
            for _ in range(self.conv_layers):   # raises if geometry collapses
                h, w = conv_output_hw(h, w, self.conv_kernel, self.conv_stride)
        elif self.state_dim < 1:
            raise ValueError("state_dim must be positive")

    def conv_out_hw(self) -> list[tuple[int, int]]:
        h, w = self.image_hw
        out = []
        for _ in range(self.conv_layers):
            h, w = conv_output_hw(h, w, self.conv_kernel, self.conv_stride)
            out.append((h, w))
        return out

    def feature_dim(self) -> int:
        """Width of the first fully-connected layer's input."""
        if not self.vision:
            return self.state_dim
        h, w = self.conv_out_hw()[-1]
        conv_feats = self.conv_filters * h * w if self.flatten_conv else 2 * self.conv_filters
        return conv_feats + self.config_dim


def truncated_normal(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    """Normal draw with tails beyond two deviations clamped."""
    v = rng.standard_normal(shape) * scale
    return np.clip(v, -2.0 * scale, 2.0 * scale)


def init_params(cfg: ArchitectureConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameter set; weights truncated-normal at 1/sqrt(fan-in)."""
    params: dict[str, np.ndarray] = {}
    if cfg.vision:
        cin = cfg.image_channels
        for i in range(cfg.conv_layers):
            fan_in = cin * cfg.conv_kernel ** 2
            params[f"conv{i}_w"] = truncated_normal(
                rng, (cfg.conv_filters, cin, cfg.conv_kernel, cfg.conv_kernel),
                1.0 / np.sqrt(fan_in))
            params[f"conv{i}_b"] = np.zeros(cfg.conv_filters)
            params[f"conv{i}_lng"] = np.ones(cfg.conv_filters)
            params[f"conv{i}_lnb"] = np.zeros(cfg.conv_filters)
            cin = cfg.conv_filters
    if cfg.bias_dim > 0:
        params["z"] = np.zeros(cfg.bias_dim)
    d = cfg.feature_dim()
    for i in range(cfg.fc_layers - 1):
        params[f"fc{i}_w"] = truncated_normal(rng, (d, cfg.fc_width), 1.0 / np.sqrt(d))
        if i == 0 and cfg.bias_dim > 0:
            params["fc0_wz"] = truncated_normal(
                rng, (cfg.bias_dim, cfg.fc_width), 1.0 / np.sqrt(cfg.bias_dim))
        params[f"fc{i}_b"] = np.zeros(cfg.fc_width)
        params[f"fc{i}_lng"] = np.ones(cfg.fc_width)
        params[f"fc{i}_lnb"] = np.zeros(cfg.fc_width)
        d = cfg.fc_width
    params["out_w"] = truncated_normal(rng, (d, cfg.action_dim), 1.0 / np.sqrt(d))
    params["out_b"] = np.zeros(cfg.action_dim)
    if cfg.two_head:
        params["in_w"] = truncated_normal(rng, (d, cfg.action_dim), 1.0 / np.sqrt(d))
        params["in_b"] = np.zeros(cfg.action_dim)
    return params


def param_count(params) -> int:
    return int(sum(np.prod(np.shape(v.value if isinstance(v, Node) else v))
                   for v in params.values()))


def _check_obs(cfg: ArchitectureConfig, obs):
    if cfg.vision:
        if not (isinstance(obs, tuple) and len(obs) == 2):
            raise ShapeError("vision policy expects (images, configs)")
        images, configs = _lift(obs[0]), _lift(obs[1])
        h, w = cfg.image_hw
        if images.ndim != 4 or images.shape[1:] != (cfg.image_channels, h, w):
            raise ShapeError(
                f"images {images.shape} incompatible with configured "
                f"({cfg.image_channels}, {h}, {w})")
        if configs.ndim != 2 or configs.shape != (images.shape[0], cfg.config_dim):
            raise ShapeError(f"configs {configs.shape} incompatible with images")
        return images, configs
    state = _lift(obs)
    if state.ndim != 2 or state.shape[1] != cfg.state_dim:
        raise ShapeError(f"state {state.shape} incompatible with state_dim={cfg.state_dim}")
    return state


def policy_forward(cfg: ArchitectureConfig, params, obs) -> tuple[Node, Node]:
    """Batched forward pass.

    ``obs`` is a (N, state_dim) array/node, or an (images, configs) pair in
    vision mode. Returns ``(action, y)`` where ``y`` is the last hidden
    layer's activations (the input of the action readout). With two heads the
    returned action always uses the outer head.
    """
    if cfg.vision:
        images, configs = _check_obs(cfg, obs)
        x = images
        for i in range(cfg.conv_layers):
            x = conv2d(x, params[f"conv{i}_w"], cfg.conv_stride)
            x = x + reshape(params[f"conv{i}_b"], (1, cfg.conv_filters, 1, 1))
            x = relu(layer_norm(x, params[f"conv{i}_lng"], params[f"conv{i}_lnb"]))
        n = x.shape[0]
        if cfg.flatten_conv:
            feats = reshape(x, (n, int(np.prod(x.shape[1:]))))
        else:
            feats = spatial_soft_argmax(x)
        x = concat([feats, configs], axis=1)
    else:
        x = _check_obs(cfg, obs)

    for i in range(cfg.fc_layers - 1):
        if i == 0 and cfg.bias_dim > 0:
            pre = bias_transform(x, params["z"], params["fc0_w"],
                                 params["fc0_wz"], params["fc0_b"])
        else:
            pre = dense(x, params[f"fc{i}_w"], params[f"fc{i}_b"])
        x = relu(layer_norm(pre, params[f"fc{i}_lng"], params[f"fc{i}_lnb"]))
    y = x
    action = dense(y, params["out_w"], params["out_b"])
    return action, y


def policy_action(cfg: ArchitectureConfig, params: dict[str, np.ndarray], observation) -> np.ndarray:
    """Single-observation convenience wrapper returning a plain action array."""
    if cfg.vision:
        image, config = observation.image, observation.config
        obs = (image[None], config[None])
    else:
        obs = observation.state[None]
    action, _ = policy_forward(cfg, params, obs)
    return action.value[0]
