"""Comparison policies: random torques, a contextual feedforward policy
conditioned on the demonstration's final observation, and an LSTM policy that
ingests the whole demonstration before acting.

Both learned baselines reuse the same trunk architecture, training data,
behavioral-cloning loss, and Adam optimizer as the meta-imitation policy, so
the comparison isolates the adaptation mechanism.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .autodiff import (Node, concat, constant, gradient, sigmoid, slice_axis,
                       tanh, _lift)
from .env import Demonstration
from .layers import dense
from .meta import ModalityError, TrainConfig, TrainingDiverged, TrainResult, _mse_sum, _tree_mean
from .optim import AdamState, adam_step
from .policy import ArchitectureConfig, init_params, policy_forward, truncated_normal

__all__ = ["random_action", "contextual_arch", "contextual_forward",
           "lstm_arch", "init_lstm_params", "lstm_forward", "train_baseline",
           "conditioned_policy"]

LSTM_WIDTH_DEFAULT = 512


def random_action(rng: np.random.Generator, action_dim: int = 2) -> np.ndarray:
    """Independent standard-normal torque per joint."""
    return rng.standard_normal(action_dim)


# ---------------------------------------------------------------------------
# contextual policy: final demo observation concatenated with the current one

def contextual_arch(arch: ArchitectureConfig) -> ArchitectureConfig:
    """Same trunk, doubled input: state vectors are concatenated; images are
    stacked channelwise and the configuration vectors concatenated. The
    bias-transform vector is dropped (it only matters under adaptation)."""
    if arch.vision:
        return replace(arch, image_channels=2 * arch.image_channels,
                       config_dim=2 * arch.config_dim, bias_dim=0)
    return replace(arch, state_dim=2 * arch.state_dim, bias_dim=0)


def _pair_inputs(arch: ArchitectureConfig, final_obs, obs):
    if arch.vision:
        f_img, f_cfg = final_obs
        images, configs = obs
        images, configs = _lift(images), _lift(configs)
        n = images.shape[0]
        f_img = np.broadcast_to(np.asarray(f_img)[None], (n, *np.shape(f_img)))
        f_cfg = np.broadcast_to(np.asarray(f_cfg)[None], (n, np.size(f_cfg)))
        return (concat([images, constant(f_img)], axis=1),
                concat([configs, constant(f_cfg)], axis=1))
    obs = _lift(obs)
    ctx = np.broadcast_to(np.asarray(final_obs)[None], (obs.shape[0], np.size(final_obs)))
    return concat([obs, constant(ctx)], axis=1)


def contextual_forward(arch: ArchitectureConfig, params, final_obs, obs) -> Node:
    """Actions for a batch of current observations given the demonstration's
    final observation as the goal context. ``arch`` is the contextual
    (doubled-input) configuration."""
    pred, _ = policy_forward(arch, params, _pair_inputs(arch, final_obs, obs))
    return pred


# ---------------------------------------------------------------------------
# LSTM policy: trunk features per timestep feed a recurrence over the demo,
# then the current observation; the final hidden state decodes to an action

def lstm_arch(arch: ArchitectureConfig, width: int = LSTM_WIDTH_DEFAULT) -> ArchitectureConfig:
    return replace(arch, bias_dim=0, fc_width=arch.fc_width), width


def init_lstm_params(arch: ArchitectureConfig, width: int,
                     rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Trunk parameters plus LSTM cell and action head. Demo actions ride
    along with the trunk features; the forget gate bias starts at one."""
    params = init_params(arch, rng)
    in_dim = arch.fc_width + arch.action_dim
    params["lstm_wx"] = truncated_normal(rng, (in_dim, 4 * width), 1.0 / np.sqrt(in_dim))
    params["lstm_wh"] = truncated_normal(rng, (width, 4 * width), 1.0 / np.sqrt(width))
    b = np.zeros(4 * width)
    b[width:2 * width] = 1.0
    params["lstm_b"] = b
    params["lstm_out_w"] = truncated_normal(rng, (width, arch.action_dim), 1.0 / np.sqrt(width))
    params["lstm_out_b"] = np.zeros(arch.action_dim)
    return params


def _lstm_cell(params, x, h, c, width: int):
    gates = dense(x, params["lstm_wx"], params["lstm_b"]) + (h @ _lift(params["lstm_wh"]))
    i = sigmoid(slice_axis(gates, 1, 0, width))
    f = sigmoid(slice_axis(gates, 1, width, 2 * width))
    g = tanh(slice_axis(gates, 1, 2 * width, 3 * width))
    o = sigmoid(slice_axis(gates, 1, 3 * width, 4 * width))
    c_new = f * c + i * g
    return o * tanh(c_new), c_new


def _trunk_features(arch, nodes, obs) -> Node:
    _, y = policy_forward(arch, nodes, obs)
    return y


def lstm_forward(arch: ArchitectureConfig, width: int, params,
                 demo: Demonstration, obs) -> Node:
    """Encode every demo timestep (features + action, zeros when the demo
    carries no actions), run the recurrence, then process the batch of
    current observations in one final step and decode actions."""
    if demo.horizon == 0:
        raise ValueError("empty demonstration")
    nodes = {k: (v if isinstance(v, Node) else constant(v, name=k))
             for k, v in params.items()}
    feats = _trunk_features(arch, nodes, demo.policy_inputs())     # (T, fc_width)
    acts = demo.actions if demo.actions is not None else np.zeros((demo.horizon, arch.action_dim))
    seq = concat([feats, constant(acts)], axis=1)

    h = constant(np.zeros((1, width)))
    c = constant(np.zeros((1, width)))
    for t in range(demo.horizon):
        x_t = slice_axis(seq, 0, t, t + 1)
        h, c = _lstm_cell(nodes, x_t, h, c, width)

    q = _trunk_features(arch, nodes, obs)                          # (N, fc_width)
    n = q.shape[0]
    q = concat([q, constant(np.zeros((n, arch.action_dim)))], axis=1)
    h, _ = _lstm_cell(nodes, q, h, c, width)                       # broadcast over queries
    return dense(h, nodes["lstm_out_w"], nodes["lstm_out_b"])


# ---------------------------------------------------------------------------
# behavioral-cloning training shared by both learned baselines

def _baseline_loss(method, arch, width, params, cond_demos, val_demo) -> Node:
    if val_demo.actions is None:
        raise ModalityError("baseline training needs expert actions")
    preds = []
    for d in cond_demos:
        if method == "contextual":
            preds.append(contextual_forward(arch, params, d.final_observation(),
                                            val_demo.policy_inputs()))
        else:
            preds.append(lstm_forward(arch, width, params, d, val_demo.policy_inputs()))
    return _mse_sum(_tree_mean(preds), val_demo.actions)


def conditioned_policy(method: str, arch: ArchitectureConfig, width: int | None,
                       params: dict[str, np.ndarray],
                       demos: list[Demonstration] | Demonstration):
    """Wrap trained baseline parameters and conditioning demo(s) as an
    observation -> action map; multiple demos average the predicted action."""
    if isinstance(demos, Demonstration):
        demos = [demos]

    def policy(obs, state=None):
        batch = (obs.image[None], obs.config[None]) if arch.vision else obs.state[None]
        preds = []
        for d in demos:
            if method == "contextual":
                preds.append(contextual_forward(arch, params, d.final_observation(), batch))
            else:
                preds.append(lstm_forward(arch, width, params, d, batch))
        return _tree_mean(preds).value[0]

    return policy


def train_baseline(train_entries, arch: ArchitectureConfig, tc: TrainConfig,
                   method: str, lstm_width: int = LSTM_WIDTH_DEFAULT, *,
                   init: dict[str, np.ndarray] | None = None,
                   adam: AdamState | None = None, start_epoch: int = 0,
                   rng_state: dict | None = None, history: list[dict] | None = None,
                   epoch_callback=None) -> TrainResult:
    """Train a baseline with the identical sampling scheme, loss, and
    optimizer as meta-training: per task a conditioning demo and a
    supervision demo are drawn, and the summed batch loss feeds Adam."""
    if method not in ("contextual", "lstm"):
        raise ValueError(f"not a trainable baseline: {method!r}")
    entries = list(train_entries)
    for e in entries:
        if len(e.demos) < 2:
            raise ValueError(f"task {e.task.seed} has {len(e.demos)} demos; "
                             "training needs at least two per task")
    rng = np.random.default_rng(tc.seed)
    n_val = int(round(tc.val_fraction * len(entries)))
    order = rng.permutation(len(entries))
    val_entries = [entries[i] for i in order[:n_val]]
    fit_entries = [entries[i] for i in order[n_val:]]

    net_arch = contextual_arch(arch) if method == "contextual" else lstm_arch(arch)[0]
    if init is None:
        params = (init_params(net_arch, rng) if method == "contextual"
                  else init_lstm_params(net_arch, lstm_width, rng))
    else:
        params = dict(init)
    if adam is None:
        adam = AdamState.init(params, lr=tc.outer_lr)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    history = list(history or [])

    k = min(tc.k_shot, min(len(e.demos) for e in fit_entries) - 1)

    def batch_loss(p, batch):
        leaves = {kk: constant(v, name=kk) for kk, v in p.items()}
        total = None
        for cond, val in batch:
            term = _baseline_loss(method, net_arch, lstm_width, leaves, cond, val)
            total = term if total is None else total + term
        return leaves, total

    for epoch in range(start_epoch, tc.epochs):
        perm = rng.permutation(len(fit_entries))
        epoch_losses = []
        for lo in range(0, len(perm), tc.meta_batch):
            batch = []
            for ti in perm[lo:lo + tc.meta_batch]:
                demos = fit_entries[ti].demos
                picks = rng.choice(len(demos), size=k + 1, replace=False)
                batch.append(([demos[j] for j in picks[:k]], demos[picks[k]]))
            leaves, loss = batch_loss(params, batch)
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, value)
            grads = {kk: np.asarray(g.value) for kk, g in gradient(loss, leaves).items()}
            if tc.outer_lr > 0:
                adam, params = adam_step(adam, params, grads)
            epoch_losses.append(value)
        val = float("nan")
        if val_entries:
            batch = [(list(e.demos[:k]), e.demos[k]) for e in val_entries]
            val = float(batch_loss(params, batch)[1].value)
        history.append({"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
                        "val_loss": val})
        if epoch_callback is not None:
            epoch_callback(TrainResult(params=params, history=history, adam=adam,
                                       rng_state=rng.bit_generator.state, epoch=epoch + 1))
    return TrainResult(params=params, history=history, adam=adam,
                       rng_state=rng.bit_generator.state, epoch=tc.epochs)
