"""Meta-imitation learning: inner losses, gradient-step adaptation, the
meta-objective, and the meta-training loop.

The outer objective is always behavioral cloning against expert actions on a
validation demonstration of the same task; the inner (adaptation) loss is
selectable: plain behavioral cloning, a separate meta-learned inner head on
the last hidden activations, or the action-free variant of that head that
never reads expert actions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import (Node, clip_elementwise, constant, differentiable_sgd_step,
                       gradient, mul, nsum, sub)
from .env import Demonstration
from .optim import AdamState, adam_step
from .policy import ArchitectureConfig, init_params, policy_action, policy_forward
from .layers import dense

__all__ = ["TrainConfig", "ModalityError", "TrainingDiverged",
           "bc_loss", "twohead_inner_loss", "actionfree_inner_loss",
           "adapt", "meta_loss", "meta_train", "one_shot_policy",
           "INNER_LOSSES"]

INNER_LOSSES = ("bc", "two-head", "action-free")


class ModalityError(ValueError):
    """A demonstration lacks the streams the chosen loss requires."""


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite meta-loss at epoch {epoch}: {value}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    inner_lr: float = 0.001
    outer_lr: float = 0.001
    inner_steps: int = 1
    meta_batch: int = 5
    inner_clip: tuple[float, float] | None = None
    meta_clip: tuple[float, float] | None = (-20.0, 20.0)
    inner_loss: str = "bc"
    k_shot: int = 1
    epochs: int = 50
    seed: int = 0
    adapt_z: bool = True          # update the bias-transform vector in the inner loop
    first_order: bool = False     # truncate second-order terms (ablation)
    val_fraction: float = 0.1     # share of meta-train tasks held out for the loss curve

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ValueError("step sizes must be >= 0")
        if self.meta_batch < 1 or self.inner_steps < 0 or self.k_shot < 1:
            raise ValueError("meta_batch and k_shot must be >= 1, inner_steps >= 0")
        if self.inner_loss not in INNER_LOSSES:
            raise ValueError(f"inner_loss must be one of {INNER_LOSSES}")


def _as_nodes(params) -> dict[str, Node]:
    return {k: (v if isinstance(v, Node) else constant(v, name=k))
            for k, v in params.items()}


def _values(params: dict[str, Node]) -> dict[str, np.ndarray]:
    return {k: np.asarray(v.value) for k, v in params.items()}


def _mse_sum(pred: Node, actions: np.ndarray) -> Node:
    r = sub(pred, actions)
    return nsum(mul(r, r))


def bc_loss(arch: ArchitectureConfig, params, demo: Demonstration) -> Node:
    """Behavioral cloning: summed squared action error over the whole demo."""
    if demo.actions is None:
        raise ModalityError("behavioral cloning needs expert actions "
                            f"(demo modality is {demo.modality!r})")
    pred, _ = policy_forward(arch, _as_nodes(params), demo.policy_inputs())
    return _mse_sum(pred, demo.actions)


def twohead_inner_loss(arch: ArchitectureConfig, params, demo: Demonstration) -> Node:
    """Inner-head readout of the last hidden activations, regressed onto the
    expert actions; the outer head never appears, so its gradient is zero."""
    if not arch.two_head:
        raise ValueError("two-head inner loss requires a two-head architecture")
    if demo.actions is None:
        raise ModalityError("two-head inner loss needs expert actions")
    nodes = _as_nodes(params)
    _, y = policy_forward(arch, nodes, demo.policy_inputs())
    return _mse_sum(dense(y, nodes["in_w"], nodes["in_b"]), demo.actions)


def actionfree_inner_loss(arch: ArchitectureConfig, params, demo: Demonstration) -> Node:
    """Learned quadratic loss on the last hidden activations; expert actions
    are never read, so any perturbation of them leaves adaptation unchanged."""
    if not arch.two_head:
        raise ValueError("action-free inner loss requires a two-head architecture")
    nodes = _as_nodes(params)
    _, y = policy_forward(arch, nodes, demo.policy_inputs())
    return _mse_sum(dense(y, nodes["in_w"], nodes["in_b"]),
                    np.zeros((y.shape[0], arch.action_dim)))


def _inner_loss(arch, tc: TrainConfig, params, demo) -> Node:
    if tc.inner_loss == "bc":
        return bc_loss(arch, params, demo)
    if tc.inner_loss == "two-head":
        return twohead_inner_loss(arch, params, demo)
    return actionfree_inner_loss(arch, params, demo)


def _tree_mean(losses: list[Node]) -> Node:
    """Balanced-tree mean: k identical terms collapse exactly for k a power
    of two, and to within rounding otherwise."""
    n = len(losses)
    while len(losses) > 1:
        nxt = [losses[i] + losses[i + 1] if i + 1 < len(losses) else losses[i]
               for i in range(0, len(losses), 2)]
        losses = nxt
    return losses[0] if n == 1 else mul(losses[0], 1.0 / n)


def adapt(arch: ArchitectureConfig, tc: TrainConfig, params,
          demos: list[Demonstration] | Demonstration) -> dict[str, Node]:
    """Gradient-descent adaptation on one or more demonstrations of a task.

    Each inner step averages the per-demo inner-loss gradients (by linearity,
    the gradient of the mean loss), clips elementwise if configured, and
    applies a step of ``inner_lr``. The result stays graph-connected to the
    incoming parameters, so an outer loss on it is differentiable back to
    them exactly (or to first order when configured).
    """
    if isinstance(demos, Demonstration):
        demos = [demos]
    if not demos:
        raise ValueError("adapt needs at least one demonstration")
    nodes = _as_nodes(params)
    for _ in range(tc.inner_steps):
        loss = _tree_mean([_inner_loss(arch, tc, nodes, d) for d in demos])
        updatable = {k: v for k, v in nodes.items() if tc.adapt_z or k != "z"}
        stepped = differentiable_sgd_step(updatable, loss, tc.inner_lr,
                                          tc.inner_clip, tc.first_order)
        nodes = {**nodes, **stepped}
    return nodes


def meta_loss(arch: ArchitectureConfig, tc: TrainConfig, params,
              batch: list[tuple[list[Demonstration], Demonstration]]) -> Node:
    """Sum over tasks of the validation behavioral-cloning loss at the
    adapted parameters. The validation demo is always scored with expert
    actions, whatever the inner loss; accumulation is in batch order."""
    nodes = _as_nodes(params)
    total: Node | None = None
    for adapt_demos, val_demo in batch:
        if val_demo.actions is None:
            raise ModalityError("validation demonstrations need expert actions")
        term = bc_loss(arch, adapt(arch, tc, nodes, adapt_demos), val_demo)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("empty meta-batch")
    return total


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[dict]
    adam: AdamState
    rng_state: dict
    epoch: int


def _val_batch(entries, k):
    return [(list(e.demos[:k]), e.demos[k]) for e in entries]


def meta_train(train_entries, arch: ArchitectureConfig, tc: TrainConfig, *,
               init: dict[str, np.ndarray] | None = None,
               adam: AdamState | None = None,
               start_epoch: int = 0,
               rng_state: dict | None = None,
               history: list[dict] | None = None,
               epoch_callback=None) -> TrainResult:
    """Meta-train over a list of dataset task entries (each with >= 2 demos).

    Per outer iteration: sample a meta-batch of tasks and a train/validation
    demo pair per task, take the meta-gradient of :func:`meta_loss`, clip it
    elementwise, and apply one Adam step. Deterministic given the seed; the
    returned RNG/optimizer state makes checkpoint resumption exact.
    """
    entries = list(train_entries)
    for e in entries:
        if len(e.demos) < 2:
            raise ValueError(f"task {e.task.seed} has {len(e.demos)} demos; "
                             "meta-training needs at least two per task")
    rng = np.random.default_rng(tc.seed)
    n_val = int(round(tc.val_fraction * len(entries)))
    order = rng.permutation(len(entries))
    val_entries = [entries[i] for i in order[:n_val]]
    fit_entries = [entries[i] for i in order[n_val:]]
    if not fit_entries:
        raise ValueError("no tasks left to train on after the validation split")

    params = init_params(arch, rng) if init is None else dict(init)
    if adam is None:
        adam = AdamState.init(params, lr=tc.outer_lr)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    history = list(history or [])

    k = min(tc.k_shot, min(len(e.demos) for e in fit_entries) - 1)
    for epoch in range(start_epoch, tc.epochs):
        perm = rng.permutation(len(fit_entries))
        epoch_losses = []
        for lo in range(0, len(perm), tc.meta_batch):
            chunk = perm[lo:lo + tc.meta_batch]
            batch = []
            for ti in chunk:
                demos = fit_entries[ti].demos
                picks = rng.choice(len(demos), size=k + 1, replace=False)
                batch.append(([demos[j] for j in picks[:k]], demos[picks[k]]))
            leaves = _as_nodes(params)
            loss = meta_loss(arch, tc, leaves, batch)
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, value)
            grads = _values(gradient(loss, leaves))
            if tc.meta_clip is not None:
                grads = {kk: clip_elementwise(g, *tc.meta_clip) for kk, g in grads.items()}
            if tc.outer_lr > 0:
                adam, params = adam_step(adam, params, grads)
            epoch_losses.append(value)
        val = float("nan")
        if val_entries:
            val = float(meta_loss(arch, tc, _as_nodes(params), _val_batch(val_entries, k)).value)
        row = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)), "val_loss": val}
        history.append(row)
        if epoch_callback is not None:
            epoch_callback(TrainResult(params=params, history=history, adam=adam,
                                       rng_state=rng.bit_generator.state, epoch=epoch + 1))
    return TrainResult(params=params, history=history, adam=adam,
                       rng_state=rng.bit_generator.state, epoch=tc.epochs)


def held_out_meta_loss(entries, arch: ArchitectureConfig, tc: TrainConfig,
                       params) -> float:
    """Meta-loss over held-out tasks using each task's first demo pair."""
    return float(meta_loss(arch, tc, params, _val_batch(entries, 1)).value)


def one_shot_policy(arch: ArchitectureConfig, tc: TrainConfig,
                    params: dict[str, np.ndarray],
                    demos: list[Demonstration] | Demonstration):
    """Adapt once on the given demonstration(s) and wrap the result as an
    observation -> action map (no outer graph connectivity is kept)."""
    if isinstance(demos, Demonstration):
        demos = [demos]
    for d in demos:
        if tc.inner_loss in ("bc", "two-head") and d.actions is None:
            raise ModalityError(
                f"{tc.inner_loss!r} adaptation needs expert actions but the "
                f"demo modality is {d.modality!r}")
    fo = replace(tc, first_order=True)   # no meta-gradient needed at test time
    adapted = _values(adapt(arch, fo, params, demos))

    def policy(obs, state=None):
        return policy_action(arch, adapted, obs)

    policy.params = adapted
    return policy
