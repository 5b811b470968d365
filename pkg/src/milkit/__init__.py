"""milkit: gradient-based one-shot imitation on a planar reaching benchmark.

A policy is meta-trained across tasks so that a single gradient step on one
demonstration of a held-out task yields a working policy. Includes the
autodiff engine (exact second-order meta-gradients), layer vocabulary,
two-link reaching environment, iLQG experts, comparison baselines, and a
dataset/evaluation pipeline driven by the ``milkit`` CLI.
"""

__version__ = "0.1.0"

from . import autodiff, layers, policy, optim, env, ilqg, meta, baselines  # noqa: F401
from . import dataset, evaluation, gradcheck  # noqa: F401
