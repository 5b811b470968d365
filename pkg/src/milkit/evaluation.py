"""Evaluation protocol: adapt (or condition) on held-out task demos, roll out
fresh trials, and score reaching success.

Evaluation only ever touches meta-test tasks; the adaptation demos come from
the dataset (generated with their own episode seeds) while every scored trial
uses a freshly derived episode seed, so the demo layout never coincides with
a trial layout. Reports are reproducible bit-for-bit from
(params, dataset, seed); wall-clock time is reported on stdout only, never in
the metric files.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .baselines import conditioned_policy, random_action
from .dataset import DemoDataset, env_config_hash
from .env import rollout
from .ilqg import ilqg_solve, reach_problem  # noqa: F401  (reach_problem re-exported for tooling)
from .meta import TrainConfig, bc_loss, one_shot_policy
from .policy import ArchitectureConfig

__all__ = ["EvalReport", "evaluate", "report_json", "report_csv", "METHODS"]

METHODS = ("mil", "contextual", "lstm", "random", "expert")


@dataclass
class TaskOutcome:
    task_seed: int
    target_color: list[float]
    successes: int
    trials: int
    pre_loss: float | None = None
    post_loss: float | None = None


@dataclass
class EvalReport:
    method: str
    shots: int
    n_tasks: int
    n_trials: int
    seed: int
    env_hash: str
    per_task: list[TaskOutcome] = field(default_factory=list)
    wall_clock_sec: float = 0.0

    @property
    def successes(self) -> int:
        return sum(t.successes for t in self.per_task)

    @property
    def trials(self) -> int:
        return sum(t.trials for t in self.per_task)

    @property
    def success_rate(self) -> float:
        return self.successes / max(self.trials, 1)

    def mean_loss(self, which: str) -> float | None:
        vals = [getattr(t, which) for t in self.per_task if getattr(t, which) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def fraction_improved(self) -> float | None:
        pairs = [(t.pre_loss, t.post_loss) for t in self.per_task
                 if t.pre_loss is not None and t.post_loss is not None]
        if not pairs:
            return None
        return float(np.mean([post < pre for pre, post in pairs]))


def _trial_seed(eval_seed: int, trial: int) -> int:
    # small integers, disjoint from the large demo-episode seed range
    return 1009 + eval_seed * 997 + trial


def evaluate(data: DemoDataset, method: str, *, arch: ArchitectureConfig | None = None,
             tc: TrainConfig | None = None, params: dict | None = None,
             lstm_width: int | None = None, n_tasks: int = 20, n_trials: int = 10,
             k: int = 1, seed: int = 0) -> EvalReport:
    """Score ``method`` on the dataset's meta-test tasks.

    Per task: take ``k`` stored demos for adaptation/conditioning, keep one
    more as the validation demo (pre/post adaptation loss for the adaptive
    method), then roll out ``n_trials`` episodes with fresh seeds and score
    the reaching criterion.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; pick from {METHODS}")
    if k < 1 or n_trials < 1:
        raise ValueError("k and n_trials must be >= 1")
    entries = data.test_tasks
    if len(entries) < n_tasks:
        raise ValueError(f"dataset has {len(entries)} meta-test tasks, "
                         f"need {n_tasks}")
    t0 = time.monotonic()
    report = EvalReport(method=method, shots=k, n_tasks=n_tasks, n_trials=n_trials,
                        seed=seed, env_hash=data.env_hash)
    env = data.env

    for entry in entries[:n_tasks]:
        if entry.task.split != "meta-test":
            raise ValueError("evaluation must not touch meta-train tasks")
        pre_loss = post_loss = None
        if method in ("mil", "contextual", "lstm"):
            if len(entry.demos) < k + 1:
                raise ValueError(
                    f"task {entry.task.seed} has {len(entry.demos)} demos; "
                    f"{k}-shot evaluation needs {k + 1}")
            cond, val_demo = entry.demos[:k], entry.demos[k]
        if method == "mil":
            policy = one_shot_policy(arch, tc, params, cond)
            if val_demo.actions is not None:
                pre_loss = float(bc_loss(arch, params, val_demo).value)
                post_loss = float(bc_loss(arch, policy.params, val_demo).value)
        elif method in ("contextual", "lstm"):
            policy = conditioned_policy(method, arch, lstm_width, params, cond)
        outcome = TaskOutcome(task_seed=entry.task.seed,
                              target_color=entry.task.target_color.tolist(),
                              successes=0, trials=n_trials,
                              pre_loss=pre_loss, post_loss=post_loss)

        for trial in range(n_trials):
            ep_seed = _trial_seed(seed, trial)
            if method == "random":
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, entry.task.seed, trial]))
                policy = lambda obs, state, _r=rng: random_action(_r)  # noqa: E731
            elif method == "expert":
                ctrl, _ = ilqg_solve(env, entry.task, ep_seed)
                counter = iter(range(ctrl.horizon))
                policy = (lambda obs, state, _c=ctrl, _i=counter:
                          _c.action(next(_i), state.vector()))
            traj = rollout(env, policy, entry.task, ep_seed)
            outcome.successes += int(traj.success)
        report.per_task.append(outcome)

    report.wall_clock_sec = time.monotonic() - t0
    return report


def report_json(report: EvalReport) -> str:
    """Canonical JSON form of the metrics (excludes wall-clock, which would
    break byte-for-byte reproducibility of metric files)."""
    body = {
        "method": report.method, "shots": report.shots,
        "n_tasks": report.n_tasks, "n_trials": report.n_trials,
        "seed": report.seed, "env_hash": report.env_hash,
        "successes": report.successes, "trials": report.trials,
        "success_rate": report.success_rate,
        "mean_pre_loss": report.mean_loss("pre_loss"),
        "mean_post_loss": report.mean_loss("post_loss"),
        "fraction_improved": report.fraction_improved,
        "per_task": [asdict(t) for t in report.per_task],
    }
    return json.dumps(body, sort_keys=True, indent=2)


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task_seed", "target_r", "target_g", "target_b",
                "successes", "trials", "success_rate", "pre_loss", "post_loss"])
    for t in report.per_task:
        w.writerow([t.task_seed, *[f"{c:.17g}" for c in t.target_color],
                    t.successes, t.trials, f"{t.successes / max(t.trials, 1):.17g}",
                    "" if t.pre_loss is None else f"{t.pre_loss:.17g}",
                    "" if t.post_loss is None else f"{t.post_loss:.17g}"])
    return buf.getvalue()
