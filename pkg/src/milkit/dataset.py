"""Demonstration dataset: generation, persistence, and split bookkeeping.

A dataset holds meta-train tasks (two or more demos each, forming the
adaptation/validation pairs) and meta-test tasks (enough demos for k-shot
adaptation plus one validation demo). Files are written through the
:mod:`milkit.io_format` container and carry the environment configuration and
its hash, so a dataset can never silently be consumed under a different
environment.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import multiprocessing
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .env import Demonstration, EnvConfig, Task, sample_task
from .ilqg import make_expert_demo
from .io_format import FormatError, read_blob, write_blob

__all__ = ["DatasetConfig", "TaskEntry", "DemoDataset", "generate_dataset",
           "write_dataset", "read_dataset", "env_config_hash",
           "EnvHashMismatch", "FORMAT_VERSION", "worker_count"]

FORMAT_VERSION = 1

_TAG_DEMO_EPISODE = 515


class EnvHashMismatch(UserWarning):
    """Dataset was generated under a different environment configuration."""


@dataclass(frozen=True)
class DatasetConfig:
    n_train_tasks: int = 300
    n_test_tasks: int = 20
    demos_per_train_task: int = 2
    demos_per_test_task: int = 6
    noise_sigma: float = 0.05
    modality: str = "full"
    ilqg_iterations: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.demos_per_train_task < 2:
            raise ValueError("meta-training needs at least two demos per task")
        if self.n_train_tasks < 1 or self.n_test_tasks < 0:
            raise ValueError("task counts must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class TaskEntry:
    task: Task
    demos: list[Demonstration]


@dataclass
class DemoDataset:
    env: EnvConfig
    train_tasks: list[TaskEntry]
    test_tasks: list[TaskEntry]
    data_config: DatasetConfig | None = None
    version: int = FORMAT_VERSION

    @property
    def env_hash(self) -> str:
        return env_config_hash(self.env)

    def entries(self, split: str) -> list[TaskEntry]:
        if split == "meta-train":
            return self.train_tasks
        if split == "meta-test":
            return self.test_tasks
        raise ValueError(f"unknown split {split!r}")

    def validate(self) -> None:
        for e in self.train_tasks:
            if len(e.demos) < 2:
                raise ValueError(
                    f"meta-train task {e.task.seed} has only {len(e.demos)} demos")
        for te in self.test_tasks:
            for tr in self.train_tasks:
                gap = np.linalg.norm(te.task.target_color - tr.task.target_color)
                if gap < self.env.min_color_sep:
                    raise ValueError(
                        f"meta-test task {te.task.seed} target color is within "
                        f"{gap:.3f} of meta-train task {tr.task.seed}")


def env_config_hash(cfg: EnvConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _demo_episode_seed(demo_index: int) -> int:
    return _TAG_DEMO_EPISODE * 1_000_003 + demo_index


def _build_entry(args) -> tuple[TaskEntry, int]:
    env, ds, seed, split, n_demos = args
    task = sample_task(env, seed, split)
    demos = []
    successes = 0
    for j in range(n_demos):
        demo, _ = make_expert_demo(env, task, _demo_episode_seed(j),
                                   noise_sigma=ds.noise_sigma,
                                   modality=ds.modality if split == "meta-test" else "full",
                                   iterations=ds.ilqg_iterations)
        successes += int(demo.success)
        demos.append(demo)
    return TaskEntry(task=task, demos=demos), successes


def worker_count() -> int:
    return max(1, int(os.environ.get("MIL_THREADS", "1")))


def _map_tasks(fn, jobs):
    workers = worker_count()
    if workers == 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with multiprocessing.Pool(min(workers, len(jobs))) as pool:
        return pool.map(fn, jobs)


def generate_dataset(env: EnvConfig, ds: DatasetConfig) -> tuple[DemoDataset, dict]:
    """Sample tasks and collect noisy expert demos for both splits.

    Returns the dataset and a stats dict with demo success rates. Task
    computation is independent per task and may run in MIL_THREADS worker
    processes; results keep the fixed task order either way.
    """
    jobs = [(env, ds, seed, "meta-train", ds.demos_per_train_task)
            for seed in range(ds.n_train_tasks)]
    jobs += [(env, ds, seed, "meta-test", ds.demos_per_test_task)
             for seed in range(ds.n_test_tasks)]
    results = _map_tasks(_build_entry, jobs)
    train = [r[0] for r in results[:ds.n_train_tasks]]
    test = [r[0] for r in results[ds.n_train_tasks:]]
    n_demos = sum(len(e.demos) for e in train + test)
    n_success = sum(r[1] for r in results)
    data = DemoDataset(env=env, train_tasks=train, test_tasks=test, data_config=ds)
    data.validate()
    stats = {
        "train_tasks": len(train), "test_tasks": len(test), "demos": n_demos,
        "demo_success_rate": n_success / max(n_demos, 1),
    }
    return data, stats


# ---------------------------------------------------------------------------
# persistence

_DEMO_ARRAYS = ("actions", "ee", "state_obs", "images", "configs", "goal")


def write_dataset(data: DemoDataset, path) -> None:
    data.validate()
    arrays: dict[str, np.ndarray] = {}
    manifest_tasks = []
    for split, entries in (("meta-train", data.train_tasks), ("meta-test", data.test_tasks)):
        for e in entries:
            demos_meta = []
            for di, demo in enumerate(e.demos):
                prefix = f"{split}/{e.task.seed}/{di}"
                present = []
                for name in _DEMO_ARRAYS:
                    value = getattr(demo, name)
                    if value is not None:
                        arrays[f"{prefix}/{name}"] = value
                        present.append(name)
                demos_meta.append({"episode_seed": demo.episode_seed,
                                   "modality": demo.modality,
                                   "success": bool(demo.success),
                                   "arrays": present})
            manifest_tasks.append({
                "seed": e.task.seed, "split": split,
                "target_color": e.task.target_color.tolist(),
                "distractor_colors": e.task.distractor_colors.tolist(),
                "demos": demos_meta,
            })
    meta = {
        "kind": "demo-dataset", "format_version": data.version,
        "env_hash": data.env_hash, "env_config": dataclasses.asdict(data.env),
        "data_config": dataclasses.asdict(data.data_config) if data.data_config else None,
        "tasks": manifest_tasks,
    }
    write_blob(path, meta, arrays)


def _env_from_dict(d: dict) -> EnvConfig:
    d = dict(d)
    for key in ("image_hw", "link_lengths", "link_masses", "reach_range", "rest_pose"):
        d[key] = tuple(d[key])
    return EnvConfig(**d)


def read_dataset(path, expected_env: EnvConfig | None = None,
                 override_env_mismatch: bool = False) -> DemoDataset:
    """Read and validate a dataset file.

    If ``expected_env`` is given and its hash differs from the stored one, a
    :class:`EnvHashMismatch` warning is issued; pass
    ``override_env_mismatch=True`` to acknowledge it silently.
    """
    meta, arrays = read_blob(path)
    if meta.get("kind") != "demo-dataset":
        raise FormatError(f"{path}: not a demo dataset")
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unknown dataset format version "
                          f"{meta.get('format_version')!r}")
    env = _env_from_dict(meta["env_config"])
    if expected_env is not None and env_config_hash(expected_env) != meta["env_hash"]:
        if not override_env_mismatch:
            warnings.warn(
                f"{path}: dataset was generated under environment hash "
                f"{meta['env_hash']}, expected {env_config_hash(expected_env)}",
                EnvHashMismatch)
    ds = DatasetConfig(**meta["data_config"]) if meta.get("data_config") else None

    train, test = [], []
    for t in meta["tasks"]:
        task = Task(target_color=np.array(t["target_color"]),
                    distractor_colors=np.array(t["distractor_colors"]),
                    seed=t["seed"], split=t["split"])
        demos = []
        for di, dm in enumerate(t["demos"]):
            prefix = f"{t['split']}/{t['seed']}/{di}"
            fields = {name: arrays[f"{prefix}/{name}"]
                      for name in dm["arrays"]}
            demos.append(Demonstration(
                task_seed=task.seed, split=task.split,
                episode_seed=dm["episode_seed"], modality=dm["modality"],
                success=dm["success"], **fields))
        entry = TaskEntry(task=task, demos=demos)
        (train if t["split"] == "meta-train" else test).append(entry)
    data = DemoDataset(env=env, train_tasks=train, test_tasks=test, data_config=ds)
    data.validate()
    return data
