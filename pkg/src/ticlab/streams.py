"""Task-imbalanced continual streams over a synthetic Gaussian dataset.

A stream is built in three steps: an exponential long-tail profile assigns
per-class train counts, contiguous class blocks become tasks balanced up to
their head class, and the tasks are ordered (by size, shuffled, or the
one-shot / balanced controls). Train data is imbalanced; the test set is
always balanced across all classes and drawn from a disjoint RNG substream.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .container import read_container, read_header, take_f64, write_container
from .errors import ConfigError, FormatError, StreamError
from .numerics import Array

ORDERINGS = ("descending", "ascending", "shuffled", "one_shot", "balanced")

_STREAM_MAGIC = b"TICL"
_STREAM_VERSION = 1


@dataclass(frozen=True)
class StreamSpec:
    num_classes: int = 20
    num_tasks: int = 10
    n_max: int = 200               # head-class train count
    rho: float = 0.05              # tail/head class-count ratio, in (0, 1]
    ordering: str = "shuffled"
    order_seed: int = 7
    data_seed: int = 11
    test_per_class: int = 50

    def __post_init__(self):
        if self.num_classes < 1 or self.num_tasks < 1:
            raise ConfigError("stream: num_classes and num_tasks must be >= 1")
        if self.num_classes % self.num_tasks != 0:
            raise ConfigError(
                f"stream: num_classes={self.num_classes} is not divisible by "
                f"num_tasks={self.num_tasks}"
            )
        if not (0.0 < self.rho <= 1.0):
            raise ConfigError(f"stream: rho={self.rho} must be in (0, 1]")
        if self.n_max < 1:
            raise ConfigError(f"stream: n_max={self.n_max} must be >= 1")
        if self.ordering not in ORDERINGS:
            raise ConfigError(
                f"stream: unknown ordering {self.ordering!r}, expected one of "
                f"{ORDERINGS}"
            )
        if self.test_per_class < 1:
            raise ConfigError("stream: test_per_class must be >= 1")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "num_tasks": self.num_tasks,
            "n_max": self.n_max,
            "rho": self.rho,
            "ordering": self.ordering,
            "order_seed": self.order_seed,
            "data_seed": self.data_seed,
            "test_per_class": self.test_per_class,
        }


@dataclass(frozen=True)
class TaskRecord:
    task_id: int                 # canonical block index, stable under reordering
    class_ids: tuple[int, ...]
    size_per_class: int

    @property
    def total_size(self) -> int:
        return self.size_per_class * len(self.class_ids)


def longtail_counts(num_classes: int, n_max: int, rho: float) -> list[int]:
    """Exponential class-count profile: count_c = max(1, round(n_max * rho^(c/(C-1)))).

    The head class gets exactly n_max and the tail class max(1, round(n_max*rho)),
    so rho is the tail/head ratio. rho = 1 gives the balanced profile.
    """
    if not (0.0 < rho <= 1.0):
        raise ConfigError(f"longtail_counts: rho={rho} must be in (0, 1]")
    if num_classes < 1:
        raise ConfigError("longtail_counts: num_classes must be >= 1")
    if num_classes == 1:
        return [n_max]
    return [
        max(1, int(round(n_max * rho ** (c / (num_classes - 1)))))
        for c in range(num_classes)
    ]


def partition_and_balance(counts, num_classes: int, num_tasks: int) -> list[TaskRecord]:
    """Split classes into contiguous equal-width blocks, one block per task.

    Within a task every class is raised to the block's largest long-tail
    count, so tasks are internally balanced while task totals stay imbalanced.
    Returned in canonical (block) order.
    """
    if num_classes % num_tasks != 0:
        raise ConfigError(
            f"partition_and_balance: {num_classes} classes do not divide into "
            f"{num_tasks} tasks"
        )
    width = num_classes // num_tasks
    tasks = []
    for k in range(num_tasks):
        class_ids = tuple(range(k * width, (k + 1) * width))
        n_k = max(counts[c] for c in class_ids)
        tasks.append(TaskRecord(task_id=k, class_ids=class_ids, size_per_class=n_k))
    return tasks


def order_tasks(tasks, ordering: str, order_seed: int, n_max: int | None = None):
    """Arrange canonical tasks into stream order.

    descending / ascending sort by total task size (ascending is exactly the
    reverse of descending, so ties stay mirror images); shuffled applies a
    seeded uniform permutation; one_shot keeps canonical order with one sample
    per class; balanced keeps canonical order with every class raised to n_max.
    """
    tasks = list(tasks)
    if ordering == "descending":
        return sorted(tasks, key=lambda t: (-t.total_size, t.task_id))
    if ordering == "ascending":
        return list(reversed(order_tasks(tasks, "descending", order_seed)))
    if ordering == "shuffled":
        rng = np.random.default_rng(order_seed)
        perm = rng.permutation(len(tasks))
        return [tasks[i] for i in perm]
    if ordering == "one_shot":
        return [replace(t, size_per_class=1) for t in tasks]
    if ordering == "balanced":
        if n_max is None:
            n_max = max(t.size_per_class for t in tasks)
        return [replace(t, size_per_class=n_max) for t in tasks]
    raise ConfigError(f"order_tasks: unknown ordering {ordering!r}")


@dataclass
class TaskStream:
    """Materialized stream: ordered tasks, their train splits, one test set."""

    spec: StreamSpec
    input_dim: int
    class_sep: float
    noise_std: float
    tasks: list[TaskRecord]
    train_x: list[Array] = field(repr=False)   # per task, (N_t, input_dim)
    train_y: list[Array] = field(repr=False)   # per task, (N_t,) int64
    test_x: Array = field(repr=False)          # (C * test_per_class, input_dim)
    test_y: Array = field(repr=False)

    def header_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "input_dim": self.input_dim,
            "class_sep": self.class_sep,
            "noise_std": self.noise_std,
            "tasks": [
                {
                    "task_id": t.task_id,
                    "class_ids": list(t.class_ids),
                    "size_per_class": t.size_per_class,
                }
                for t in self.tasks
            ],
        }

    def fingerprint(self) -> str:
        from .container import canonical_json

        h = hashlib.sha256()
        h.update(canonical_json(self.header_dict()))
        for x in self.train_x:
            h.update(np.ascontiguousarray(x).tobytes())
        h.update(np.ascontiguousarray(self.test_x).tobytes())
        return h.hexdigest()

    def class_train_x(self, class_id: int) -> Array:
        """Train rows for one class (each class lives in exactly one task)."""
        for t, task in enumerate(self.tasks):
            if class_id in task.class_ids:
                pos = task.class_ids.index(class_id)
                n = task.size_per_class
                return self.train_x[t][pos * n : (pos + 1) * n]
        raise StreamError(f"class {class_id} not present in any task")

    def task_test_split(self, stream_pos: int) -> tuple[Array, Array]:
        """Balanced test rows restricted to the classes of one stream position."""
        task = self.tasks[stream_pos]
        mask = np.isin(self.test_y, task.class_ids)
        return self.test_x[mask], self.test_y[mask]


def _task_labels(task: TaskRecord) -> Array:
    return np.repeat(np.asarray(task.class_ids, dtype=np.int64), task.size_per_class)


def generate_synthetic(
    spec: StreamSpec,
    input_dim: int,
    class_sep: float = 3.0,
    noise_std: float = 1.0,
) -> TaskStream:
    """Materialize a stream of Gaussian blobs around fixed class means.

    Class means are drawn once from the data seed onto the radius-class_sep
    hypersphere; each sample is its class mean plus isotropic noise. Train
    draws use one RNG substream per class and test draws another, so the two
    splits never share randomness and per-class counts are exact.
    """
    if input_dim < 2:
        raise ConfigError(f"generate_synthetic: input_dim={input_dim} must be >= 2")
    c = spec.num_classes

    mean_rng = np.random.default_rng([spec.data_seed, 0])
    raw = mean_rng.normal(size=(c, input_dim))
    means = class_sep * raw / np.linalg.norm(raw, axis=1, keepdims=True)

    counts = longtail_counts(c, spec.n_max, spec.rho)
    tasks = order_tasks(
        partition_and_balance(counts, c, spec.num_tasks),
        spec.ordering,
        spec.order_seed,
        n_max=spec.n_max,
    )

    train_x, train_y = [], []
    for task in tasks:
        rows = []
        for class_id in task.class_ids:
            rng = np.random.default_rng([spec.data_seed, 1, class_id])
            noise = rng.normal(0.0, 1.0, size=(task.size_per_class, input_dim))
            rows.append(means[class_id] + noise_std * noise)
        train_x.append(np.concatenate(rows, axis=0))
        train_y.append(_task_labels(task))

    test_rows = []
    for class_id in range(c):
        rng = np.random.default_rng([spec.data_seed, 2, class_id])
        noise = rng.normal(0.0, 1.0, size=(spec.test_per_class, input_dim))
        test_rows.append(means[class_id] + noise_std * noise)
    test_x = np.concatenate(test_rows, axis=0)
    test_y = np.repeat(np.arange(c, dtype=np.int64), spec.test_per_class)

    return TaskStream(
        spec=spec,
        input_dim=input_dim,
        class_sep=class_sep,
        noise_std=noise_std,
        tasks=tasks,
        train_x=train_x,
        train_y=train_y,
        test_x=test_x,
        test_y=test_y,
    )


def save_stream(stream: TaskStream, path) -> None:
    """Write the stream container; payload is all train splits then the test set."""
    header = stream.header_dict()
    header["fingerprint"] = stream.fingerprint()
    payloads = list(stream.train_x) + [stream.test_x]
    write_container(path, _STREAM_MAGIC, _STREAM_VERSION, header, payloads)


def read_stream_header(path) -> dict:
    """Header-only read: spec, task layout, and fingerprint, no sample payload."""
    header, _ = read_header(path, _STREAM_MAGIC, _STREAM_VERSION)
    return header


def load_stream(path) -> TaskStream:
    header, payload = read_container(path, _STREAM_MAGIC, _STREAM_VERSION)
    try:
        spec = StreamSpec(**header["spec"])
        input_dim = int(header["input_dim"])
        tasks = [
            TaskRecord(
                task_id=int(t["task_id"]),
                class_ids=tuple(int(x) for x in t["class_ids"]),
                size_per_class=int(t["size_per_class"]),
            )
            for t in header["tasks"]
        ]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed stream header ({exc})") from exc

    offset = 0
    train_x, train_y = [], []
    for task in tasks:
        x, offset = take_f64(payload, offset, (task.total_size, input_dim))
        train_x.append(x)
        train_y.append(_task_labels(task))
    test_shape = (spec.num_classes * spec.test_per_class, input_dim)
    test_x, offset = take_f64(payload, offset, test_shape)
    if offset != len(payload):
        raise FormatError(
            f"{path}: {len(payload) - offset} unexpected trailing payload bytes",
            offset=offset,
        )
    test_y = np.repeat(np.arange(spec.num_classes, dtype=np.int64), spec.test_per_class)

    stream = TaskStream(
        spec=spec,
        input_dim=input_dim,
        class_sep=float(header["class_sep"]),
        noise_std=float(header["noise_std"]),
        tasks=tasks,
        train_x=train_x,
        train_y=train_y,
        test_x=test_x,
        test_y=test_y,
    )
    stored = header.get("fingerprint")
    if stored is not None and stored != stream.fingerprint():
        raise FormatError(f"{path}: stored fingerprint does not match payload")
    return stream
