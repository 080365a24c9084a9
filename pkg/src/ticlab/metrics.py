"""Stability/plasticity metrics over the accuracy matrix, plus linear probes.

All metrics are pure functions of the matrix. Acc[i][j] is test accuracy on
task j after finishing training on task i, defined for j <= i only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import ClassifierHead, FrozenBackbone, represent, tokenize
from .errors import StreamError, TiclabError
from .numerics import (
    AdamState,
    Array,
    adam_step,
    cross_entropy_backward,
    linear_forward,
)


class AccuracyMatrix:
    """Lower-triangular matrix of per-task test accuracies in [0, 1]."""

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise TiclabError("AccuracyMatrix: need at least one task")
        self.num_tasks = num_tasks
        self._acc = np.full((num_tasks, num_tasks), np.nan)

    def set(self, after_task: int, on_task: int, value: float) -> None:
        if on_task > after_task:
            raise TiclabError(
                f"AccuracyMatrix: entry ({after_task}, {on_task}) is above the "
                "diagonal; accuracy on unseen tasks is undefined"
            )
        if not (0.0 <= value <= 1.0):
            raise TiclabError(f"AccuracyMatrix: accuracy {value} outside [0, 1]")
        self._acc[after_task, on_task] = value

    def get(self, after_task: int, on_task: int) -> float:
        v = self._acc[after_task, on_task]
        if on_task > after_task or np.isnan(v):
            raise TiclabError(f"AccuracyMatrix: entry ({after_task}, {on_task}) unset")
        return float(v)

    def is_complete(self) -> bool:
        idx = np.tril_indices(self.num_tasks)
        return not np.isnan(self._acc[idx]).any()

    def _require_complete(self):
        if not self.is_complete():
            raise TiclabError("AccuracyMatrix: lower triangle is incomplete")

    def to_csv_text(self) -> str:
        """Fixed schema: header then one row per training step, %.6f cells."""
        t = self.num_tasks
        lines = ["after_task," + ",".join(f"acc_{j}" for j in range(t))]
        for i in range(t):
            cells = [f"{self._acc[i, j]:.6f}" if j <= i else "" for j in range(t)]
            lines.append(f"{i}," + ",".join(cells))
        return "\n".join(lines) + "\n"


def evaluate(prompt: Array, head: ClassifierHead, backbone: FrozenBackbone, x, y) -> float:
    """Argmax accuracy over all classes; ties break to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if y.shape[0] == 0:
        raise StreamError("evaluate: empty test split")
    rep = represent(prompt, tokenize(x, backbone), backbone)
    logits = linear_forward(rep, head.w, head.b)
    pred = logits.argmax(axis=1)
    return float((pred == y).mean())


@dataclass
class PFSummary:
    """Per-task plasticity/forgetting and their averages."""

    plasticity: Array   # P_t = Acc[t, t]
    forgetting: Array   # F_t = Acc[t, t] - Acc[T-1, t]; last entry is 0
    mean_plasticity: float
    mean_forgetting: float  # averaged over t < T-1 (last task forgets nothing)


def plasticity_forgetting(matrix: AccuracyMatrix) -> PFSummary:
    matrix._require_complete()
    t = matrix.num_tasks
    plasticity = np.array([matrix.get(i, i) for i in range(t)])
    final_row = np.array([matrix.get(t - 1, j) for j in range(t)])
    forgetting = plasticity - final_row
    mean_f = float(forgetting[:-1].mean()) if t > 1 else 0.0
    return PFSummary(
        plasticity=plasticity,
        forgetting=forgetting,
        mean_plasticity=float(plasticity.mean()),
        mean_forgetting=mean_f,
    )


def seen_task_averages(matrix: AccuracyMatrix) -> Array:
    """A_t: mean accuracy over all seen tasks after training task t."""
    matrix._require_complete()
    t = matrix.num_tasks
    return np.array(
        [np.mean([matrix.get(i, j) for j in range(i + 1)]) for i in range(t)]
    )


def summary_accuracies(matrix: AccuracyMatrix) -> tuple[float, float]:
    """(A_N, A_L): mean of the seen-task averages, and the final one."""
    a = seen_task_averages(matrix)
    return float(a.mean()), float(a[-1])


def linear_probe(
    backbone: FrozenBackbone,
    prompt: Array,
    stream,
    probe_epochs: int = 200,
    lr: float = 0.01,
) -> float:
    """Accuracy of a fresh linear head trained on frozen representations.

    The probe trains on a balanced resampling of the stream's train data over
    all classes (each class subsampled to the global minimum per-class count)
    and is scored on the balanced test set. The prompt and any run state are
    untouched; representations are cached since only the head moves.
    """
    k = min(t.size_per_class for t in stream.tasks)
    c = stream.spec.num_classes
    train_x = np.concatenate(
        [stream.class_train_x(cls)[:k] for cls in range(c)], axis=0
    )
    train_y = np.repeat(np.arange(c, dtype=np.int64), k)

    reps = represent(prompt, tokenize(train_x, backbone), backbone)
    test_reps = represent(prompt, tokenize(stream.test_x, backbone), backbone)

    w = np.zeros((backbone.cfg.embed_dim, c))
    b = np.zeros((1, c))
    opt_w = AdamState.for_param(w, lr=lr)
    opt_b = AdamState.for_param(b, lr=lr)
    for _ in range(probe_epochs):
        logits = reps @ w + b
        d_logits = cross_entropy_backward(logits, train_y)
        w = adam_step(w, reps.T @ d_logits, opt_w)
        b = adam_step(b, d_logits.sum(axis=0, keepdims=True), opt_b)

    pred = (test_reps @ w + b).argmax(axis=1)
    return float((pred == np.asarray(stream.test_y)).mean())


def probe_curve(backbone, prompts, stream, probe_epochs: int = 200, lr: float = 0.01):
    """One probe accuracy per prompt snapshot (one snapshot per task)."""
    return np.array(
        [linear_probe(backbone, p, stream, probe_epochs=probe_epochs, lr=lr) for p in prompts]
    )
