"""Two-phase anchored prompt training over an imbalanced task stream.

Per task: phase 1 fits a fresh task prompt (the boosting anchor) with plain
cross-entropy; the stabilizing anchor, an inverse-size-weighted running center
of all boosting anchors, is then updated online; finally phase 2 trains the
single general prompt with cross-entropy plus cosine alignment toward both
anchors, weighted by a stability-plasticity factor computed from the current
task size min-max-normalized over all observed task sizes. Only the general
prompt and the classifier head persist across tasks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneConfig, ClassifierHead, FrozenBackbone, tokenize
from .container import read_container, write_container
from .errors import ConfigError, FormatError, StreamError, TiclabError
from .metrics import AccuracyMatrix, evaluate
from .numerics import Array, ParamBundle, as_f64, backward, graph_forward
from .streams import TaskStream

MODES = (
    "dap",
    "general_only",
    "boosting_only",
    "stabilizing_only",
    "fixed_lambda",
    "task_specific_only",
)

LAMBDA_SEMANTICS = ("as_equations", "as_prose")

_STATE_MAGIC = b"DAPS"
_STATE_VERSION = 1


@dataclass(frozen=True)
class DapConfig:
    mode: str = "dap"
    epochs_phase1: int = 5
    epochs_phase2: int = 5
    batch_size: int = 64
    epsilon: float = 1e-6            # guards the lambda denominator
    fixed_lambda: float = 0.5        # only read when mode == "fixed_lambda"
    # "as_prose" swaps the two alignment coefficients; study toggle only.
    lambda_semantics: str = "as_equations"
    # training-loss class mask: "task" restricts the cross-entropy to the
    # current task's classes (train-time task identity, the prompt-CIL
    # discipline); "seen" keeps every class observed so far active.
    # Evaluation is never masked.
    class_mask: str = "task"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.9
    eps_opt: float = 1e-8
    prompt_init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"dap: unknown mode {self.mode!r}, expected one of {MODES}")
        if self.epsilon <= 0:
            raise ConfigError(f"dap: epsilon={self.epsilon} must be > 0")
        if not (0.0 <= self.fixed_lambda <= 1.0):
            raise ConfigError(f"dap: fixed_lambda={self.fixed_lambda} must be in [0, 1]")
        if self.lambda_semantics not in LAMBDA_SEMANTICS:
            raise ConfigError(
                f"dap: lambda_semantics={self.lambda_semantics!r} must be one of "
                f"{LAMBDA_SEMANTICS}"
            )
        if self.class_mask not in ("task", "seen"):
            raise ConfigError(
                f"dap: class_mask={self.class_mask!r} must be 'task' or 'seen'"
            )
        if self.epochs_phase1 < 1 or self.epochs_phase2 < 1:
            raise ConfigError("dap: epoch counts must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("dap: batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "epochs_phase1": self.epochs_phase1,
            "epochs_phase2": self.epochs_phase2,
            "batch_size": self.batch_size,
            "epsilon": self.epsilon,
            "fixed_lambda": self.fixed_lambda,
            "lambda_semantics": self.lambda_semantics,
            "class_mask": self.class_mask,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps_opt": self.eps_opt,
            "prompt_init_std": self.prompt_init_std,
            "seed": self.seed,
        }


@dataclass
class AnchorState:
    """Stabilizing anchor plus the running scalars its update and lambda need."""

    stabilizing: Array | None = None   # inverse-size-weighted center of task prompts
    weight_sum: float = 0.0            # sum of 1/N_i over tasks seen
    n_min: int | None = None
    n_max: int | None = None
    tasks_seen: int = 0


def update_stabilizing_anchor(anchors: AnchorState, task_prompt: Array, n_t: int) -> AnchorState:
    """Fold one task prompt into the running inverse-size-weighted center.

    new center = (weight_sum * old + task_prompt / n_t) / (weight_sum + 1/n_t),
    which keeps the center equal to sum(p_i / N_i) / sum(1 / N_i) without
    storing any past prompt. Task-size extrema are updated alongside.
    """
    if n_t < 1:
        raise StreamError(f"update_stabilizing_anchor: task size {n_t} must be >= 1")
    task_prompt = as_f64(task_prompt)
    w = 1.0 / n_t
    if anchors.stabilizing is None:
        center = task_prompt.copy()
    else:
        center = (anchors.weight_sum * anchors.stabilizing + task_prompt * w) / (
            anchors.weight_sum + w
        )
    return AnchorState(
        stabilizing=center,
        weight_sum=anchors.weight_sum + w,
        n_min=n_t if anchors.n_min is None else min(anchors.n_min, n_t),
        n_max=n_t if anchors.n_max is None else max(anchors.n_max, n_t),
        tasks_seen=anchors.tasks_seen + 1,
    )


def compute_lambda(n_t: int, anchors: AnchorState, epsilon: float) -> float:
    """Min-max-normalized current task size over observed task-size extrema.

    The extrema must already include n_t. Equals 0 when the current task is
    the smallest seen (or all sizes are equal) and approaches 1 when it is
    the largest.
    """
    if anchors.n_min is None or anchors.n_max is None:
        raise StreamError("compute_lambda: no task sizes observed yet")
    if not (anchors.n_min <= n_t <= anchors.n_max):
        raise StreamError(
            f"compute_lambda: extrema [{anchors.n_min}, {anchors.n_max}] do not "
            f"include current task size {n_t}"
        )
    return (n_t - anchors.n_min) / (anchors.n_max - anchors.n_min + epsilon)


@dataclass
class TaskLog:
    stream_pos: int
    task_id: int
    n_t: int
    lam: float | None                 # None for modes without a mixing factor
    phase1_losses: list[float] = field(default_factory=list)
    phase2_losses: list[float] = field(default_factory=list)


@dataclass
class ContinualState:
    """Everything a run carries forward, plus its per-task log."""

    general_prompt: Array
    head: ClassifierHead
    anchors: AnchorState
    logs: list[TaskLog] = field(default_factory=list)
    # stream_pos -> task prompt; only populated in task_specific_only mode
    task_prompts: dict[int, Array] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# training phases
# ---------------------------------------------------------------------------


def _optimize(prompt, head, tokens, labels, backbone, cfg, rng, active, align, epochs):
    """Minibatch Adam over (prompt, head) for the given loss; returns losses.

    Epoch losses are the pre-update batch means. On full-batch runs a loss
    increase beyond 1e-6 per epoch is reported as a warning, not an error.
    """
    bundle = ParamBundle.create(
        prompt, head.w, head.b,
        lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps_opt,
    )
    n = labels.shape[0]
    full_batch = cfg.batch_size >= n
    losses = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, tape = graph_forward(
                bundle.prompt,
                tokens[idx],
                backbone.wq, backbone.wk, backbone.wv, backbone.wo,
                bundle.head_w, bundle.head_b,
                labels[idx],
                active_classes=active,
                align_terms=align,
            )
            bundle.apply(backward(tape))
            batch_losses.append(loss)
        mean_loss = float(np.mean(batch_losses))
        if not np.isfinite(mean_loss):
            raise TiclabError("training loss became non-finite")
        if full_batch and losses and mean_loss > losses[-1] + 1e-6:
            warnings.warn(
                f"full-batch loss increased {losses[-1]:.6g} -> {mean_loss:.6g}",
                stacklevel=2,
            )
        losses.append(mean_loss)
    head.w, head.b = bundle.head_w, bundle.head_b
    return bundle.prompt, losses


def train_phase1(task_x, task_y, backbone, head, cfg, init_rng, shuffle_rng, active):
    """Fit a fresh task prompt (boosting anchor) with cross-entropy only."""
    if task_y.shape[0] == 0:
        raise StreamError("train_phase1: task has no samples")
    prompt = init_rng.normal(
        0.0, cfg.prompt_init_std, size=(backbone.cfg.prompt_len, backbone.cfg.embed_dim)
    )
    tokens = tokenize(task_x, backbone)
    return _optimize(
        prompt, head, tokens, task_y, backbone, cfg, shuffle_rng, active,
        align=(), epochs=cfg.epochs_phase1,
    )


def align_terms_for(cfg: DapConfig, lam: float | None, anchors: AnchorState, task_prompt):
    """Alignment (coefficient, anchor) pairs for phase 2 under the given mode."""
    if cfg.mode == "general_only":
        return ()
    if cfg.mode == "boosting_only":
        return ((1.0, task_prompt),)
    if cfg.mode == "stabilizing_only":
        return ((1.0, anchors.stabilizing),)
    stabilizing_coeff, boosting_coeff = lam, 1.0 - lam
    if cfg.lambda_semantics == "as_prose":
        stabilizing_coeff, boosting_coeff = boosting_coeff, stabilizing_coeff
    return ((stabilizing_coeff, anchors.stabilizing), (boosting_coeff, task_prompt))


def train_phase2(task_x, task_y, state, align, backbone, cfg, shuffle_rng, active):
    """Update the general prompt and head; anchors enter as constants."""
    tokens = tokenize(task_x, backbone)
    prompt, losses = _optimize(
        state.general_prompt, state.head, tokens, task_y, backbone, cfg,
        shuffle_rng, active, align=align, epochs=cfg.epochs_phase2,
    )
    state.general_prompt = prompt
    return losses


# ---------------------------------------------------------------------------
# continual driver
# ---------------------------------------------------------------------------


def run_continual(
    stream: TaskStream,
    backbone: FrozenBackbone,
    cfg: DapConfig,
    after_task=None,
) -> tuple[ContinualState, AccuracyMatrix]:
    """Train through the stream and fill the lower-triangular accuracy matrix.

    RNG streams derive from (seed, mode, stream fingerprint), so identical
    inputs reproduce bit-identical results. `after_task(state, pos)` is called
    once per task for observation (snapshots, serialization probes); it must
    not mutate the state.
    """
    if backbone.cfg.num_classes_total != stream.spec.num_classes:
        raise ConfigError(
            f"run_continual: backbone covers {backbone.cfg.num_classes_total} "
            f"classes but stream has {stream.spec.num_classes}"
        )
    fp_int = int(stream.fingerprint()[:16], 16)
    mode_id = MODES.index(cfg.mode)

    def rng(*tags):
        return np.random.default_rng([cfg.seed, mode_id, fp_int, *tags])

    frozen_fp = backbone.fingerprint()
    bc = backbone.cfg
    state = ContinualState(
        general_prompt=rng(0, 0).normal(
            0.0, cfg.prompt_init_std, size=(bc.prompt_len, bc.embed_dim)
        ),
        head=ClassifierHead.zeros(bc),
        anchors=AnchorState(),
    )
    num_tasks = len(stream.tasks)
    matrix = AccuracyMatrix(num_tasks)
    seen: set[int] = set()

    for pos, task in enumerate(stream.tasks):
        x, y = stream.train_x[pos], stream.train_y[pos]
        if y.shape[0] == 0:
            raise StreamError(f"run_continual: task at position {pos} is empty")
        seen |= set(task.class_ids)
        mask_source = task.class_ids if cfg.class_mask == "task" else seen
        active = np.array(sorted(mask_source), dtype=np.int64)
        log = TaskLog(stream_pos=pos, task_id=task.task_id, n_t=task.total_size, lam=None)

        if cfg.mode == "general_only":
            log.phase2_losses = train_phase2(
                x, y, state, (), backbone, cfg, rng(pos, 2), active
            )
        else:
            task_prompt, log.phase1_losses = train_phase1(
                x, y, backbone, state.head, cfg, rng(pos, 1), rng(pos, 3), active
            )
            if cfg.mode == "task_specific_only":
                state.task_prompts[pos] = task_prompt
            else:
                state.anchors = update_stabilizing_anchor(
                    state.anchors, task_prompt, task.total_size
                )
                if cfg.mode == "dap":
                    log.lam = compute_lambda(task.total_size, state.anchors, cfg.epsilon)
                elif cfg.mode == "fixed_lambda":
                    log.lam = cfg.fixed_lambda
                align = align_terms_for(cfg, log.lam, state.anchors, task_prompt)
                log.phase2_losses = train_phase2(
                    x, y, state, align, backbone, cfg, rng(pos, 2), active
                )
        state.logs.append(log)

        for j in range(pos + 1):
            test_x, test_y = stream.task_test_split(j)
            prompt = (
                state.task_prompts[j]
                if cfg.mode == "task_specific_only"
                else state.general_prompt
            )
            matrix.set(pos, j, evaluate(prompt, state.head, backbone, test_x, test_y))

        if backbone.fingerprint() != frozen_fp:
            raise TiclabError("frozen backbone was mutated during training")
        if after_task is not None:
            after_task(state, pos)

    return state, matrix


# ---------------------------------------------------------------------------
# persistent state: general prompt + head only
# ---------------------------------------------------------------------------


def serialize_state(state: ContinualState, backbone: FrozenBackbone, cfg: DapConfig) -> bytes:
    """Canonical bytes of the persistent model: general prompt + head.

    The header carries only fixed-size provenance, so the byte size is
    independent of how many tasks have been learned (rehearsal-free contract).
    """
    from .container import canonical_json
    import struct
    import zlib

    bc = backbone.cfg
    header = {
        "backbone_fingerprint": backbone.fingerprint(),
        "mode": cfg.mode,
        "prompt_shape": [bc.prompt_len, bc.embed_dim],
        "head_shape": [bc.embed_dim, bc.num_classes_total],
    }
    body = bytearray()
    body += _STATE_MAGIC
    body += struct.pack("<H", _STATE_VERSION)
    header_bytes = canonical_json(header)
    body += struct.pack("<I", len(header_bytes))
    body += header_bytes
    for arr in (state.general_prompt, state.head.w, state.head.b):
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def save_state(path, state: ContinualState, backbone: FrozenBackbone, cfg: DapConfig) -> None:
    bc = backbone.cfg
    header = {
        "backbone_fingerprint": backbone.fingerprint(),
        "mode": cfg.mode,
        "prompt_shape": [bc.prompt_len, bc.embed_dim],
        "head_shape": [bc.embed_dim, bc.num_classes_total],
    }
    write_container(
        path, _STATE_MAGIC, _STATE_VERSION, header,
        [state.general_prompt, state.head.w, state.head.b],
    )


def load_state(path) -> tuple[Array, ClassifierHead, dict]:
    from .container import take_f64

    header, payload = read_container(path, _STATE_MAGIC, _STATE_VERSION)
    try:
        p_shape = tuple(int(v) for v in header["prompt_shape"])
        h_shape = tuple(int(v) for v in header["head_shape"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed state header ({exc})") from exc
    offset = 0
    prompt, offset = take_f64(payload, offset, p_shape)
    w, offset = take_f64(payload, offset, h_shape)
    b, offset = take_f64(payload, offset, (1, h_shape[1]))
    if offset != len(payload):
        raise FormatError(f"{path}: unexpected trailing payload bytes", offset=offset)
    return prompt, ClassifierHead(w=w, b=b), header


def run_manifest(
    cfg: DapConfig,
    stream: TaskStream,
    backbone: FrozenBackbone,
    state: ContinualState,
) -> dict:
    """Reproducibility record for one continual run (canonical JSON-able)."""
    return {
        "config": cfg.to_dict(),
        "stream_spec": stream.spec.to_dict(),
        "stream_fingerprint": stream.fingerprint(),
        "backbone_config": backbone.cfg.to_dict(),
        "backbone_fingerprint": backbone.fingerprint(),
        "oracle_prompt_selection": cfg.mode == "task_specific_only",
        "tasks": [
            {
                "stream_pos": log.stream_pos,
                "task_id": log.task_id,
                "n_t": log.n_t,
                "lambda": log.lam,
                "phase1_final_loss": log.phase1_losses[-1] if log.phase1_losses else None,
                "phase2_final_loss": log.phase2_losses[-1] if log.phase2_losses else None,
            }
            for log in state.logs
        ],
    }
