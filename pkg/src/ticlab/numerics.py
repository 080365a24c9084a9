"""Dense float64 kernels for the fixed prompt-classifier graph.

Everything here is a deterministic function of its ndarray inputs. The graph
whose gradients we need is fixed: embedded feature tokens are concatenated
behind a trainable prompt block, pushed through one single-head attention
block with a residual connection, mean-pooled, and classified by a linear
head; the loss is mean cross-entropy plus optional cosine-alignment penalties
on the flattened prompt. Backward passes are hand-derived for exactly this
graph (no general autodiff) and checked against finite differences in tests.

Shapes follow numpy broadcasting: token stacks may be a single sequence
``(S, d)`` or a batch ``(n, S, d)``; the same code path handles both.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, GradientError, ShapeError

Array = np.ndarray


def as_f64(x) -> Array:
    """Coerce to a float64 ndarray without copying when already one."""
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# layer forwards
# ---------------------------------------------------------------------------


def linear_forward(x: Array, w: Array, b: Array) -> Array:
    """y = x @ w + b with the bias row broadcast over rows of x."""
    x, w, b = as_f64(x), as_f64(w), as_f64(b)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"linear_forward: x has {x.shape[-1]} columns but w has "
            f"{w.shape[0]} rows (x {x.shape} @ w {w.shape})"
        )
    if b.shape != (1, w.shape[1]):
        raise ShapeError(
            f"linear_forward: bias shape {b.shape} does not match (1, {w.shape[1]})"
        )
    return x @ w + b


def softmax_rows(z: Array) -> Array:
    """Row-wise stable softmax over the last axis."""
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(tokens: Array, wq: Array, wk: Array, wv: Array, wo: Array) -> Array:
    """Single-head self-attention block with a residual connection.

    out = tokens + softmax(Q K^T / sqrt(d)) V @ wo, where Q/K/V are linear
    maps of the input rows. Accepts (S, d) or a stacked batch (n, S, d).
    """
    out, _ = attention_forward_cache(tokens, wq, wk, wv, wo)
    return out


@dataclass
class _AttnCache:
    tokens: Array
    q: Array
    k: Array
    v: Array
    attn: Array
    wq: Array
    wk: Array
    wv: Array
    wo: Array


def attention_forward_cache(tokens, wq, wk, wv, wo) -> tuple[Array, _AttnCache]:
    tokens = as_f64(tokens)
    wq, wk, wv, wo = map(as_f64, (wq, wk, wv, wo))
    d = tokens.shape[-1]
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if w.shape != (d, d):
            raise ShapeError(
                f"attention_forward: {name} shape {w.shape} does not match "
                f"token width ({d}, {d})"
            )
    q = tokens @ wq
    k = tokens @ wk
    v = tokens @ wv
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(d)
    attn = softmax_rows(scores)
    out = tokens + (attn @ v) @ wo
    return out, _AttnCache(tokens, q, k, v, attn, wq, wk, wv, wo)


def attention_backward(d_out: Array, cache: _AttnCache) -> Array:
    """Gradient of the block output w.r.t. its input token rows."""
    d = cache.tokens.shape[-1]
    dh = d_out @ cache.wo.T
    d_attn = dh @ np.swapaxes(cache.v, -1, -2)
    dv = np.swapaxes(cache.attn, -1, -2) @ dh
    # softmax Jacobian per row: ds = a * (da - sum(da * a))
    ds = cache.attn * (d_attn - (d_attn * cache.attn).sum(axis=-1, keepdims=True))
    ds = ds / math.sqrt(d)
    dq = ds @ cache.k
    dk = np.swapaxes(ds, -1, -2) @ cache.q
    return d_out + dq @ cache.wq.T + dk @ cache.wk.T + dv @ cache.wv.T


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def log_softmax_rows(logits: Array) -> Array:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Array, labels) -> float:
    """Mean over rows of -log softmax(logits)[label]."""
    logits = as_f64(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(
            f"cross_entropy: {n} logit rows but labels shape {labels.shape}"
        )
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= c:
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise IndexError(f"cross_entropy: label {bad} outside [0, {c})")
    logp = log_softmax_rows(logits)
    return float(-logp[np.arange(n), labels].mean())


def cross_entropy_backward(logits: Array, labels) -> Array:
    """d(mean CE)/d(logits) = (softmax - onehot) / n, elementwise exact."""
    logits = as_f64(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    g = softmax_rows(logits)
    g[np.arange(n), labels] -= 1.0
    return g / n


def cosine_align_loss(a: Array, b: Array) -> float:
    """1 - cos(a, b) on flattened vectors; in [0, 2], symmetric."""
    a = as_f64(a).ravel()
    b = as_f64(b).ravel()
    if a.shape != b.shape:
        raise ShapeError(
            f"cosine_align_loss: flattened sizes differ ({a.size} vs {b.size})"
        )
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError(
            "cosine_align_loss: zero-norm input has no direction to align"
        )
    return 1.0 - float(a @ b) / (na * nb)


def cosine_align_backward(a: Array, b: Array) -> Array:
    """Gradient of cosine_align_loss w.r.t. `a` (with `b` held constant)."""
    a = as_f64(a).ravel()
    b = as_f64(b).ravel()
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError(
            "cosine_align_loss: zero-norm input has no direction to align"
        )
    dot = float(a @ b)
    return -b / (na * nb) + dot * a / (na**3 * nb)


# ---------------------------------------------------------------------------
# fixed graph: forward tape + backward
# ---------------------------------------------------------------------------

TRAINABLE_NAMES = ("prompt", "head_w", "head_b")


class GradientSet(Mapping):
    """Gradients keyed by trainable name; frozen tensors are simply absent."""

    def __init__(self, grads: dict[str, Array]):
        self._grads = grads

    def __getitem__(self, name: str) -> Array:
        try:
            return self._grads[name]
        except KeyError:
            raise GradientError(
                f"no gradient recorded for {name!r}; only trainable tensors "
                f"{sorted(self._grads)} are differentiated"
            ) from None

    def __iter__(self):
        return iter(self._grads)

    def __len__(self):
        return len(self._grads)


@dataclass
class GraphTape:
    """Recorded forward pass of the fixed graph, consumed by backward()."""

    loss: float
    ce: float
    prompt: Array
    prompt_len: int
    seq_len: int
    attn_cache: _AttnCache
    rep: Array
    logits: Array
    label_idx: Array
    active: Array
    head_w: Array
    head_shape: tuple[int, int]
    align_terms: tuple[tuple[float, Array], ...]
    n: int


def graph_forward(
    prompt: Array,
    tokens: Array,
    wq: Array,
    wk: Array,
    wv: Array,
    wo: Array,
    head_w: Array,
    head_b: Array,
    labels,
    active_classes: Array | None = None,
    align_terms: tuple[tuple[float, Array], ...] = (),
) -> tuple[float, GraphTape]:
    """Run the fixed graph on a batch and record a tape for backward().

    tokens: (n, L, d) embedded feature tokens, constant w.r.t. trainables.
    prompt: (L_p, d), broadcast in front of every sample's token rows.
    active_classes: sorted class indices kept in the cross-entropy; columns
        of the head outside it receive zero gradient (class-incremental
        masking). None means all classes.
    align_terms: (coefficient, anchor) pairs adding
        coeff * cosine_align_loss(prompt, anchor); anchors are constants.
        Zero-coefficient terms are dropped so the limit cases execute the
        exact single-anchor computation.
    """
    prompt = as_f64(prompt)
    tokens = as_f64(tokens)
    head_w, head_b = as_f64(head_w), as_f64(head_b)
    labels = np.asarray(labels, dtype=np.int64)
    n, seq_feat, d = tokens.shape
    lp = prompt.shape[0]
    if prompt.shape[1] != d:
        raise ShapeError(
            f"graph_forward: prompt width {prompt.shape[1]} != token width {d}"
        )

    stacked = np.concatenate(
        [np.broadcast_to(prompt, (n, lp, d)), tokens], axis=1
    )
    out, attn_cache = attention_forward_cache(stacked, wq, wk, wv, wo)
    rep = out.mean(axis=1)

    if active_classes is None:
        active = np.arange(head_w.shape[1], dtype=np.int64)
    else:
        active = np.asarray(active_classes, dtype=np.int64)
    w_act = head_w[:, active]
    b_act = head_b[:, active]
    logits = rep @ w_act + b_act

    label_idx = np.searchsorted(active, labels)
    if label_idx.max(initial=-1) >= active.size or np.any(active[label_idx] != labels):
        raise IndexError(
            "graph_forward: batch contains labels outside the active class set"
        )
    ce = cross_entropy(logits, label_idx)

    kept = tuple((float(c), as_f64(anchor)) for c, anchor in align_terms if c != 0.0)
    loss = ce
    for coeff, anchor in kept:
        loss += coeff * cosine_align_loss(prompt, anchor)

    tape = GraphTape(
        loss=loss,
        ce=ce,
        prompt=prompt,
        prompt_len=lp,
        seq_len=lp + seq_feat,
        attn_cache=attn_cache,
        rep=rep,
        logits=logits,
        label_idx=label_idx,
        active=active,
        head_w=head_w,
        head_shape=(head_w.shape[0], head_w.shape[1]),
        align_terms=kept,
        n=n,
    )
    return loss, tape


def backward(tape: GraphTape) -> GradientSet:
    """Exact gradients of the recorded scalar loss for every trainable."""
    d_logits = cross_entropy_backward(tape.logits, tape.label_idx)

    dim, n_classes = tape.head_shape
    d_head_w = np.zeros((dim, n_classes))
    d_head_b = np.zeros((1, n_classes))
    d_head_w[:, tape.active] = tape.rep.T @ d_logits
    d_head_b[0, tape.active] = d_logits.sum(axis=0)

    d_rep = d_logits @ tape.head_w[:, tape.active].T
    s = tape.seq_len
    d_out = np.repeat(d_rep[:, None, :] / s, s, axis=1)
    d_stacked = attention_backward(d_out, tape.attn_cache)
    # prompt rows are shared across the batch
    d_prompt = d_stacked[:, : tape.prompt_len, :].sum(axis=0)

    for coeff, anchor in tape.align_terms:
        d_prompt = d_prompt + coeff * cosine_align_backward(
            tape.prompt, anchor
        ).reshape(tape.prompt.shape)

    return GradientSet({"prompt": d_prompt, "head_w": d_head_w, "head_b": d_head_b})


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for one parameter tensor."""

    m: Array
    v: Array
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.9
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_param(cls, param: Array, lr=0.01, beta1=0.9, beta2=0.9, eps=1e-8):
        param = as_f64(param)
        return cls(
            m=np.zeros_like(param),
            v=np.zeros_like(param),
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(param: Array, grad: Array, state: AdamState) -> Array:
    """One bias-corrected Adam update; mutates state, returns the new param."""
    param, grad = as_f64(param), as_f64(grad)
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError(
            f"adam_step: param {param.shape}, grad {grad.shape}, "
            f"moments {state.m.shape} must all match"
        )
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class ParamBundle:
    """Trainables for one training phase: a prompt plus the classifier head."""

    prompt: Array
    head_w: Array
    head_b: Array
    opt: dict[str, AdamState] = field(default_factory=dict)

    @classmethod
    def create(cls, prompt, head_w, head_b, lr=0.01, beta1=0.9, beta2=0.9, eps=1e-8):
        bundle = cls(prompt=as_f64(prompt), head_w=as_f64(head_w), head_b=as_f64(head_b))
        for name in TRAINABLE_NAMES:
            bundle.opt[name] = AdamState.for_param(
                getattr(bundle, name), lr=lr, beta1=beta1, beta2=beta2, eps=eps
            )
        return bundle

    def apply(self, grads: GradientSet) -> None:
        for name in TRAINABLE_NAMES:
            updated = adam_step(getattr(self, name), grads[name], self.opt[name])
            setattr(self, name, updated)
