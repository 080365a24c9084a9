"""Frozen feature pathway: fixed-seed tokenizer plus one frozen attention block.

The encoder weights are drawn once from a seeded Gaussian and never trained;
only a prompt block and the classifier head receive gradients. A fingerprint
over all frozen values backs the frozen contract asserted throughout runs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import Array, as_f64, attention_forward, linear_forward


@dataclass(frozen=True)
class BackboneConfig:
    input_dim: int = 32          # raw sample dimension
    token_count: int = 4         # feature tokens per sample
    embed_dim: int = 16          # token width d
    prompt_len: int = 4          # prompt rows prepended to the token stack
    num_classes_total: int = 20
    freeze_seed: int = 123

    def __post_init__(self):
        if self.token_count < 1 or self.input_dim < 1:
            raise ConfigError("backbone: input_dim and token_count must be >= 1")
        if self.input_dim % self.token_count != 0:
            raise ConfigError(
                f"backbone: input_dim={self.input_dim} is not divisible by "
                f"token_count={self.token_count}"
            )
        if self.embed_dim < 2:
            raise ConfigError(f"backbone: embed_dim={self.embed_dim} must be >= 2")
        if self.prompt_len < 1:
            raise ConfigError(f"backbone: prompt_len={self.prompt_len} must be >= 1")
        if self.num_classes_total < 1:
            raise ConfigError("backbone: num_classes_total must be >= 1")

    @property
    def slice_dim(self) -> int:
        return self.input_dim // self.token_count

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "token_count": self.token_count,
            "embed_dim": self.embed_dim,
            "prompt_len": self.prompt_len,
            "num_classes_total": self.num_classes_total,
            "freeze_seed": self.freeze_seed,
        }


@dataclass(frozen=True)
class FrozenBackbone:
    """Immutable frozen weights; safe to share across runs and threads."""

    cfg: BackboneConfig
    embed: Array    # (token_count, slice_dim, embed_dim), no bias
    wq: Array
    wk: Array
    wv: Array
    wo: Array

    def fingerprint(self) -> str:
        """Hash of the config and every frozen value, hex-encoded."""
        h = hashlib.sha256()
        h.update(json.dumps(self.cfg.to_dict(), sort_keys=True).encode())
        for arr in (self.embed, self.wq, self.wk, self.wv, self.wo):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def init_backbone(cfg: BackboneConfig) -> FrozenBackbone:
    """Draw frozen weights from a seeded Gaussian with std 1/sqrt(embed_dim)."""
    rng = np.random.default_rng(cfg.freeze_seed)
    std = 1.0 / math.sqrt(cfg.embed_dim)
    d = cfg.embed_dim
    embed = rng.normal(0.0, std, size=(cfg.token_count, cfg.slice_dim, d))
    wq = rng.normal(0.0, std, size=(d, d))
    wk = rng.normal(0.0, std, size=(d, d))
    wv = rng.normal(0.0, std, size=(d, d))
    wo = rng.normal(0.0, std, size=(d, d))
    return FrozenBackbone(cfg=cfg, embed=embed, wq=wq, wk=wk, wv=wv, wo=wo)


@dataclass
class ClassifierHead:
    """Linear head over all classes; the only trainable besides prompts."""

    w: Array  # (embed_dim, num_classes_total)
    b: Array  # (1, num_classes_total)

    @classmethod
    def zeros(cls, cfg: BackboneConfig) -> "ClassifierHead":
        return cls(
            w=np.zeros((cfg.embed_dim, cfg.num_classes_total)),
            b=np.zeros((1, cfg.num_classes_total)),
        )

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(w=self.w.copy(), b=self.b.copy())


def tokenize(x: Array, backbone: FrozenBackbone) -> Array:
    """Embed contiguous input slices into token rows.

    x: (input_dim,) -> (token_count, embed_dim), or a batch
    (n, input_dim) -> (n, token_count, embed_dim). Token i depends only on
    slice i of the input.
    """
    cfg = backbone.cfg
    x = as_f64(x)
    if x.shape[-1] != cfg.input_dim:
        raise ShapeError(
            f"tokenize: sample dimension {x.shape[-1]} != input_dim {cfg.input_dim}"
        )
    slices = x.reshape(x.shape[:-1] + (cfg.token_count, cfg.slice_dim))
    return np.einsum("...ls,lsd->...ld", slices, backbone.embed)


def represent(prompt: Array, tokens: Array, backbone: FrozenBackbone) -> Array:
    """Mean-pooled encoder output over [prompt rows ; feature tokens].

    tokens: (n, token_count, embed_dim); returns (n, embed_dim).
    """
    prompt = as_f64(prompt)
    tokens = as_f64(tokens)
    cfg = backbone.cfg
    if prompt.shape != (cfg.prompt_len, cfg.embed_dim):
        raise ShapeError(
            f"represent: prompt shape {prompt.shape} != "
            f"({cfg.prompt_len}, {cfg.embed_dim})"
        )
    n = tokens.shape[0]
    stacked = np.concatenate(
        [np.broadcast_to(prompt, (n, cfg.prompt_len, cfg.embed_dim)), tokens], axis=1
    )
    out = attention_forward(stacked, backbone.wq, backbone.wk, backbone.wv, backbone.wo)
    return out.mean(axis=1)


def forward_with_prompt(
    prompt: Array,
    tokens: Array,
    backbone: FrozenBackbone,
    head: ClassifierHead,
) -> tuple[Array, Array]:
    """Representation and logits for a single tokenized sample.

    tokens: (token_count, embed_dim). Returns ((1, d), (1, num_classes_total)).
    """
    tokens = as_f64(tokens)
    cfg = backbone.cfg
    if tokens.shape != (cfg.token_count, cfg.embed_dim):
        raise ShapeError(
            f"forward_with_prompt: token shape {tokens.shape} != "
            f"({cfg.token_count}, {cfg.embed_dim})"
        )
    rep = represent(prompt, tokens[None, :, :], backbone)
    logits = linear_forward(rep, head.w, head.b)
    return rep, logits
