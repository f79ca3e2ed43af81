"""Frozen ViT skeleton: patch embedding, pre-norm blocks, classifier head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import formats
from .numerics import (
    DimensionError,
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    softmax_rows,
    swapaxes,
)
from .rng import Stream

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    patch_h: int = 4
    patch_w: int = 4
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 256

    def __post_init__(self):
        for f in fields(self):
            if int(getattr(self, f.name)) < 1:
                raise ValueError(f"{f.name} must be a positive integer")
        if self.image_h % self.patch_h or self.image_w % self.patch_w:
            raise ValueError(
                f"image {self.image_h}x{self.image_w} is not divisible into "
                f"{self.patch_h}x{self.patch_w} patches"
            )
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_h // self.patch_h) * (self.image_w // self.patch_w)

    @property
    def patch_size(self) -> int:
        return self.patch_h * self.patch_w * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float64)

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "ModelConfig":
        names = [f.name for f in fields(cls)]
        if v.shape != (len(names),) or not np.all(v == np.round(v)):
            raise formats.ShapeTableError(f"malformed model config record {v!r}")
        return cls(**{n: int(x) for n, x in zip(names, v)})


@dataclass
class BlockParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @staticmethod
    def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        d, f = cfg.embed_dim, cfg.ffn_dim
        return {
            "ln1_g": (d,), "ln1_b": (d,),
            "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
            "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,),
            "ln2_g": (d,), "ln2_b": (d,),
            "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,),
        }


@dataclass
class BackboneParams:
    config: ModelConfig
    embed_w: np.ndarray  # [h*w*C, D]
    embed_b: np.ndarray  # [D]
    pos: np.ndarray  # [N+1, D], slot 0 is the CLS slot
    cls: np.ndarray  # [D]
    blocks: list[BlockParams] = field(default_factory=list)
    frozen: bool = True

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {
            "meta.config": self.config.as_vector(),
            "embed.weight": self.embed_w,
            "embed.bias": self.embed_b,
            "embed.pos": self.pos,
            "embed.cls": self.cls,
        }
        for j, blk in enumerate(self.blocks):
            for f in fields(blk):
                out[f"blocks.{j}.{f.name}"] = getattr(blk, f.name)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "BackboneParams":
        if "meta.config" not in arrays:
            raise formats.ShapeTableError("missing array 'meta.config'")
        try:
            cfg = ModelConfig.from_vector(arrays["meta.config"])
        except ValueError as exc:
            raise formats.ShapeTableError(str(exc)) from exc
        d, n = cfg.embed_dim, cfg.num_patches
        expected = {
            "embed.weight": (cfg.patch_size, d),
            "embed.bias": (d,),
            "embed.pos": (n + 1, d),
            "embed.cls": (d,),
        }
        for j in range(cfg.num_layers):
            for name, shape in BlockParams.expected_shapes(cfg).items():
                expected[f"blocks.{j}.{name}"] = shape
        for name, shape in expected.items():
            if name not in arrays:
                raise formats.ShapeTableError(f"missing array {name!r}")
            if arrays[name].shape != shape:
                raise formats.ShapeTableError(
                    f"array {name!r} has extents {arrays[name].shape}, expected {shape}"
                )
        extra = set(arrays) - set(expected) - {"meta.config"}
        if extra:
            raise formats.ShapeTableError(f"unexpected arrays {sorted(extra)}")
        blocks = [
            BlockParams(**{k: arrays[f"blocks.{j}.{k}"] for k in BlockParams.expected_shapes(cfg)})
            for j in range(cfg.num_layers)
        ]
        return cls(cfg, arrays["embed.weight"], arrays["embed.bias"], arrays["embed.pos"],
                   arrays["embed.cls"], blocks)


@dataclass
class TokenState:
    """Token sequence ``[CLS, patch_1..patch_N]`` entering block ``layer_index``.

    ``tokens`` has shape ``[B, 1 + N, D]``.
    """

    tokens: Tensor
    layer_index: int = 1

    @property
    def cls(self) -> Tensor:
        return self.tokens[:, 0, :]

    @property
    def patches(self) -> Tensor:
        return self.tokens[:, 1:, :]

    @property
    def num_patches(self) -> int:
        return self.tokens.shape[1] - 1


class AttentionHook(Protocol):
    def __call__(self, normed: Tensor, raw: Tensor, block: BlockParams, layer_index: int) -> Tensor:
        """Return per-token attention outputs shaped like ``normed``."""


def init_params(config: ModelConfig, seed: int) -> BackboneParams:
    """Truncated-normal (std 0.02) weights, zero biases, unit LayerNorm gains."""
    s = Stream(seed)
    d, f = config.embed_dim, config.ffn_dim

    def w(*shape):
        return s.truncated_normal(int(np.prod(shape)), INIT_STD).reshape(shape)

    embed_w = w(config.patch_size, d)
    pos = w(config.num_patches + 1, d)
    cls_vec = w(d)
    blocks = []
    for _ in range(config.num_layers):
        blocks.append(BlockParams(
            ln1_g=np.ones(d), ln1_b=np.zeros(d),
            wq=w(d, d), bq=np.zeros(d),
            wk=w(d, d), bk=np.zeros(d),
            wv=w(d, d), bv=np.zeros(d),
            wo=w(d, d), bo=np.zeros(d),
            ln2_g=np.ones(d), ln2_b=np.zeros(d),
            w1=w(d, f), b1=np.zeros(f),
            w2=w(f, d), b2=np.zeros(d),
        ))
    return BackboneParams(config, embed_w, np.zeros(d), pos, cls_vec, blocks)


def save_weights(params: BackboneParams, path: str | Path) -> None:
    formats.save_arrays(params.to_arrays(), path)


def load_weights(path: str | Path) -> BackboneParams:
    return BackboneParams.from_arrays(formats.load_arrays(path))


def patchify(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """``[B, H, W, C]`` -> ``[B, N, h*w*C]``; patches row-major over the grid,
    each flattened in (row, column, channel) order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    expect = (config.image_h, config.image_w, config.channels)
    if images.ndim != 4 or images.shape[1:] != expect:
        raise DimensionError(f"image extents {images.shape[1:]} do not match config {expect}")
    b = images.shape[0]
    gh, gw = config.image_h // config.patch_h, config.image_w // config.patch_w
    x = images.reshape(b, gh, config.patch_h, gw, config.patch_w, config.channels)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, config.patch_size)


def patch_embed(images: np.ndarray, params: BackboneParams) -> TokenState:
    """Embed ``[H, W, C]`` or ``[B, H, W, C]`` images into a layer-1 token state."""
    cfg = params.config
    patches = Tensor(patchify(images, cfg))
    b = patches.shape[0]
    h = add(add(matmul(patches, Tensor(params.embed_w)), Tensor(params.embed_b)), Tensor(params.pos[1:]))
    c = Tensor(np.broadcast_to(params.cls + params.pos[0], (b, 1, cfg.embed_dim)).copy())
    return TokenState(concat([c, h], axis=1), layer_index=1)


def multi_head_attention(
    seq: Tensor,
    block: BlockParams,
    num_heads: int,
    logit_bias: np.ndarray | None = None,
    post_mask: np.ndarray | None = None,
    queries: Tensor | None = None,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Multi-head self-attention over ``seq`` of shape ``[B, T, D]``.

    ``logit_bias`` (added before the softmax) and ``post_mask`` (multiplied
    after it) broadcast against ``[B, heads, R, T]``. ``queries`` (``[B, R, D]``)
    replaces ``seq`` as the source of query rows when only some output rows are
    wanted; ``R = T`` otherwise.

    Returns ``(output [B, R, D], attn [B, heads, R, T], effective [B, heads, R, T])``
    where ``attn`` is the softmax map before any post-mask and ``effective`` is
    the map actually applied to the values.
    """
    b, t, d = seq.shape
    dh = d // num_heads
    q_seq = seq if queries is None else queries

    def heads(x, w, bias):
        y = add(matmul(x, Tensor(w)), Tensor(bias))
        return swapaxes(reshape(y, (b, x.shape[1], num_heads, dh)), 1, 2)

    # 1/sqrt(dh) folded into the queries
    q = mul(heads(q_seq, block.wq, block.bq), 1.0 / math.sqrt(dh))
    k = heads(seq, block.wk, block.bk)
    v = heads(seq, block.wv, block.bv)
    logits = matmul(q, swapaxes(k, -1, -2))
    if logit_bias is not None:
        logits = add(logits, Tensor(logit_bias))
    attn = softmax_rows(logits)
    effective = attn if post_mask is None else mul(attn, Tensor(post_mask))
    ctx = matmul(effective, v)
    ctx = reshape(swapaxes(ctx, 1, 2), (b, q_seq.shape[1], d))
    out = add(matmul(ctx, Tensor(block.wo)), Tensor(block.bo))
    return out, attn.data, effective.data


def dense_attention_hook(num_heads: int) -> AttentionHook:
    """Plain self-attention over the token sequence (no prompts)."""

    def hook(normed: Tensor, raw: Tensor, block: BlockParams, layer_index: int) -> Tensor:
        out, _, _ = multi_head_attention(normed, block, num_heads)
        return out

    return hook


def block_forward(state: TokenState, block: BlockParams, attention_hook: AttentionHook) -> TokenState:
    """Pre-norm block: ``x + attn(LN1 x)`` then ``x + FFN(LN2 x)``."""
    x = state.tokens
    normed = layer_norm(x, Tensor(block.ln1_g), Tensor(block.ln1_b))
    a = attention_hook(normed, x, block, state.layer_index)
    if a.shape != x.shape:
        raise DimensionError(f"attention hook returned {a.shape}, expected {x.shape}")
    x = add(x, a)
    n2 = layer_norm(x, Tensor(block.ln2_g), Tensor(block.ln2_b))
    hidden = gelu(add(matmul(n2, Tensor(block.w1)), Tensor(block.b1)))
    x = add(x, add(matmul(hidden, Tensor(block.w2)), Tensor(block.b2)))
    return TokenState(x, state.layer_index + 1)


def classify(cls_final: Tensor, head_w: Tensor, head_b: Tensor) -> Tensor:
    """Logits ``cls_final @ head_w + head_b``; no softmax."""
    if cls_final.shape[-1] != head_w.shape[0] or head_b.shape != (head_w.shape[1],):
        raise DimensionError(
            f"head extents {head_w.shape}/{head_b.shape} do not fit features {cls_final.shape}"
        )
    return add(matmul(cls_final if cls_final.ndim == 2 else reshape(cls_final, (1, -1)), head_w), head_b)


def encode(
    images: np.ndarray,
    params: BackboneParams,
    hook_for_layer: Callable[[int], AttentionHook],
) -> TokenState:
    """Run the embedding and all blocks, choosing the attention hook per layer."""
    state = patch_embed(images, params)
    for j, blk in enumerate(params.blocks, start=1):
        state = block_forward(state, blk, hook_for_layer(j))
    return state
