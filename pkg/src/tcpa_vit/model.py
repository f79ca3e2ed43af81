"""Full forward pass over a frozen backbone with trainable prompts and head.

The trainable set is a flat ``dict[str, ndarray]``::

    pools.{j}.cls.prompts  [N_c, L_p, D]     pools.{j}.cls.keys  [N_c, D]
    pools.{j}.img.prompts  [N_i, L_p, D]     pools.{j}.img.keys  [N_i, D]
    head.weight            [D, classes]      head.bias           [classes]

Variants:

* ``tcpa``   - coordinated prompt attention (pools matched per token).
* ``vpt``    - same prompts, but every token sees every prompt (dense prompting).
* ``linear`` - no prompts; only the head is trained (linear probe).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import (
    BackboneParams,
    BlockParams,
    ModelConfig,
    TokenState,
    classify,
    dense_attention_hook,
    encode,
    multi_head_attention,
)
from .numerics import Tensor, as_tensor, concat, expand, layer_norm, reshape
from .rng import Stream
from .tcpa import (
    MaskMatrix,
    MatchResult,
    PromptPool,
    TcpaConfig,
    tcpa_block_attention,
)

VARIANTS = ("tcpa", "vpt", "linear")
PHI_STD = 0.02


def pool_names(j: int) -> dict[str, str]:
    return {
        "cls_prompts": f"pools.{j}.cls.prompts",
        "cls_keys": f"pools.{j}.cls.keys",
        "img_prompts": f"pools.{j}.img.prompts",
        "img_keys": f"pools.{j}.img.keys",
    }


def phi_shapes(model_cfg: ModelConfig, tcpa_cfg: TcpaConfig, num_classes: int, variant: str) -> dict[str, tuple[int, ...]]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    d, lp = model_cfg.embed_dim, tcpa_cfg.prompt_len
    shapes: dict[str, tuple[int, ...]] = {}
    if variant != "linear":
        for j in range(1, model_cfg.num_layers + 1):
            names = pool_names(j)
            shapes[names["cls_prompts"]] = (tcpa_cfg.cls_pool_size, lp, d)
            shapes[names["cls_keys"]] = (tcpa_cfg.cls_pool_size, d)
            shapes[names["img_prompts"]] = (tcpa_cfg.img_pool_size, lp, d)
            shapes[names["img_keys"]] = (tcpa_cfg.img_pool_size, d)
    shapes["head.weight"] = (d, num_classes)
    shapes["head.bias"] = (num_classes,)
    return shapes


def init_phi(model_cfg: ModelConfig, tcpa_cfg: TcpaConfig, num_classes: int, seed: int, variant: str = "tcpa") -> dict[str, np.ndarray]:
    """Prompts and keys ~ unit-scale normal, head ~ truncated normal (std 0.02), bias 0."""
    s = Stream(seed)
    phi = {}
    for name, shape in phi_shapes(model_cfg, tcpa_cfg, num_classes, variant).items():
        n = int(np.prod(shape))
        if name == "head.bias":
            phi[name] = np.zeros(shape)
        elif name == "head.weight":
            phi[name] = s.truncated_normal(n, PHI_STD).reshape(shape)
        else:
            phi[name] = s.normal(n).reshape(shape)
    return phi


def check_phi(phi: dict, model_cfg: ModelConfig, tcpa_cfg: TcpaConfig, variant: str) -> int:
    """Validate Phi extents against the configs; returns the class count."""
    if "head.weight" not in phi:
        raise ValueError("trainable set has no 'head.weight'")
    num_classes = np.shape(phi["head.weight"])[-1]
    expected = phi_shapes(model_cfg, tcpa_cfg, num_classes, variant)
    if set(phi) != set(expected):
        missing = sorted(set(expected) - set(phi))
        extra = sorted(set(phi) - set(expected))
        raise ValueError(f"trainable set mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if tuple(np.shape(as_tensor(phi[name]).data)) != shape:
            raise ValueError(f"{name} has extents {np.shape(as_tensor(phi[name]).data)}, expected {shape}")
    return num_classes


@dataclass
class LayerRecord:
    layer: int
    cls_tokens: np.ndarray  # [B, D], block input (pre-LayerNorm)
    patch_tokens: np.ndarray  # [B, N, D]
    cls_match: MatchResult | None = None
    img_match: MatchResult | None = None
    mask: MaskMatrix | None = None
    attn: np.ndarray | None = None
    effective: np.ndarray | None = None


@dataclass
class ForwardResult:
    logits: Tensor
    features: Tensor  # final CLS state [B, D]
    records: list[LayerRecord] = field(default_factory=list)


def _pools(phi: dict, j: int) -> tuple[PromptPool, PromptPool]:
    names = pool_names(j)
    return (
        PromptPool("cls", phi[names["cls_prompts"]], phi[names["cls_keys"]], j),
        PromptPool("image", phi[names["img_prompts"]], phi[names["img_keys"]], j),
    )


class _PromptHook:
    def __init__(self, phi: dict, tcpa_cfg: TcpaConfig, num_heads: int, variant: str, capture: bool):
        self.phi = phi
        self.cfg = tcpa_cfg
        self.num_heads = num_heads
        self.variant = variant
        self.capture = capture
        self.records: list[LayerRecord] = []

    def __call__(self, normed: Tensor, raw: Tensor, block: BlockParams, layer_index: int) -> Tensor:
        record = LayerRecord(layer_index, raw.data[:, 0, :], raw.data[:, 1:, :])
        pools = _pools(self.phi, layer_index)
        if self.variant == "tcpa":
            res = tcpa_block_attention(
                TokenState(raw, layer_index), pools, self.cfg, block, self.num_heads, normed, full_map=self.capture
            )
            record.cls_match, record.img_match, record.mask = res.cls_match, res.img_match, res.mask
            out, attn, eff = res.tokens, res.attn, res.effective
        else:
            out, attn, eff = _dense_prompt_attention(normed, pools, self.cfg, block, self.num_heads, self.capture)
        if self.capture:
            record.attn, record.effective = attn, eff
        self.records.append(record)
        return out


def _dense_prompt_attention(normed: Tensor, pools, cfg: TcpaConfig, block: BlockParams, num_heads: int, full_map: bool):
    cls_pool, img_pool = pools
    b, _, d = normed.shape
    g, beta = Tensor(block.ln1_g), Tensor(block.ln1_b)
    prompts = concat([
        reshape(cls_pool.prompts, (-1, d)),
        reshape(img_pool.prompts, (-1, d)),
    ], axis=0)
    p = layer_norm(prompts, g, beta)
    seq = concat([normed[:, :1, :], expand(p, b), normed[:, 1:, :]], axis=1)
    if not full_map:
        return multi_head_attention(seq, block, num_heads, queries=normed)
    out, attn, eff = multi_head_attention(seq, block, num_heads)
    p0 = 1 + cfg.num_prompt_slots
    return concat([out[:, :1, :], out[:, p0:, :]], axis=1), attn, eff


def forward(
    backbone: BackboneParams,
    phi: dict,
    images: np.ndarray,
    tcpa_cfg: TcpaConfig,
    variant: str = "tcpa",
    capture: bool = False,
) -> ForwardResult:
    """Logits for ``images`` ``[B, H, W, C]``. ``phi`` values may be tracked tensors."""
    cfg = backbone.config
    if variant == "linear":
        records: list[LayerRecord] = []

        def hook_for(j):
            dense = dense_attention_hook(cfg.num_heads)
            if not capture:
                return dense

            def recording(normed, raw, block, layer_index):
                out, attn, eff = multi_head_attention(normed, block, cfg.num_heads)
                records.append(LayerRecord(layer_index, raw.data[:, 0, :], raw.data[:, 1:, :], attn=attn, effective=eff))
                return out

            return recording

        state = encode(images, backbone, hook_for)
    else:
        hook = _PromptHook(phi, tcpa_cfg, cfg.num_heads, variant, capture)
        state = encode(images, backbone, lambda j: hook)
        records = hook.records
    features = state.cls
    logits = classify(features, as_tensor(phi["head.weight"]), as_tensor(phi["head.bias"]))
    return ForwardResult(logits, features, records)


def extract_features(backbone: BackboneParams, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Final CLS states of the prompt-free backbone (the linear-probe features)."""
    out = []
    for s in range(0, len(images), batch_size):
        state = encode(images[s:s + batch_size], backbone, lambda j: dense_attention_hook(backbone.config.num_heads))
        out.append(state.cls.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, backbone.config.embed_dim))
