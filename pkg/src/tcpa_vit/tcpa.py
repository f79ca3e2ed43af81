"""Token-coordinated prompt attention.

Each block owns a CLS prompt pool and an image prompt pool. Every pool entry
is a ``[L_p, D]`` prompt block paired with a key vector. The CLS token and each
image token pick their top-K entries by cosine distance to the keys, the
picks are expanded into a ``T x T`` 0/1 mask over the sequence

    [CLS | CLS-pool prompts | image-pool prompts | image tokens]

and one masked attention pass produces the CLS and image-token outputs.
Matching is done on plain arrays, so no gradient flows through selection.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .backbone import BlockParams, TokenState, multi_head_attention
from .numerics import COS_EPS, Tensor, as_tensor, concat, expand, layer_norm, reshape

NEG_INF = -1e30


class MatchDirection(str, Enum):
    MOST_SIMILAR = "most_similar"
    PAPER_LITERAL = "paper_literal_largest_distance"


class MaskMode(str, Enum):
    POST_SOFTMAX = "post_softmax_multiplicative"
    PRE_SOFTMAX = "pre_softmax_additive"


@dataclass(frozen=True)
class TcpaConfig:
    prompt_len: int = 1
    cls_pool_size: int = 10
    img_pool_size: int = 20
    cls_top_k: int = 1
    img_top_k: int = 2
    match_direction: MatchDirection = MatchDirection.MOST_SIMILAR
    mask_mode: MaskMode = MaskMode.POST_SOFTMAX

    def __post_init__(self):
        object.__setattr__(self, "match_direction", MatchDirection(self.match_direction))
        object.__setattr__(self, "mask_mode", MaskMode(self.mask_mode))
        if self.prompt_len < 1:
            raise ValueError("prompt_len must be >= 1")
        if not 1 <= self.cls_top_k <= self.cls_pool_size:
            raise ValueError(f"need 1 <= cls_top_k <= cls_pool_size, got {self.cls_top_k}/{self.cls_pool_size}")
        if not 1 <= self.img_top_k <= self.img_pool_size:
            raise ValueError(f"need 1 <= img_top_k <= img_pool_size, got {self.img_top_k}/{self.img_pool_size}")

    @property
    def num_prompt_slots(self) -> int:
        return (self.cls_pool_size + self.img_pool_size) * self.prompt_len

    def seq_len(self, n_patches: int) -> int:
        return 1 + self.num_prompt_slots + n_patches

    def slot_layout(self, n_patches: int) -> list[tuple[str, int, int]]:
        """``(name, start, stop)`` for each slot group, in sequence order."""
        c = self.cls_pool_size * self.prompt_len
        i = self.img_pool_size * self.prompt_len
        return [
            ("cls", 0, 1),
            ("cls_prompts", 1, 1 + c),
            ("img_prompts", 1 + c, 1 + c + i),
            ("patches", 1 + c + i, 1 + c + i + n_patches),
        ]


@dataclass
class PromptPool:
    """Pool for one role at one layer. ``prompts`` is ``[n, L_p, D]``, ``keys`` ``[n, D]``."""

    role: str
    prompts: Tensor
    keys: Tensor
    layer_index: int

    def __post_init__(self):
        self.prompts = as_tensor(self.prompts)
        self.keys = as_tensor(self.keys)
        if self.role not in ("cls", "image"):
            raise ValueError(f"unknown pool role {self.role!r}")
        if self.prompts.ndim != 3 or self.keys.ndim != 2 or self.prompts.shape[0] != self.keys.shape[0]:
            raise ValueError(f"inconsistent pool extents {self.prompts.shape} / {self.keys.shape}")

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def entries(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.prompts.data[k], self.keys.data[k]) for k in range(self.size)]


@dataclass
class MatchResult:
    affinity: np.ndarray  # [..., rows, pool]
    binarized: np.ndarray | None = None
    selected_indices: np.ndarray | None = None  # [..., rows, top_k]


@dataclass
class MaskMatrix:
    mask: np.ndarray  # [..., T, T]
    layout: list[tuple[str, int, int]]


def cosine_distance(u, v, eps: float = COS_EPS) -> float:
    """``1 - cos(u, v)``; returns 1.0 when either norm is below ``eps``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = float(np.sqrt(u @ u))
    nv = float(np.sqrt(v @ v))
    if nu < eps or nv < eps:
        return 1.0
    return 1.0 - float(u @ v) / (nu * nv)


def build_affinity(tokens, pool: PromptPool | np.ndarray, eps: float = COS_EPS) -> MatchResult:
    """Cosine distances between token rows ``[..., rows, D]`` and pool keys ``[n, D]``."""
    x = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens, dtype=np.float64)
    keys = pool.keys.data if isinstance(pool, PromptPool) else np.asarray(pool, dtype=np.float64)
    if x.shape[-2] < 1:
        raise ValueError("need at least one token row")
    nx = np.sqrt((x * x).sum(axis=-1))
    nk = np.sqrt((keys * keys).sum(axis=-1))
    dots = x @ keys.T
    ok = (nx[..., :, None] >= eps) & (nk[None, :] >= eps)
    denom = np.where(ok, nx[..., :, None] * nk[None, :], 1.0)
    cos = np.where(ok, dots / denom, 0.0)
    return MatchResult(affinity=1.0 - cos)


def binarize_topk(match: MatchResult, top_k: int, direction: MatchDirection | str = MatchDirection.MOST_SIMILAR) -> MatchResult:
    """Mark ``top_k`` entries per row; equal distances go to the lowest pool index."""
    direction = MatchDirection(direction)
    a = match.affinity
    if not 1 <= top_k <= a.shape[-1]:
        raise ValueError(f"top_k={top_k} outside [1, {a.shape[-1]}]")
    key = a if direction is MatchDirection.MOST_SIMILAR else -a
    order = np.argsort(key, axis=-1, kind="stable")[..., :top_k]
    binarized = np.zeros_like(a)
    np.put_along_axis(binarized, order, 1.0, axis=-1)
    return MatchResult(affinity=a, binarized=binarized, selected_indices=order)


def assemble_mask(cls_match: MatchResult, img_match: MatchResult, config: TcpaConfig, n_patches: int) -> MaskMatrix:
    """Expand the binarized CLS (1 row) and image (N rows) matches to the full mask.

    Leading batch axes on the match arrays carry through to the mask.
    """
    cb, ib = cls_match.binarized, img_match.binarized
    if cb is None or ib is None:
        raise ValueError("matches must be binarized before mask assembly")
    if cb.shape[-2:] != (1, config.cls_pool_size):
        raise ValueError(f"CLS match has extents {cb.shape[-2:]}, expected (1, {config.cls_pool_size})")
    if ib.shape[-2:] != (n_patches, config.img_pool_size):
        raise ValueError(f"image match has extents {ib.shape[-2:]}, expected ({n_patches}, {config.img_pool_size})")
    layout = config.slot_layout(n_patches)
    (_, _, _), (_, c0, c1), (_, i0, i1), (_, p0, p1) = layout
    t = p1
    batch = cb.shape[:-2]
    mask = np.zeros(batch + (t, t))
    tok = np.r_[0, p0:p1]
    mask[..., tok[:, None], tok[None, :]] = 1.0
    lp = config.prompt_len
    mask[..., 0, c0:c1] = np.repeat(cb[..., 0, :], lp, axis=-1)
    mask[..., p0:p1, i0:i1] = np.repeat(ib, lp, axis=-1)
    return MaskMatrix(mask=mask, layout=layout)


def verify_mask(
    mask: np.ndarray,
    config: TcpaConfig,
    n_patches: int,
    cls_selected: np.ndarray | None = None,
    img_selected: np.ndarray | None = None,
) -> list[str]:
    """Check one ``[T, T]`` mask against the mask contract; returns the violations found.

    Without selections only the structure and per-row cardinalities are
    checked. With ``cls_selected`` (``[1, K_c]``) and ``img_selected``
    (``[N, K_i]``) the matched blocks must also be exactly the selected ones.
    Prompt rows carry no contract and are not inspected.
    """
    m = np.asarray(mask)
    layout = config.slot_layout(n_patches)
    (_, _, _), (_, c0, c1), (_, i0, i1), (_, p0, p1) = layout
    if m.shape != (p1, p1):
        return [f"mask extents {m.shape}, expected {(p1, p1)}"]
    problems = []
    if not np.all((m == 0.0) | (m == 1.0)):
        problems.append("mask has entries other than 0 and 1")
    tok = np.r_[0, p0:p1]
    if not np.all(m[np.ix_(tok, tok)] == 1.0):
        problems.append("token-token block is not all ones")
    lp = config.prompt_len

    def check_row(name, row, own, other, k, selected):
        if np.any(m[row, other[0]:other[1]] != 0.0):
            problems.append(f"{name} attends to prompts of the other role")
        blocks = m[row, own[0]:own[1]].reshape(-1, lp)
        if not np.all((blocks == blocks[:, :1])):
            problems.append(f"{name} has a partially opened prompt block")
        opened = np.flatnonzero(blocks[:, 0] == 1.0)
        if opened.size != k:
            problems.append(f"{name} opens {opened.size} prompt blocks, expected {k}")
        elif selected is not None and set(opened.tolist()) != set(np.asarray(selected).tolist()):
            problems.append(f"{name} opens blocks {opened.tolist()}, selected {sorted(np.asarray(selected).tolist())}")

    check_row("CLS row", 0, (c0, c1), (i0, i1), config.cls_top_k,
              None if cls_selected is None else np.asarray(cls_selected).reshape(-1))
    for n in range(n_patches):
        check_row(f"image row {n}", p0 + n, (i0, i1), (c0, c1), config.img_top_k,
                  None if img_selected is None else img_selected[n])
    return problems


def masked_attention(
    seq: Tensor,
    mask: MaskMatrix | np.ndarray,
    block: BlockParams,
    num_heads: int,
    mode: MaskMode | str = MaskMode.POST_SOFTMAX,
    query_rows: np.ndarray | None = None,
    queries: Tensor | None = None,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Multi-head attention with one 0/1 mask shared by every head.

    Post-softmax mode multiplies the attention map by the mask (rows are not
    renormalized); pre-softmax mode sends masked logits to ``-1e30``.
    Returns ``(output, attn_before_mask, attn_applied)``.

    To compute only some rows, pass their indices as ``query_rows`` together
    with ``queries``, the matching rows of ``seq``.
    """
    m = mask.mask if isinstance(mask, MaskMatrix) else np.asarray(mask, dtype=np.float64)
    if query_rows is not None:
        m = m[..., query_rows, :]
    m = m[..., None, :, :] if m.ndim == 3 else m
    if MaskMode(mode) is MaskMode.POST_SOFTMAX:
        return multi_head_attention(seq, block, num_heads, post_mask=m, queries=queries)
    return multi_head_attention(seq, block, num_heads, logit_bias=np.where(m > 0, 0.0, NEG_INF), queries=queries)


def _flat_prompts(pool: PromptPool) -> Tensor:
    n, lp, d = pool.prompts.shape
    return reshape(pool.prompts, (n * lp, d))


@dataclass
class TcpaBlockOutput:
    tokens: Tensor  # attention outputs for [CLS, patches], [B, 1 + N, D]
    mask: MaskMatrix
    attn: np.ndarray  # [B, heads, T, T], before masking
    effective: np.ndarray  # [B, heads, T, T], as applied to the values
    cls_match: MatchResult
    img_match: MatchResult


def tcpa_block_attention(
    state: TokenState,
    pools: tuple[PromptPool, PromptPool],
    config: TcpaConfig,
    block: BlockParams,
    num_heads: int,
    normed: Tensor | None = None,
    full_map: bool = True,
) -> TcpaBlockOutput:
    """Single-pass prompt attention for one block.

    Matching uses the block's input tokens (before LayerNorm); prompts and
    tokens both pass through the block's first LayerNorm. Only the CLS and
    image-token rows of the result are returned. With ``full_map=False`` the
    discarded prompt query rows are never computed and the attention maps
    hold only the ``1 + N`` token rows.
    """
    cls_pool, img_pool = pools
    raw = state.tokens.data
    b, n = raw.shape[0], raw.shape[1] - 1
    cls_match = binarize_topk(build_affinity(raw[:, :1, :], cls_pool), config.cls_top_k, config.match_direction)
    img_match = binarize_topk(build_affinity(raw[:, 1:, :], img_pool), config.img_top_k, config.match_direction)
    mask = assemble_mask(cls_match, img_match, config, n)

    g, beta = Tensor(block.ln1_g), Tensor(block.ln1_b)
    if normed is None:
        normed = layer_norm(state.tokens, g, beta)
    pc = layer_norm(_flat_prompts(cls_pool), g, beta)
    pi = layer_norm(_flat_prompts(img_pool), g, beta)
    seq = concat([normed[:, :1, :], expand(pc, b), expand(pi, b), normed[:, 1:, :]], axis=1)
    p0 = 1 + config.num_prompt_slots
    if full_map:
        out, attn, eff = masked_attention(seq, mask, block, num_heads, config.mask_mode)
        tokens = concat([out[:, :1, :], out[:, p0:, :]], axis=1)
    else:
        rows = np.r_[0, p0:p0 + n]
        tokens, attn, eff = masked_attention(seq, mask, block, num_heads, config.mask_mode, rows, normed)
    return TcpaBlockOutput(tokens, mask, attn, eff, cls_match, img_match)


def reference_two_pass(
    state: TokenState,
    cls_prompt,
    img_prompt,
    block: BlockParams,
    num_heads: int,
) -> Tensor:
    """Two dense attention passes with a single prompt block per role.

    Pass one attends ``[c, p_cls, h_1..h_N]`` and keeps the CLS output; pass two
    attends ``[c, p_img, h_1..h_N]`` and keeps the image-token outputs.
    Returns attention outputs ``[B, 1 + N, D]``.
    """
    g, beta = Tensor(block.ln1_g), Tensor(block.ln1_b)
    normed = layer_norm(state.tokens, g, beta)
    b = normed.shape[0]
    cls_prompt, img_prompt = as_tensor(cls_prompt), as_tensor(img_prompt)
    pc = expand(layer_norm(cls_prompt, g, beta), b)
    pi = expand(layer_norm(img_prompt, g, beta), b)
    cls_seq = concat([normed[:, :1, :], pc, normed[:, 1:, :]], axis=1)
    img_seq = concat([normed[:, :1, :], pi, normed[:, 1:, :]], axis=1)
    cls_out, _, _ = multi_head_attention(cls_seq, block, num_heads)
    img_out, _, _ = multi_head_attention(img_seq, block, num_heads)
    return concat([cls_out[:, :1, :], img_out[:, 1 + img_prompt.shape[0]:, :]], axis=1)
