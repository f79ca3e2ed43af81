"""Training objective, optimizers, schedule, training loop and evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .backbone import BackboneParams, classify
from .data import Dataset, batch_iter
from .model import LayerRecord, check_phi, extract_features, forward, pool_names
from .numerics import (
    ContractError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    cosine_distance_rows,
    cross_entropy,
    mean_all,
    mul,
    take,
)
from .tcpa import TcpaConfig

METRIC_FIELDS = ("epoch", "step", "lr", "loss", "ce", "pull_img", "pull_cls", "acc")


class NumericAbort(RuntimeError):
    """A non-finite value appeared during training."""


@dataclass(frozen=True)
class TrainConfig:
    lambda_i: float = 0.5
    lambda_c: float = 0.5
    epochs: int = 100
    learning_rate: float = 1e-2
    weight_decay: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    schedule: str = "cosine_annealing"
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lambda_i < 0 or self.lambda_c < 0:
            raise ValueError("lambda_i and lambda_c must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule != "cosine_annealing":
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


@dataclass
class PullPairs:
    """Matched (token, key) pairs of one role at one layer; tokens are constants."""

    layer: int
    role: str
    tokens: np.ndarray  # [P, D]
    keys: Tensor  # [P, D], gathered from the pool keys


@dataclass
class LossParts:
    total: Tensor
    ce: float
    pull_img: float
    pull_cls: float


def matched_pairs(records: list[LayerRecord], phi: dict) -> list[PullPairs]:
    """Collect the pairs selected during a forward pass, gathering keys from ``phi``."""
    pairs = []
    for rec in records:
        if rec.cls_match is None or rec.img_match is None:
            continue
        names = pool_names(rec.layer)
        for role, tokens, match, key_name in (
            ("cls", rec.cls_tokens[:, None, :], rec.cls_match, names["cls_keys"]),
            ("image", rec.patch_tokens, rec.img_match, names["img_keys"]),
        ):
            sel = match.selected_indices  # [B, rows, K]
            k = sel.shape[-1]
            flat_tokens = np.repeat(tokens.reshape(-1, tokens.shape[-1]), k, axis=0)
            keys = take(as_tensor(phi[key_name]), sel.reshape(-1))
            pairs.append(PullPairs(rec.layer, role, flat_tokens, keys))
    return pairs


def _pull_term(pairs: list[PullPairs], role: str) -> Tensor | None:
    per_layer = [mean_all(cosine_distance_rows(Tensor(p.tokens), p.keys)) for p in pairs if p.role == role]
    if not per_layer:
        return None
    total = per_layer[0]
    for t in per_layer[1:]:
        total = add(total, t)
    return mul(total, 1.0 / len(per_layer))


def composite_loss(logits: Tensor, labels, pairs: list[PullPairs], lambda_i: float, lambda_c: float) -> LossParts:
    """Cross-entropy plus weighted mean cosine distance of matched (token, key) pairs.

    Pull terms average over the pairs of a layer, then over layers. Tokens
    are constants inside them, so only the keys receive their gradient.
    """
    ce = cross_entropy(logits, labels)
    total = ce
    pulls = {}
    for role, lam in (("image", lambda_i), ("cls", lambda_c)):
        term = _pull_term(pairs, role)
        pulls[role] = 0.0 if term is None else term.item()
        if term is not None and lam != 0.0:
            total = add(total, mul(term, lam))
    return LossParts(total, ce.item(), pulls["image"], pulls["cls"])


# ---------------------------------------------------------------------------
# Optimizers and schedule
# ---------------------------------------------------------------------------


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """``base_lr * (1 + cos(pi * step / total_steps)) / 2``."""
    if total_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], opt: OptimizerState,
                 lr: float, cfg: TrainConfig) -> dict[str, np.ndarray]:
    """Decoupled-weight-decay Adam with bias correction; returns new arrays."""
    opt.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** opt.t
    c2 = 1.0 - b2 ** opt.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * opt.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * opt.v.get(name, 0.0) + (1.0 - b2) * g * g
        opt.m[name], opt.v[name] = m, v
        step = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        out[name] = p * (1.0 - lr * cfg.weight_decay) - lr * step
    return out


def sgd_update(params, grads, opt: OptimizerState, lr: float, cfg: TrainConfig) -> dict[str, np.ndarray]:
    opt.t += 1
    return {name: p - lr * (grads[name] + cfg.weight_decay * p) for name, p in params.items()}


_UPDATES: dict[str, Callable] = {"adamw": adamw_update, "sgd": sgd_update}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    phi: dict[str, np.ndarray]
    opt: OptimizerState = field(default_factory=OptimizerState)
    step: int = 0
    epoch: int = 0
    seed: int = 0


def _check_finite(named: dict[str, np.ndarray]) -> None:
    for name, arr in named.items():
        if not np.all(np.isfinite(arr)):
            raise NumericAbort(f"non-finite values in {name}")


def train_step(
    state: TrainState,
    images: np.ndarray,
    labels: np.ndarray,
    backbone: BackboneParams,
    tcpa_cfg: TcpaConfig,
    cfg: TrainConfig,
    lr: float,
    variant: str = "tcpa",
    features: np.ndarray | None = None,
) -> tuple[TrainState, dict[str, float]]:
    """One forward/backward/update of Phi on a batch.

    ``features`` (the frozen backbone's CLS outputs) may be given for the
    ``linear`` variant, in which case the backbone is not re-run.
    """
    if not backbone.frozen:
        raise ContractError("backbone must be frozen during training")
    tape = Tape()
    tracked = {name: tape.watch(Tensor(arr.copy()), name=name) for name, arr in state.phi.items()}
    if features is not None:
        if variant != "linear":
            raise ContractError("precomputed features only apply to the linear variant")
        logits = classify(Tensor(features), tracked["head.weight"], tracked["head.bias"])
        records: list[LayerRecord] = []
    else:
        res = forward(backbone, tracked, images, tcpa_cfg, variant)
        logits, records = res.logits, res.records
    _check_finite({"logits": logits.data})
    parts = composite_loss(logits, labels, matched_pairs(records, tracked), cfg.lambda_i, cfg.lambda_c)
    _check_finite({"loss": parts.total.data})
    backward(tape, parts.total)
    grads = {name: t.grad for name, t in tracked.items()}
    tape.clear()
    _check_finite({f"grad of {n}": g for n, g in grads.items()})
    new_phi = _UPDATES[cfg.optimizer](state.phi, grads, state.opt, lr, cfg)
    _check_finite({f"updated {n}": p for n, p in new_phi.items()})
    acc = float(np.mean(np.argmax(logits.data, axis=1) == np.asarray(labels)))
    state = TrainState(new_phi, state.opt, state.step + 1, state.epoch, state.seed)
    metrics = {"loss": parts.total.item(), "ce": parts.ce, "pull_img": parts.pull_img,
               "pull_cls": parts.pull_cls, "acc": acc}
    return state, metrics


def _format_row(row: dict) -> list[str]:
    return [str(row[k]) if k in ("epoch", "step") else repr(float(row[k])) for k in METRIC_FIELDS]


def train_loop(
    backbone: BackboneParams,
    phi: dict[str, np.ndarray],
    dataset: Dataset,
    tcpa_cfg: TcpaConfig,
    cfg: TrainConfig,
    variant: str = "tcpa",
    log_path: str | Path | None = None,
    progress: Callable[[dict], None] | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run ``cfg.epochs`` epochs with a cosine-annealed learning rate.

    Returns the final state and one metric row per step. With ``log_path``
    rows are appended to a CSV as they are produced.
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    dataset.check_config(backbone.config)
    check_phi(phi, backbone.config, tcpa_cfg, variant)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    features = extract_features(backbone, dataset.images) if variant == "linear" else None

    state = TrainState({k: np.array(v, dtype=np.float64) for k, v in phi.items()}, seed=cfg.seed)
    log: list[dict] = []
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if fh.tell() == 0:
            writer.writerow(METRIC_FIELDS)
    try:
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            for idx in batch_iter(dataset, cfg.batch_size, cfg.seed, epoch):
                lr = cosine_lr(state.step, total, cfg.learning_rate)
                step = state.step
                state, m = train_step(
                    state, dataset.images[idx], dataset.labels[idx], backbone, tcpa_cfg, cfg, lr,
                    variant, None if features is None else features[idx],
                )
                row = {"epoch": epoch, "step": step, "lr": lr, **m}
                log.append(row)
                if writer is not None:
                    writer.writerow(_format_row(row))
                if progress is not None:
                    progress(row)
        state.epoch = cfg.epochs
    finally:
        if fh is not None:
            fh.close()
    return state, log


@dataclass
class EvalResult:
    accuracy: float
    mean_loss: float
    predictions: np.ndarray


def evaluate(
    backbone: BackboneParams,
    phi: dict[str, np.ndarray],
    dataset: Dataset,
    tcpa_cfg: TcpaConfig,
    variant: str = "tcpa",
    batch_size: int = 64,
) -> EvalResult:
    """Top-1 accuracy and mean cross-entropy; argmax ties resolve to the lowest class."""
    preds, losses = [], []
    for s in range(0, len(dataset), batch_size):
        images = dataset.images[s:s + batch_size]
        labels = dataset.labels[s:s + batch_size]
        logits = forward(backbone, phi, images, tcpa_cfg, variant).logits
        preds.append(np.argmax(logits.data, axis=1))
        losses.append(cross_entropy(logits, labels).item() * len(labels))
    if not preds:
        return EvalResult(0.0, 0.0, np.zeros(0, dtype=np.int64))
    pred = np.concatenate(preds)
    return EvalResult(float(np.mean(pred == dataset.labels)), float(sum(losses) / len(dataset)), pred)
