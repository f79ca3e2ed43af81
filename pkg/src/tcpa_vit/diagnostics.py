"""Attention-map export and epsilon-rank measurement.

Singular values come from a one-sided (Hestenes) Jacobi SVD. Column pairs
are rotated until their Gram matrix is diagonal; the singular values are the
final column norms.

Files written here:

* attention maps: one headerless CSV per (layer, head), ``T`` rows of ``T``
  values at 17 significant digits, plus ``layout.json`` naming the slot groups;
* features: ``sample_id,label,f_0..f_{D-1}``;
* rank reports: ``layer,head,epsilon,rank,sigma_max``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .model import LayerRecord

DEFAULT_EPSILON = 1e-6
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
FLOAT_FMT = "%.17g"


@dataclass
class JacobiResult:
    singular_values: np.ndarray  # descending
    sweeps: int
    off_diagonal: float  # relative off-diagonal Gram mass at exit
    converged: bool


@dataclass
class RankReport:
    layer: int
    head: int
    epsilon: float
    singular_values: np.ndarray
    epsilon_rank: int
    matrix_extent: int
    converged: bool = True

    @property
    def sigma_max(self) -> float:
        return float(self.singular_values[0]) if self.singular_values.size else 0.0


def _off_diagonal_mass(u: np.ndarray) -> float:
    gram = u.T @ u
    total = float(np.trace(gram))
    if total == 0.0:
        return 0.0
    off = gram - np.diag(np.diag(gram))
    return float(np.sqrt((off * off).sum())) / total


def jacobi_singular_values(matrix, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS) -> JacobiResult:
    """Singular values of a real matrix by one-sided Jacobi rotations.

    Stops once the off-diagonal Frobenius mass of the column Gram matrix,
    relative to its trace, drops below ``tol``, or after ``max_sweeps``
    sweeps (``converged`` is then False).
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got extents {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    # Work on the orientation with fewer columns; singular values are shared.
    u = a if a.shape[1] <= a.shape[0] else a.T.copy()
    n = u.shape[1]
    sweeps = 0
    off = _off_diagonal_mass(u)
    while off >= tol and sweeps < max_sweeps:
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = u[:, p] @ u[:, p]
                beta = u[:, q] @ u[:, q]
                gamma = u[:, p] @ u[:, q]
                if gamma == 0.0 or abs(gamma) <= 1e-300 * math.sqrt(alpha * beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                up = u[:, p].copy()
                u[:, p] = c * up - s * u[:, q]
                u[:, q] = s * up + c * u[:, q]
        sweeps += 1
        off = _off_diagonal_mass(u)
    sigma = np.sort(np.sqrt((u * u).sum(axis=0)))[::-1]
    return JacobiResult(sigma, sweeps, off, off < tol)


def epsilon_rank(matrix, epsilon: float = DEFAULT_EPSILON, layer: int = -1, head: int = -1) -> RankReport:
    """Count singular values above ``epsilon * sigma_1`` (0 for a zero matrix)."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    res = jacobi_singular_values(matrix)
    sigma = res.singular_values
    top = float(sigma[0]) if sigma.size else 0.0
    rank = 0 if top == 0.0 else int(np.count_nonzero(sigma > epsilon * top))
    return RankReport(layer, head, epsilon, sigma, rank, int(np.shape(matrix)[0]), res.converged)


def rank_reports(snapshot: Mapping[int, np.ndarray], epsilon: float = DEFAULT_EPSILON) -> list[RankReport]:
    """One report per (layer, head) of a ``{layer: [heads, T, T]}`` snapshot."""
    return [
        epsilon_rank(maps[h], epsilon, layer, h)
        for layer, maps in sorted(snapshot.items())
        for h in range(maps.shape[0])
    ]


# ---------------------------------------------------------------------------
# Snapshots and CSV files
# ---------------------------------------------------------------------------


def attention_snapshot(records: Sequence[LayerRecord], sample: int = 0, applied: bool = True) -> dict[int, np.ndarray]:
    """Per-layer attention maps ``[heads, T, T]`` of one sample from a captured forward pass.

    ``applied`` selects the map actually used on the values (after any
    post-softmax mask); otherwise the plain softmax map is returned.
    """
    snap = {}
    for rec in records:
        maps = rec.effective if applied else rec.attn
        if maps is None:
            raise ValueError(f"layer {rec.layer} has no captured attention; run forward with capture=True")
        snap[rec.layer] = np.array(maps[sample])
    return snap


def attention_filename(layer: int, head: int, prefix: str = "attn") -> str:
    return f"{prefix}_layer{layer}_head{head}.csv"


def write_matrix_csv(path: str | Path, matrix) -> None:
    np.savetxt(path, np.asarray(matrix, dtype=np.float64), fmt=FLOAT_FMT, delimiter=",")


def read_matrix_csv(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, delimiter=",", ndmin=2)


def export_attention(
    snapshot: Mapping[int, np.ndarray],
    out_dir: str | Path,
    layout: Sequence[tuple[str, int, int]] | None = None,
    prefix: str = "attn",
) -> list[Path]:
    """Write one CSV per (layer, head) plus a ``layout.json`` sidecar; returns the CSV paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    extent = None
    for layer, maps in sorted(snapshot.items()):
        maps = np.asarray(maps)
        if maps.ndim != 3 or maps.shape[1] != maps.shape[2]:
            raise ValueError(f"layer {layer}: expected [heads, T, T], got {maps.shape}")
        extent = maps.shape[1]
        for h in range(maps.shape[0]):
            path = out / attention_filename(layer, h, prefix)
            write_matrix_csv(path, maps[h])
            paths.append(path)
    if layout is None and extent is not None:
        layout = [("tokens", 0, extent)]
    sidecar = {"extent": extent, "slots": [{"name": n, "start": a, "stop": b} for n, a, b in (layout or [])]}
    (out / "layout.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return paths


def write_features(path: str | Path, features, labels) -> None:
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if feats.ndim != 2 or labels.shape != (feats.shape[0],):
        raise ValueError(f"inconsistent feature extents {feats.shape} / {labels.shape}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label"] + [f"f_{i}" for i in range(feats.shape[1])])
        for i, (row, lab) in enumerate(zip(feats, labels)):
            w.writerow([i, int(lab)] + [FLOAT_FMT % x for x in row])


def read_features(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(sample_ids, labels, features)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:2] != ["sample_id", "label"]:
        raise ValueError(f"unexpected feature header {header[:2]}")
    d = len(header) - 2
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    feats = np.array([[float(x) for x in r[2:]] for r in body], dtype=np.float64).reshape(len(body), d)
    return ids, labels, feats


RANK_FIELDS = ("layer", "head", "epsilon", "rank", "sigma_max")


def write_rank_report(path: str | Path, reports: Sequence[RankReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RANK_FIELDS)
        for r in reports:
            w.writerow([r.layer, r.head, FLOAT_FMT % r.epsilon, r.epsilon_rank, FLOAT_FMT % r.sigma_max])


def read_rank_report(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"layer": int(r["layer"]), "head": int(r["head"]), "epsilon": float(r["epsilon"]),
             "rank": int(r["rank"]), "sigma_max": float(r["sigma_max"])}
            for r in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------------------
# Diversity
# ---------------------------------------------------------------------------


@dataclass
class DiversityRow:
    layer: int
    mean_rank_a: float
    mean_rank_b: float


def diversity_report(
    snapshots_a: Sequence[Mapping[int, np.ndarray]],
    snapshots_b: Sequence[Mapping[int, np.ndarray]],
    epsilon: float = DEFAULT_EPSILON,
) -> list[DiversityRow]:
    """Per-layer mean epsilon-rank (over samples and heads) of two models.

    Typically ``a`` is a dense-prompt model and ``b`` a TCPA model captured on
    the same inputs. Descriptive only; nothing is asserted about the outcome.
    """

    def per_layer(snaps):
        acc: dict[int, list[int]] = {}
        for snap in snaps:
            for r in rank_reports(snap, epsilon):
                acc.setdefault(r.layer, []).append(r.epsilon_rank)
        return {k: float(np.mean(v)) for k, v in acc.items()}

    a, b = per_layer(snapshots_a), per_layer(snapshots_b)
    if set(a) != set(b):
        raise ValueError(f"layer sets differ: {sorted(a)} vs {sorted(b)}")
    return [DiversityRow(layer, a[layer], b[layer]) for layer in sorted(a)]


def format_diversity(rows: Sequence[DiversityRow], names: tuple[str, str] = ("vpt", "tcpa")) -> str:
    lines = [f"layer  {names[0]:>10}  {names[1]:>10}"]
    lines += [f"{r.layer:>5}  {r.mean_rank_a:>10.3f}  {r.mean_rank_b:>10.3f}" for r in rows]
    return "\n".join(lines)
