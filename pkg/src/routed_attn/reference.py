"""Dense attention oracles and the recall-by-nearest-keys metric.

Everything here is deliberately the slow O(L^2 d) path that the sparse
branches are checked against.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import torch

from .errors import BoundsError, ContractError, NumericError
from .grid import ProjectionSet, VideoGrid, check_features, distance_matrix


def softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = logits - logits.amax(dim=dim, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def qk_scale(head_dim: int, scale_qk: bool) -> float:
    return 1.0 / math.sqrt(head_dim) if scale_qk else 1.0


def _finite(stage: str, t: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(stage)
    return t


def project(h: torch.Tensor, proj: ProjectionSet):
    if h.shape[-1] != proj.d:
        raise ContractError(f"feature width {h.shape[-1]} != projection width {proj.d}")
    q = _finite("query projection", h @ proj.wq)
    k = _finite("key projection", h @ proj.wk)
    v = _finite("value projection", h @ proj.wv)
    return q, k, v


def attention_weights(h, proj: ProjectionSet, scale_qk: bool = True, mask=None) -> torch.Tensor:
    """Post-softmax (L, L) weights; rows are stochastic over allowed keys."""
    q, k, _ = project(h, proj)
    return _weights(q, k, qk_scale(proj.d, scale_qk), mask, check=True)


def _weights(q, k, scale, mask=None, check=False):
    logits = (q @ k.transpose(-1, -2)) * scale
    if check:
        _finite("logits", logits)
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if mask.shape[-2:] != logits.shape[-2:]:
            raise ContractError(f"mask shape {tuple(mask.shape)} != {tuple(logits.shape[-2:])}")
        empty = ~mask.any(dim=-1)
        if empty.any():
            rows = torch.nonzero(empty).flatten().tolist()[:8]
            raise ContractError(f"mask has fully masked query rows, e.g. {rows}")
        logits = logits.masked_fill(~mask, float("-inf"))
    if not check:
        # fused kernel; also subtracts the row max
        return torch.softmax(logits, dim=-1)
    return _finite("softmax", softmax(logits))


def full_attention(h: torch.Tensor, proj: ProjectionSet, scale_qk: bool = True) -> torch.Tensor:
    q, k, v = project(h, proj)
    w = _weights(q, k, qk_scale(proj.d, scale_qk), check=True)
    return _finite("output", w @ v)


def masked_attention(h, proj: ProjectionSet, mask, scale_qk: bool = True) -> torch.Tensor:
    """Per query, softmax over only the unmasked keys, then the value sum."""
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.ndim != 2 or mask.shape != (h.shape[0], h.shape[0]):
        raise ContractError(f"mask must be ({h.shape[0]}, {h.shape[0]}), got {tuple(mask.shape)}")
    q, k, v = project(h, proj)
    w = _weights(q, k, qk_scale(proj.d, scale_qk), mask, check=True)
    return _finite("output", w @ v)


QUERY_CHUNK = 256


def sdpa(q, k, v, scale: float, mask=None) -> torch.Tensor:
    """Head-batched dense attention on already projected ``(..., L, dh)`` tensors.

    Queries are processed in fixed chunks so the score buffer stays cache-sized;
    rows are independent, so this only changes memory traffic.
    """
    n = q.shape[-2]
    if n <= QUERY_CHUNK:
        return _weights(q, k, scale, mask) @ v
    outs = []
    for i in range(0, n, QUERY_CHUNK):
        m = None if mask is None else mask[..., i:i + QUERY_CHUNK, :]
        outs.append(_weights(q[..., i:i + QUERY_CHUNK, :], k, scale, m) @ v)
    return torch.cat(outs, dim=-2)


# recall-by-nearest-keys

@lru_cache(maxsize=16)
def nearest_order(grid: VideoGrid) -> torch.Tensor:
    """(L, L): row i lists keys by ascending distance to i, ties by index."""
    d2 = distance_matrix(grid)
    L = grid.L
    # d2 <= 3 * 2^40 for any sane grid, so this composite key is exact and unique
    key = d2 * L + torch.arange(L)[None, :]
    return torch.argsort(key, dim=1)


def recall_from_weights(weights: torch.Tensor, grid: VideoGrid, k: int) -> torch.Tensor:
    """Mean over queries of attention mass on the ``k`` spatially nearest keys.

    ``weights`` has shape ``(..., L, L)``; leading dims (e.g. heads) are kept.
    """
    L = grid.L
    if weights.shape[-2:] != (L, L):
        raise ContractError(f"weights must end in ({L}, {L}), got {tuple(weights.shape)}")
    if not 1 <= k <= L:
        raise BoundsError(f"k={k} outside [1, {L}]")
    idx = nearest_order(grid)[:, :k]
    idx = idx.expand(*weights.shape[:-2], L, k)
    return torch.gather(weights, -1, idx).sum(-1).mean(-1)


def recall_by_nearest(h, proj: ProjectionSet, k: int, grid: VideoGrid,
                      scale_qk: bool = True) -> float:
    check_features(h, grid)
    if not 1 <= k <= grid.L:
        raise BoundsError(f"k={k} outside [1, {grid.L}]")
    return float(recall_from_weights(attention_weights(h, proj, scale_qk), grid, k))


@dataclass
class RecallCurve:
    """Per head: list of ``(k, recalled mass)`` pairs sorted by ``k``."""

    points: dict[int, list[tuple[int, float]]] = field(default_factory=dict)

    def add(self, head: int, k: int, value: float) -> None:
        self.points.setdefault(head, []).append((k, value))
        self.points[head].sort()

    def rows(self):
        for head in sorted(self.points):
            for k, v in self.points[head]:
                yield head, k, v

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["head", "k", "recall"])
            for head, k, v in self.rows():
                w.writerow([head, k, repr(v)])


def recall_curve(weights: torch.Tensor, grid: VideoGrid, ks) -> RecallCurve:
    """Curve for ``(heads, L, L)`` (or ``(L, L)``, treated as one head) weights."""
    if weights.ndim == 2:
        weights = weights[None]
    curve = RecallCurve()
    for k in ks:
        vals = recall_from_weights(weights, grid, int(k))
        for head, v in enumerate(vals.tolist()):
            curve.add(head, int(k), v)
    return curve
