"""Token-grid geometry and small numeric primitives.

Tokens of an ``(F, H, W)`` video are flattened row-major: frame outermost,
width innermost, so ``i = f*H*W + h*W + w``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import BoundsError, ConfigError, ContractError, GeometryError

DTYPE = torch.float64


@dataclass(frozen=True)
class VideoGrid:
    frames: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("frames", "height", "width"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise GeometryError(f"grid {name} must be a positive int, got {v!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.frames, self.height, self.width)

    @property
    def L(self) -> int:
        return self.frames * self.height * self.width

    def __len__(self) -> int:
        return self.L

    def coords(self) -> torch.Tensor:
        """(L, 3) integer coordinates of every token in flatten order."""
        f, h, w = torch.meshgrid(
            torch.arange(self.frames), torch.arange(self.height), torch.arange(self.width),
            indexing="ij",
        )
        return torch.stack([f.reshape(-1), h.reshape(-1), w.reshape(-1)], dim=1)


def flatten_index(f: int, h: int, w: int, grid: VideoGrid) -> int:
    for name, v, n in (("f", f, grid.frames), ("h", h, grid.height), ("w", w, grid.width)):
        if not 0 <= v < n:
            raise BoundsError(f"coordinate {name}={v} outside [0, {n})")
    return (f * grid.height + h) * grid.width + w


def unflatten_index(i: int, grid: VideoGrid) -> tuple[int, int, int]:
    if not 0 <= i < grid.L:
        raise BoundsError(f"token index {i} outside [0, {grid.L})")
    f, rem = divmod(i, grid.height * grid.width)
    h, w = divmod(rem, grid.width)
    return f, h, w


def spatial_distance(i: int, j: int, grid: VideoGrid) -> float:
    """Euclidean distance between the grid coordinates of tokens ``i`` and ``j``."""
    a = unflatten_index(i, grid)
    b = unflatten_index(j, grid)
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def distance_matrix(grid: VideoGrid) -> torch.Tensor:
    """(L, L) matrix of squared grid distances (integers stored as int64)."""
    c = grid.coords()
    diff = c[:, None, :] - c[None, :, :]
    return (diff * diff).sum(-1)


def timestep_embedding(t: float | torch.Tensor, d: int) -> torch.Tensor:
    """Sinusoidal embedding with interleaved (sin, cos) pairs.

    Entry ``2j`` is ``sin(t * w_j)`` and ``2j+1`` is ``cos(t * w_j)`` with
    ``w_j = 10000 ** (-2j/d)``. A tensor ``t`` of shape ``(B,)`` gives ``(B, d)``.
    """
    if d < 2 or d % 2:
        raise ConfigError(f"timestep embedding width must be even and >= 2, got {d}")
    t = torch.as_tensor(t, dtype=DTYPE)
    if torch.any((t < 0) | (t > 1)):
        raise ContractError("timestep must lie in [0, 1]")
    j = torch.arange(d // 2, dtype=DTYPE)
    omega = 10000.0 ** (-2.0 * j / d)
    arg = t[..., None] * omega
    out = torch.stack([torch.sin(arg), torch.cos(arg)], dim=-1)
    return out.reshape(*t.shape, d)


@dataclass
class ProjectionSet:
    """Query/key/value projection matrices, each ``d x d``."""

    wq: torch.Tensor
    wk: torch.Tensor
    wv: torch.Tensor

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv"):
            m = getattr(self, name)
            if m.ndim != 2 or m.shape != (d, d):
                raise ContractError(f"{name} must be {d}x{d}, got {tuple(m.shape)}")
            if not torch.isfinite(m).all():
                raise ContractError(f"{name} has non-finite entries")

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def random(cls, d: int, gen: torch.Generator | None = None, scale: float = 1.0):
        kw = dict(dtype=DTYPE, generator=gen)
        s = scale / math.sqrt(d)
        return cls(torch.randn(d, d, **kw) * s, torch.randn(d, d, **kw) * s,
                   torch.randn(d, d, **kw) * s)


def check_features(h: torch.Tensor, grid: VideoGrid) -> None:
    if h.ndim != 2 or h.shape[0] != grid.L:
        raise ContractError(f"features must be ({grid.L}, d), got {tuple(h.shape)}")
    if not torch.isfinite(h).all():
        raise ContractError("features contain NaN/Inf")
