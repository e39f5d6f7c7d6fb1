"""Sliding-tile attention: 1D and 3D masks plus a block-sparse executor."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import torch

from .counters import MacCounter
from .errors import ContractError, GeometryError
from .grid import ProjectionSet, VideoGrid, check_features
from .reference import project, qk_scale


def tile_center_1d(i: int, t: int) -> int:
    return (i // t) * t + math.ceil(t / 2)


def sliding_tile_mask_1d(L: int, t: int, w: int) -> torch.Tensor:
    """Token-unit mask: query ``i`` sees keys in ``(c(i) - w, c(i) + w]``."""
    if t < 1 or L % t:
        raise GeometryError(f"tile size {t} does not divide sequence length {L}")
    if w < 1:
        raise GeometryError(f"window must be >= 1, got {w}")
    i = torch.arange(L)
    c = (i // t) * t + (t + 1) // 2
    j = torch.arange(L)
    return (j[None, :] > (c - w)[:, None]) & (j[None, :] <= (c + w)[:, None])


@dataclass(frozen=True)
class TileGeometry:
    """Tile sizes in tokens and window sizes in tile units, per (F, H, W)."""

    tile: tuple[int, int, int]
    window: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "tile", tuple(int(x) for x in self.tile))
        object.__setattr__(self, "window", tuple(int(x) for x in self.window))
        if len(self.tile) != 3 or len(self.window) != 3:
            raise GeometryError("tile and window need three entries (F, H, W)")
        if any(t < 1 for t in self.tile):
            raise GeometryError(f"tile sizes must be positive, got {self.tile}")
        if any(w < 0 for w in self.window):
            raise GeometryError(f"window sizes must be non-negative, got {self.window}")

    def validate(self, grid: VideoGrid) -> None:
        for name, n, t in zip("FHW", grid.shape, self.tile):
            if n % t:
                raise GeometryError(f"tile size {t} does not divide grid dim {name}={n}")

    def tile_grid(self, grid: VideoGrid) -> tuple[int, int, int]:
        self.validate(grid)
        return tuple(n // t for n, t in zip(grid.shape, self.tile))

    @property
    def tile_tokens(self) -> int:
        return self.tile[0] * self.tile[1] * self.tile[2]

    def covers(self, grid: VideoGrid) -> bool:
        """True when every key tile is inside every query tile's window."""
        return all(w // 2 >= n - 1 for w, n in zip(self.window, self.tile_grid(grid)))


def token_tile_ids(grid: VideoGrid, tile) -> torch.Tensor:
    """Flat tile index of each token (tile grid flattened row-major)."""
    c = grid.coords()
    t = torch.tensor(tile)
    tc = c // t
    nt = torch.tensor(grid.shape) // t
    return (tc[:, 0] * nt[1] + tc[:, 1]) * nt[2] + tc[:, 2]


@dataclass
class TileMask:
    grid: VideoGrid
    geom: TileGeometry
    blocks: torch.Tensor  # (num_tiles, num_tiles) bool

    @property
    def num_tiles(self) -> int:
        return self.blocks.shape[0]

    @property
    def active_fraction(self) -> float:
        return float(self.blocks.sum()) / self.blocks.numel()

    def dense(self) -> torch.Tensor:
        ids = token_tile_ids(self.grid, self.geom.tile)
        return self.blocks[ids[:, None], ids[None, :]]


def sliding_tile_mask_3d(grid: VideoGrid, geom: TileGeometry) -> TileMask:
    """Tile-granular mask: tile ``q`` sees tile ``k`` iff ``|q_d - k_d| <= w_d // 2`` per dim."""
    nt = geom.tile_grid(grid)
    tf, th, tw = torch.meshgrid(*(torch.arange(n) for n in nt), indexing="ij")
    tc = torch.stack([tf.reshape(-1), th.reshape(-1), tw.reshape(-1)], dim=1)
    half = torch.tensor([w // 2 for w in geom.window])
    diff = (tc[:, None, :] - tc[None, :, :]).abs()
    return TileMask(grid, geom, (diff <= half).all(-1))


def sliding_window_mask_3d_tokens(grid: VideoGrid, tile, window) -> torch.Tensor:
    """Token-unit variant: the 1D tile-centre rule applied independently per dim.

    ``window`` is in tokens here. Not used by the executor; provided for
    comparison against the tile-unit rule of :func:`sliding_tile_mask_3d`.
    """
    for name, n, t in zip("FHW", grid.shape, tile):
        if n % t:
            raise GeometryError(f"tile size {t} does not divide grid dim {name}={n}")
    c = grid.coords()
    t = torch.tensor(tile)
    w = torch.tensor(window)
    centre = (c // t) * t + (t + 1) // 2
    lo = (centre - w)[:, None, :]
    hi = (centre + w)[:, None, :]
    kc = c[None, :, :]
    return ((kc > lo) & (kc <= hi)).all(-1)


@dataclass
class SlidingPlan:
    perm: torch.Tensor       # tile-major token order
    inv_perm: torch.Tensor
    groups: list             # [(query tiles (G,), key tiles (G, c))]
    group_inv: torch.Tensor  # tile position inside the concatenated group outputs
    num_tiles: int
    tile_tokens: int
    active_blocks: int

    @property
    def active_fraction(self) -> float:
        return self.active_blocks / self.num_tiles ** 2


@lru_cache(maxsize=64)
def sliding_plan(grid: VideoGrid, geom: TileGeometry) -> SlidingPlan:
    mask = sliding_tile_mask_3d(grid, geom)
    ids = token_tile_ids(grid, geom.tile)
    perm = torch.argsort(ids * grid.L + torch.arange(grid.L))
    inv = torch.empty_like(perm)
    inv[perm] = torch.arange(grid.L)
    counts = mask.blocks.sum(1)
    groups = []
    for c in sorted(set(counts.tolist())):
        qt = torch.nonzero(counts == c).flatten()
        kt = torch.stack([torch.nonzero(mask.blocks[q]).flatten() for q in qt.tolist()])
        groups.append((qt, kt))
    order = torch.cat([g[0] for g in groups])
    group_inv = torch.empty_like(order)
    group_inv[order] = torch.arange(len(order))
    return SlidingPlan(perm, inv, groups, group_inv, mask.num_tiles, geom.tile_tokens,
                       int(mask.blocks.sum()))


def sliding_tile_attention(q, k, v, plan: SlidingPlan, scale: float,
                           counter: MacCounter | None = None) -> torch.Tensor:
    """Block-sparse attention over ``(..., L, dh)``; only active tile blocks are computed.

    Query tiles are grouped by their number of active key tiles so each group
    is one batched matmul without padding.
    """
    lead = q.shape[:-2]
    L, dh = q.shape[-2:]
    nt, T = plan.num_tiles, plan.tile_tokens
    if nt * T != L:
        raise ContractError(f"plan is for L={nt * T}, got {L}")
    qt = q[..., plan.perm, :].reshape(*lead, nt, T, dh)
    kt = k[..., plan.perm, :].reshape(*lead, nt, T, dh)
    vt = v[..., plan.perm, :].reshape(*lead, nt, T, dh)
    parts = []
    for qidx, kidx in plan.groups:
        G, c = kidx.shape
        kk = kt[..., kidx, :, :].reshape(*lead, G, c * T, dh)
        vv = vt[..., kidx, :, :].reshape(*lead, G, c * T, v.shape[-1])
        w = torch.softmax((qt[..., qidx, :, :] @ kk.transpose(-1, -2)) * scale, dim=-1)
        parts.append(w @ vv)
    out = torch.cat(parts, dim=-3)[..., plan.group_inv, :, :]
    if counter is not None:
        n_seq = math.prod(lead)
        counter.add("attention", n_seq * plan.active_blocks * T * T * (dh + v.shape[-1]))
        counter.active_fraction = plan.active_fraction
    return out.reshape(*lead, L, v.shape[-1])[..., plan.inv_perm, :]


def sliding_attention(h, proj: ProjectionSet, grid: VideoGrid, geom: TileGeometry,
                      scale_qk: bool = True, counter: MacCounter | None = None) -> torch.Tensor:
    """Single-head sliding-tile attention on features ``h`` of shape ``(L, d)``."""
    check_features(h, grid)
    plan = sliding_plan(grid, geom)
    q, k, v = project(h, proj)
    if counter is None:
        counter = MacCounter()
    counter.add("projection", 3 * grid.L * proj.d * proj.d)
    return sliding_tile_attention(q, k, v, plan, qk_scale(proj.d, scale_qk), counter)
