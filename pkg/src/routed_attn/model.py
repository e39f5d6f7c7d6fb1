"""Toy flow-matching video transformer hosting the three-branch attention blocks."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from . import tensorio
from .coreset import BucketGeometry
from .counters import MacCounter
from .errors import ConfigError, ContractError, DivergenceError, FormatError, NumericError
from .grid import DTYPE, VideoGrid, timestep_embedding
from .rng import Stream
from .reference import qk_scale
from .router import (BranchGeometry, _split_heads, compute_gates, mixed_attention_hard,
                     mixed_attention_soft, multihead_full_attention, route_hard)
from .sliding import TileGeometry

MODES = ("dense", "soft", "hard")
LN_EPS = 1e-6


@dataclass(frozen=True)
class ToyModelConfig:
    blocks: int = 4
    heads: int = 4
    width: int = 64
    ffn_hidden: int = 256
    grid: VideoGrid = VideoGrid(4, 12, 8)
    tile: TileGeometry = TileGeometry((1, 4, 4), (3, 3, 3))
    bucket: BucketGeometry = BucketGeometry((2, 3, 2), 0.5)
    scale_qk: bool = True

    def validate(self) -> None:
        for name in ("blocks", "heads", "width", "ffn_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 2:
            raise ConfigError("width must be even for the timestep embedding")
        self.branch_geometry.validate()

    @property
    def branch_geometry(self) -> BranchGeometry:
        return BranchGeometry(self.grid, self.tile, self.bucket)


def position_embedding(grid: VideoGrid, d: int) -> torch.Tensor:
    """Fixed (L, d) sinusoidal code of the (f, h, w) coordinates; no parameters."""
    per_axis = 2 * (d // 6)
    out = torch.zeros(grid.L, d, dtype=DTYPE)
    if per_axis == 0:
        return out
    c = grid.coords().to(DTYPE)
    j = torch.arange(per_axis // 2, dtype=DTYPE)
    omega = 100.0 ** (-2.0 * j / per_axis)
    for a in range(3):
        arg = c[:, a:a + 1] * omega
        out[:, a * per_axis:(a + 1) * per_axis] = torch.stack(
            [torch.sin(arg), torch.cos(arg)], -1).reshape(grid.L, per_axis)
    return out


def _param_shapes(cfg: ToyModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.width, cfg.ffn_hidden
    shapes = {"in_proj.w": (d, d), "in_proj.b": (d,), "time_proj.w": (d, d)}
    for n in range(cfg.blocks):
        p = f"blocks.{n}."
        shapes.update({
            p + "norm1.g": (d,), p + "norm1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d), p + "attn.wv": (d, d),
            p + "attn.wo": (d, d),
            p + "norm2.g": (d,), p + "norm2.b": (d,),
            p + "ffn.w1": (d, f), p + "ffn.b1": (f,), p + "ffn.w2": (f, d), p + "ffn.b2": (d,),
        })
    shapes.update({"out_norm.g": (d,), "out_norm.b": (d,), "out_proj.w": (d, d)})
    for n in range(cfg.blocks):
        shapes[f"router.{n}"] = (d, 3 * cfg.heads)
    return shapes


def group_of(name: str) -> str:
    return "router" if name.startswith("router.") else "base"


@dataclass
class ModelState:
    config: ToyModelConfig
    params: dict[str, torch.Tensor]
    frozen: dict[str, bool] = field(default_factory=lambda: {"base": False, "router": True})

    @classmethod
    def init(cls, config: ToyModelConfig, stream: Stream) -> "ModelState":
        """Random base weights, zero router (uniform gates) and zero output head."""
        config.validate()
        params = {}
        resid = 1.0 / math.sqrt(2 * config.blocks)
        for name, shape in _param_shapes(config).items():
            if name.startswith("router.") or name == "out_proj.w" or name.endswith(".b") \
                    or name.endswith(".b1") or name.endswith(".b2"):
                params[name] = torch.zeros(shape, dtype=DTYPE)
            elif name.endswith(".g"):
                params[name] = torch.ones(shape, dtype=DTYPE)
            else:
                w = stream.child("init", name).normal(*shape) / math.sqrt(shape[0])
                if name.endswith("attn.wo") or name.endswith("ffn.w2"):
                    w = w * resid
                params[name] = w
        return cls(config, params)

    def names(self, group: str = "all") -> list[str]:
        if group == "all":
            return list(self.params)
        if group not in ("base", "router"):
            raise ContractError(f"unknown parameter group {group!r}")
        return [n for n in self.params if group_of(n) == group]

    def router_weights(self) -> list[torch.Tensor]:
        return [self.params[f"router.{n}"] for n in range(self.config.blocks)]

    def clone(self) -> "ModelState":
        return ModelState(self.config, {k: v.detach().clone() for k, v in self.params.items()},
                          dict(self.frozen))

    def checksum(self, group: str = "all") -> str:
        h = hashlib.sha256()
        for n in self.names(group):
            h.update(n.encode())
            h.update(self.params[n].detach().contiguous().numpy().tobytes())
        return h.hexdigest()

    def num_params(self, group: str = "all") -> int:
        return sum(self.params[n].numel() for n in self.names(group))

    def save(self, directory) -> None:
        """Write one ``.vrta`` per tensor plus ``manifest.csv`` and ``config.txt``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "manifest.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["name", "group", "frozen", "file", "shape"])
            for n, t in self.params.items():
                fname = n + ".vrta"
                tensorio.save(d / fname, t)
                g = group_of(n)
                w.writerow([n, g, int(self.frozen[g]), fname, "x".join(map(str, t.shape))])
        (d / "config.txt").write_text(config_text(self.config))

    @classmethod
    def load(cls, directory) -> "ModelState":
        d = Path(directory)
        if not (d / "manifest.csv").exists():
            raise FileNotFoundError(f"no checkpoint at {d} (manifest.csv missing); "
                                    "run the 'train' command first or pass --config/--out")
        config = parse_config_text((d / "config.txt").read_text())
        params, frozen = {}, {}
        with open(d / "manifest.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                params[row["name"]] = tensorio.load(d / row["file"])
                frozen[row["group"]] = bool(int(row["frozen"]))
        expected = _param_shapes(config)
        if set(expected) != set(params):
            raise FormatError("checkpoint parameters do not match its config")
        for n, s in expected.items():
            if tuple(params[n].shape) != s:
                raise FormatError(f"parameter {n} has shape {tuple(params[n].shape)}, expected {s}")
        frozen.setdefault("base", False)
        frozen.setdefault("router", True)
        return cls(config, params, frozen)


def config_text(cfg: ToyModelConfig) -> str:
    tup = lambda t: ",".join(map(str, t))
    return "\n".join([
        f"blocks = {cfg.blocks}", f"heads = {cfg.heads}", f"width = {cfg.width}",
        f"ffn_hidden = {cfg.ffn_hidden}", f"grid = {tup(cfg.grid.shape)}",
        f"tile = {tup(cfg.tile.tile)}", f"window = {tup(cfg.tile.window)}",
        f"bucket = {tup(cfg.bucket.bucket)}", f"r_core = {cfg.bucket.r_core!r}",
        f"scale_qk = {str(cfg.scale_qk).lower()}", "",
    ])


def parse_config_text(text: str) -> ToyModelConfig:
    kv = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
    ints = lambda s: tuple(int(x) for x in s.split(","))
    return ToyModelConfig(
        blocks=int(kv["blocks"]), heads=int(kv["heads"]), width=int(kv["width"]),
        ffn_hidden=int(kv["ffn_hidden"]), grid=VideoGrid(*ints(kv["grid"])),
        tile=TileGeometry(ints(kv["tile"]), ints(kv["window"])),
        bucket=BucketGeometry(ints(kv["bucket"]), float(kv["r_core"])),
        scale_qk=kv["scale_qk"] == "true",
    )


# forward

def layer_norm(x, g, b):
    return F.layer_norm(x, (x.shape[-1],), g, b, LN_EPS)


@dataclass
class ForwardOutput:
    velocity: torch.Tensor
    features: torch.Tensor          # final-block features H^(N)
    gates: list[torch.Tensor]       # per block (B, heads, 3)
    choices: list[torch.Tensor] | None = None
    weights: list[torch.Tensor] | None = None   # per block (B, heads, L, L), dense only


def model_forward(state: ModelState, x_t: torch.Tensor, t, mode: str = "dense",
                  params: dict[str, torch.Tensor] | None = None, alpha=None, choices=None,
                  counter: MacCounter | None = None,
                  capture_weights: bool = False) -> ForwardOutput:
    """Velocity prediction for ``x_t`` of shape ``(B, L, d)`` (or ``(L, d)``) at times ``t``.

    ``params`` overrides ``state.params`` (used for gradient tracking);
    ``alpha`` / ``choices`` override the router per block in soft / hard mode.
    """
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    cfg = state.config
    p = state.params if params is None else params
    single = x_t.ndim == 2
    if single:
        x_t = x_t[None]
    B, L, d = x_t.shape
    if L != cfg.grid.L or d != cfg.width:
        raise ContractError(f"x_t must be (B, {cfg.grid.L}, {cfg.width}), got {tuple(x_t.shape)}")
    t = torch.as_tensor(t, dtype=DTYPE).reshape(-1).expand(B)
    temb = timestep_embedding(t, d)                                   # (B, d)
    geo = cfg.branch_geometry
    h = x_t @ p["in_proj.w"] + p["in_proj.b"] + position_embedding(cfg.grid, d) \
        + (temb @ p["time_proj.w"])[:, None, :]
    gates, all_choices, weights = [], [], []
    for n in range(cfg.blocks):
        pre = f"blocks.{n}."
        wq, wk, wv = p[pre + "attn.wq"], p[pre + "attn.wk"], p[pre + "attn.wv"]
        xn = layer_norm(h, p[pre + "norm1.g"], p[pre + "norm1.b"])
        g = compute_gates(temb, p[f"router.{n}"])                     # (B, heads, 3)
        gates.append(g)
        if mode == "dense":
            a = multihead_full_attention(xn, wq, wk, wv, cfg.heads, cfg.scale_qk)
            if counter is not None:
                counter.add("attention", B * 2 * L * L * d)
            if capture_weights:
                q, k = (_split_heads(xn @ w, cfg.heads) for w in (wq, wk))
                weights.append(torch.softmax(
                    q @ k.transpose(-1, -2) * qk_scale(d // cfg.heads, cfg.scale_qk), dim=-1))
        elif mode == "soft":
            al = g if alpha is None else torch.as_tensor(alpha[n], dtype=DTYPE).expand(B, cfg.heads, 3)
            a = mixed_attention_soft(xn, wq, wk, wv, cfg.heads, geo, al, cfg.scale_qk, counter)
        else:
            ch = route_hard(g) if choices is None else \
                torch.as_tensor(choices[n], dtype=torch.long).expand(B, cfg.heads)
            all_choices.append(ch)
            a = torch.stack([mixed_attention_hard(xn[b], wq, wk, wv, cfg.heads, geo, ch[b],
                                                  cfg.scale_qk, counter) for b in range(B)])
        h = h + a @ p[pre + "attn.wo"]
        xn = layer_norm(h, p[pre + "norm2.g"], p[pre + "norm2.b"])
        h = h + F.gelu(xn @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]) @ p[pre + "ffn.w2"] \
            + p[pre + "ffn.b2"]
        if not torch.isfinite(h).all():
            raise NumericError(f"block {n}")
    v = layer_norm(h, p["out_norm.g"], p["out_norm.b"]) @ p["out_proj.w"]
    chs = all_choices if mode == "hard" else None
    ws = weights if capture_weights and mode == "dense" else None
    if single:
        return ForwardOutput(v[0], h[0], [x[0] for x in gates],
                             None if chs is None else [c[0] for c in chs],
                             None if ws is None else [w[0] for w in ws])
    return ForwardOutput(v, h, gates, chs, ws)


# data and flows

def synth_dataset(count: int, grid: VideoGrid, d: int, stream: Stream, square: int = 3,
                  velocity=None) -> list[torch.Tensor]:
    """Videos of a bright square moving at constant velocity (wrapping at edges).

    Each token is ``code_fg`` inside the square and ``code_bg`` outside; the two
    code vectors are fixed per stream. ``velocity`` forces ``(dh, dw)`` per frame.
    """
    if count < 1:
        raise ConfigError("dataset count must be >= 1")
    if min(grid.shape) < 2:
        raise ConfigError(f"degenerate grid {grid.shape}: every dim must be >= 2")
    code = stream.child("code").normal(2, d)
    s = max(1, min(square, grid.height, grid.width))
    coords = grid.coords()
    out = []
    for i in range(count):
        r = stream.child("sample", str(i))
        h0 = int(r.integers(0, grid.height))
        w0 = int(r.integers(0, grid.width))
        if velocity is None:
            vh, vw = (int(x) for x in r.integers(-1, 2, size=2))
        else:
            vh, vw = velocity
        f, hh, ww = coords[:, 0], coords[:, 1], coords[:, 2]
        dh_ = (hh - (h0 + vh * f)) % grid.height
        dw_ = (ww - (w0 + vw * f)) % grid.width
        inside = ((dh_ < s) & (dw_ < s)).to(torch.long)
        out.append(code[1 - inside].clone())
    return out


@dataclass
class FlowSample:
    x0: torch.Tensor
    x1: torch.Tensor
    t: torch.Tensor
    x_t: torch.Tensor


def flow_interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> FlowSample:
    if x0.shape != x1.shape:
        raise ContractError(f"x0 {tuple(x0.shape)} and x1 {tuple(x1.shape)} differ in shape")
    t = torch.as_tensor(t, dtype=DTYPE)
    if torch.any((t < 0) | (t > 1)):
        raise ContractError("t must lie in [0, 1]")
    tb = t.reshape(*t.shape, *([1] * (x0.ndim - t.ndim)))
    return FlowSample(x0, x1, t, tb * x1 + (1 - tb) * x0)


def euler_sample(state: ModelState, steps: int, stream: Stream, mode: str = "dense",
                 velocity_fn=None, trace=None) -> torch.Tensor:
    """Integrate ``dx = v dt`` from seeded Gaussian noise over ``t_k = k / steps``.

    ``velocity_fn(x, t) -> v`` replaces the model (used by tests); ``trace``,
    if given, is called as ``trace(k, t_k, x, forward_output)`` at every step.
    """
    if steps < 1:
        raise ConfigError("sampling needs at least one step")
    cfg = state.config
    x = stream.child("noise").normal(cfg.grid.L, cfg.width)
    with torch.no_grad():
        for k in range(steps):
            tk = k / steps
            if velocity_fn is None:
                fo = model_forward(state, x, tk, mode)
                v = fo.velocity
            else:
                fo, v = None, velocity_fn(x, tk)
            if trace is not None:
                trace(k, tk, x, fo)
            x = x + v / steps
            if not torch.isfinite(x).all() or float(x.norm()) > 1e6:
                raise DivergenceError(f"sampling diverged at step {k} (|x| > 1e6)")
    return x
