"""Line-oriented ``key = value`` run configuration.

Keys are dotted (``model.blocks = 4``); ``#`` starts a comment; tuples are
comma-separated. Unknown keys are errors.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .coreset import BucketGeometry
from .errors import ConfigError, GeometryError
from .grid import VideoGrid
from .model import ToyModelConfig
from .sliding import TileGeometry
from .training import TrainConfig


def _tuple3(s: str):
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 3:
        raise ValueError("expected three comma-separated integers")
    return tuple(int(p) for p in parts)


def _ints(s: str):
    return tuple(int(p) for p in s.split(",") if p.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v not in ("true", "false", "1", "0", "yes", "no"):
        raise ValueError("expected a boolean")
    return v in ("true", "1", "yes")


def _seed(s: str) -> int:
    v = int(s, 0)
    if not 0 <= v < 1 << 64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return v


def _sets(s: str):
    return tuple(tuple(b.strip() for b in part.split(",") if b.strip())
                 for part in s.split(";") if part.strip())


SCHEMA = {
    "seed": (_seed, 0),
    "out": (str, "runs/default"),
    "model.blocks": (int, 4),
    "model.heads": (int, 4),
    "model.width": (int, 64),
    "model.ffn_hidden": (int, 256),
    "model.grid": (_tuple3, (4, 12, 8)),
    "model.tile": (_tuple3, (1, 4, 4)),
    "model.window": (_tuple3, (3, 3, 3)),
    "model.bucket": (_tuple3, (2, 3, 2)),
    "model.r_core": (float, 0.5),
    "model.scale_qk": (_bool, True),
    "data.count": (int, 64),
    "data.square": (int, 3),
    "pretrain.steps": (int, 2000),
    "pretrain.lr": (float, 0.2),
    "pretrain.batch": (int, 4),
    "router.steps": (int, 100),
    "router.lr": (float, 1e-2),
    "router.batch": (int, 4),
    "router.lambda_distill": (float, 20.0),
    "router.lambda_reg": (float, 0.02),
    "eval.batch": (int, 8),
    "sample.steps": (int, 50),
    "profile.steps": (int, 50),
    "profile.intervals": (int, 5),
    "profile.k": (_ints, (1, 4, 16, 48, 96, 192, 384)),
    "profile.reps": (int, 3),
    "bench.grid": (_tuple3, (16, 16, 16)),
    "bench.width": (int, 64),
    "bench.heads": (int, 1),
    "bench.reps": (int, 5),
    "bench.branches": (_sets, (("full", "sliding", "coreset"),)),
    "bench.tile": (_tuple3, (4, 4, 4)),
    "bench.window": (_tuple3, (2, 2, 4)),
    "bench.bucket": (_tuple3, (2, 2, 2)),
    "bench.r_core": (float, 0.5),
    "bench.kernel": (_tuple3, (2, 1, 1)),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v for k, (_, v) in SCHEMA.items()})
    source: str | None = None

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key: str, raw: str, line: int | None = None) -> None:
        if key not in SCHEMA:
            where = f" (line {line})" if line is not None else ""
            raise ConfigError(f"unknown config key {key!r}{where}")
        try:
            self.values[key] = SCHEMA[key][0](raw.strip())
        except ValueError as e:
            where = f" (line {line})" if line is not None else ""
            raise ConfigError(f"bad value for {key}{where}: {raw.strip()!r}: {e}") from None

    @classmethod
    def parse(cls, text: str, source: str | None = None) -> "RunConfig":
        cfg = cls(source=source)
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            k, _, v = line.partition("=")
            cfg.set(k.strip(), v, n)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"), str(path))

    def dump(self, exclude=()) -> str:
        def fmt(v):
            if isinstance(v, bool):
                return str(v).lower()
            if isinstance(v, tuple) and v and isinstance(v[0], tuple):
                return ";".join(",".join(x) for x in v)
            if isinstance(v, tuple):
                return ",".join(map(str, v))
            return str(v)
        return "".join(f"{k} = {fmt(v)}\n" for k, v in self.values.items() if k not in exclude)

    # derived objects

    def model_config(self) -> ToyModelConfig:
        v = self.values
        try:
            tile = TileGeometry(v["model.tile"], v["model.window"])
            tile.validate(VideoGrid(*v["model.grid"]))
        except GeometryError as e:
            raise GeometryError(f"[sliding-tile] {e}") from None
        try:
            bucket = BucketGeometry(v["model.bucket"], v["model.r_core"])
            bucket.validate(VideoGrid(*v["model.grid"]))
        except GeometryError as e:
            raise GeometryError(f"[coreset] {e}") from None
        cfg = ToyModelConfig(v["model.blocks"], v["model.heads"], v["model.width"],
                             v["model.ffn_hidden"], VideoGrid(*v["model.grid"]), tile, bucket,
                             v["model.scale_qk"])
        cfg.validate()
        return cfg

    def pretrain_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(v["pretrain.steps"], v["pretrain.lr"], v["pretrain.batch"], 0.0, 0.0)

    def router_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(v["router.steps"], v["router.lr"], v["router.batch"],
                           v["router.lambda_distill"], v["router.lambda_reg"])

    def bench_geometry(self):
        v = self.values
        grid = VideoGrid(*v["bench.grid"])
        try:
            tile = TileGeometry(v["bench.tile"], v["bench.window"])
            tile.validate(grid)
        except GeometryError as e:
            raise GeometryError(f"[sliding-tile] bench: {e}") from None
        try:
            bucket = BucketGeometry(v["bench.bucket"], v["bench.r_core"])
            bucket.validate(grid)
        except GeometryError as e:
            raise GeometryError(f"[coreset] bench: {e}") from None
        for name, n, k in zip("FHW", grid.shape, v["bench.kernel"]):
            if k < 1 or n % k:
                raise GeometryError(f"[profiler] bench.kernel {k} does not divide grid dim {name}={n}")
        return grid, tile, bucket

    def validate(self) -> None:
        """Check everything up front so an invalid config writes nothing."""
        self.model_config()
        self.pretrain_config().validate()
        self.router_config().validate()
        self.bench_geometry()
        v = self.values
        for key in ("data.count", "sample.steps", "profile.steps", "profile.intervals",
                    "eval.batch", "bench.width", "bench.heads"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if v["bench.reps"] < 3 or v["profile.reps"] < 3:
            raise ConfigError("benchmarks need at least 3 repetitions")
        if v["profile.intervals"] > v["profile.steps"]:
            raise ConfigError("profile.intervals cannot exceed profile.steps")
        L = self.model_config().grid.L
        if any(not 1 <= k <= L for k in v["profile.k"]):
            raise ConfigError(f"profile.k entries must lie in [1, {L}]")
        for branch_set in v["bench.branches"]:
            for b in branch_set:
                if b not in ("full", "sliding", "coreset", "avgpool"):
                    raise ConfigError(f"unknown bench branch {b!r}")
        if v["bench.width"] % v["bench.heads"]:
            raise ConfigError("bench.width must be divisible by bench.heads")
        out = Path(v["out"]).resolve()
        parent = out
        while not parent.exists():
            parent = parent.parent
        if not os.access(parent, os.W_OK):
            raise ConfigError(f"output directory {out} is not writable")
