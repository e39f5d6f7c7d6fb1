"""End-to-end runs shared by the CLI and the acceptance tests."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from . import tensorio
from .config import RunConfig
from .counters import MacCounter
from .grid import timestep_embedding
from .model import ModelState, euler_sample, model_forward, synth_dataset
from .router import compute_gates, gate_records, route_hard, write_gate_dump
from .rng import Stream
from .training import (TrainResult, distill_loss, draw_batch, pretrain_base, train_router,
                       write_log)

logger = logging.getLogger(__name__)


def dataset_for(cfg: RunConfig):
    mc = cfg.model_config()
    return synth_dataset(cfg["data.count"], mc.grid, mc.width,
                         Stream(cfg["seed"], ("data",)), square=cfg["data.square"])


def eval_batch_for(cfg: RunConfig, dataset, label: str = "eval"):
    return draw_batch(dataset, cfg["eval.batch"], Stream(cfg["seed"], (label,)))


def pretrain(cfg: RunConfig, dataset=None) -> TrainResult:
    mc = cfg.model_config()
    dataset = dataset if dataset is not None else dataset_for(cfg)
    root = Stream(cfg["seed"])
    state = ModelState.init(mc, root.child("model"))
    return pretrain_base(state, cfg.pretrain_config(), dataset, root.child("pretrain"),
                         eval_batch_for(cfg, dataset))


def router_phase(cfg: RunConfig, base: ModelState, dataset=None) -> TrainResult:
    dataset = dataset if dataset is not None else dataset_for(cfg)
    return train_router(base, cfg.router_config(), dataset, Stream(cfg["seed"], ("router",)))


def sampling_gates(state: ModelState, steps: int):
    """Per sampling step: list over blocks of ``(heads, 3)`` gates at ``t_k = k/steps``."""
    out = []
    for k in range(steps):
        temb = timestep_embedding(torch.tensor(k / steps), state.config.width)
        out.append([compute_gates(temb, w).detach() for w in state.router_weights()])
    return out


def route_dump(state: ModelState, steps: int):
    recs = []
    for k, gates in enumerate(sampling_gates(state, steps)):
        recs += gate_records(k, gates)
    return recs


def routed_mac_fraction(state: ModelState, steps: int) -> tuple[float, list[float]]:
    """Attention MACs of hard routing relative to dense, per sampling step and overall.

    Measured by the instrumented executors on one seeded input per step.
    """
    cfg = state.config
    x = Stream(0, ("mac-probe",)).normal(cfg.grid.L, cfg.width)
    per_step, tot_r, tot_d = [], 0, 0
    with torch.no_grad():
        for k in range(steps):
            cr, cd = MacCounter(), MacCounter()
            model_forward(state, x, k / steps, "hard", counter=cr)
            model_forward(state, x, k / steps, "dense", counter=cd)
            per_step.append(cr["attention"] / cd["attention"])
            tot_r += cr["attention"]
            tot_d += cd["attention"]
    return tot_r / tot_d, per_step


@dataclass
class SampleResult:
    dense: torch.Tensor
    hard: torch.Tensor

    @property
    def msd(self) -> float:
        return float(torch.mean((self.dense - self.hard) ** 2))


def sample_pair(cfg: RunConfig, state: ModelState) -> SampleResult:
    st = Stream(cfg["seed"], ("sample",))
    dense = euler_sample(state, cfg["sample.steps"], st, "dense")
    hard = euler_sample(state, cfg["sample.steps"], st, "hard")
    return SampleResult(dense, hard)


def heldout_hard_distill(cfg: RunConfig, state: ModelState, dataset) -> float:
    b = eval_batch_for(cfg, dataset, "heldout")
    with torch.no_grad():
        d = model_forward(state, b.x_t, b.t, "dense")
        h = model_forward(state, b.x_t, b.t, "hard")
    return float(distill_loss(h.features, d.features))


def run_train(cfg: RunConfig, out: Path) -> dict:
    """Pretrain, train the router, and write checkpoints, logs and gate dumps."""
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset_for(cfg)
    t0 = time.perf_counter()
    pre = pretrain(cfg, dataset)
    t1 = time.perf_counter()
    pre.state.save(out / "base_checkpoint")
    write_log(out / "pretrain_log.csv", pre.log)
    t2 = time.perf_counter()
    rt = router_phase(cfg, pre.state, dataset)
    t3 = time.perf_counter()
    rt.state.save(out / "checkpoint")
    write_log(out / "router_log.csv", rt.log)
    write_gate_dump(out / "router_gates.csv", rt.gate_records)
    # the output location is left out so reruns elsewhere stay byte-identical
    (out / "run_config.txt").write_text(cfg.dump(exclude=("out",)))
    return {"pretrain_eval_initial": pre.initial_eval, "pretrain_eval_final": pre.final_eval,
            "state": rt.state, "base": pre.state, "pretrain": pre, "router": rt,
            "seconds": {"pretrain": t1 - t0, "router": t3 - t2}}


def save_samples(out: Path, res: SampleResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    tensorio.save(out / "sample_dense.vrta", res.dense)
    tensorio.save(out / "sample_hard.vrta", res.hard)
