"""Losses, gradients, base pretraining and router-only optimisation."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import torch

from .errors import ConfigError, ContractError, DivergenceError, FreezeViolation, NumericError
from .grid import DTYPE
from .model import ModelState, flow_interpolate, model_forward
from .rng import Stream
from .router import gate_records

logger = logging.getLogger(__name__)

LOG_HEADER = ["step", "cfm", "distill", "reg", "total",
              "mean_alpha_full", "mean_alpha_sliding", "mean_alpha_coreset"]


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 100
    lr: float = 1e-2
    batch: int = 4
    lambda_distill: float = 20.0
    lambda_reg: float = 0.02

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.lr <= 0 or self.batch < 1:
            raise ConfigError("lr and batch must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    cfm: float
    distill: float
    reg: float
    lambda_distill: float
    lambda_reg: float

    @property
    def total(self) -> float:
        return self.cfm + self.lambda_distill * self.distill + self.lambda_reg * self.reg


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ContractError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def cfm_loss(v_pred, x0, x1):
    _same_shape(v_pred, x0, "cfm_loss")
    _same_shape(x0, x1, "cfm_loss")
    return torch.mean((v_pred - (x1 - x0)) ** 2)


def distill_loss(h_routed, h_dense):
    _same_shape(h_routed, h_dense, "distill_loss")
    return torch.mean((h_routed - h_dense) ** 2)


def reg_loss(gates) -> torch.Tensor:
    """Sum over blocks and heads of the squared full-branch gate, batch-averaged."""
    total = 0.0
    for g in gates:
        sq = g[..., 0] ** 2
        total = total + (sq.sum(-1).mean() if sq.ndim > 1 else sq.sum())
    return torch.as_tensor(total, dtype=DTYPE)


@dataclass
class Batch:
    x0: torch.Tensor
    x1: torch.Tensor
    t: torch.Tensor

    @property
    def x_t(self) -> torch.Tensor:
        return flow_interpolate(self.x0, self.x1, self.t).x_t


def draw_batch(dataset, size: int, stream: Stream) -> Batch:
    """One ``(t, x0)`` draw per sample, ``t ~ U[0, 1]``."""
    idx = stream.integers(0, len(dataset), size=size)
    x1 = torch.stack([dataset[int(i)] for i in idx])
    x0 = stream.normal(*x1.shape)
    t = stream.uniform(size)
    return Batch(x0, x1, t)


def total_loss(batch: Batch, state: ModelState, cfg: TrainConfig, params=None,
               dense_grad: bool = True):
    """Flow matching plus weighted distillation and gate penalty.

    Returns ``(LossBreakdown, differentiable total, soft-mode forward output)``.

    The dense reference features come from the same parameters; set
    ``dense_grad=False`` when they cannot depend on the tracked parameters.
    """
    x_t = batch.x_t
    with torch.set_grad_enabled(dense_grad and torch.is_grad_enabled()):
        dense = model_forward(state, x_t, batch.t, "dense", params=params)
    soft = model_forward(state, x_t, batch.t, "soft", params=params)
    cfm = cfm_loss(soft.velocity, batch.x0, batch.x1)
    dist = distill_loss(soft.features, dense.features)
    reg = reg_loss(soft.gates)
    total = cfm + cfg.lambda_distill * dist + cfg.lambda_reg * reg
    lb = LossBreakdown(float(cfm.detach()), float(dist.detach()), float(reg.detach()),
                       cfg.lambda_distill, cfg.lambda_reg)
    return lb, total, soft


def cfm_objective(batch: Batch, state: ModelState, params=None):
    out = model_forward(state, batch.x_t, batch.t, "dense", params=params)
    return cfm_loss(out.velocity, batch.x0, batch.x1)


def gradient(state: ModelState, batch: Batch, group: str = "all", target: str = "total",
             cfg: TrainConfig | None = None) -> dict[str, torch.Tensor]:
    """Exact gradients of ``target`` ('total' or 'cfm') w.r.t. a parameter group.

    Reverse-mode via torch autograd; the finite-difference tests are the oracle.
    """
    return value_and_grad(state, batch, group, target, cfg)[1]


def value_and_grad(state, batch, group="all", target="total", cfg=None):
    names = state.names(group)
    params = dict(state.params)
    for n in names:
        params[n] = state.params[n].detach().clone().requires_grad_(True)
    if target == "total":
        _, loss, _ = total_loss(batch, state, cfg or TrainConfig(), params,
                                dense_grad=group != "router")
    elif target == "cfm":
        loss = cfm_objective(batch, state, params)
    else:
        raise ContractError(f"unknown loss target {target!r}")
    wrt = [params[n] for n in names]
    grads = torch.autograd.grad(loss, wrt, allow_unused=True)
    out = {}
    for n, p, g in zip(names, wrt, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericError(f"gradient of {n}")
        out[n] = g
    return float(loss.detach()), out


def _log_row(step, lb: LossBreakdown, gates):
    a = torch.stack([g.detach() for g in gates]).reshape(-1, 3).mean(0).tolist()
    return [step, repr(lb.cfm), repr(lb.distill), repr(lb.reg), repr(lb.total),
            repr(a[0]), repr(a[1]), repr(a[2])]


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        w.writerows(rows)


@dataclass
class TrainResult:
    state: ModelState
    log: list            # rows matching LOG_HEADER
    gate_records: list   # GateRecord, the router module's dump format
    initial_eval: float | None = None
    final_eval: float | None = None


def eval_cfm(state: ModelState, batch: Batch) -> float:
    with torch.no_grad():
        return float(cfm_objective(batch, state))


def pretrain_base(state: ModelState, cfg: TrainConfig, dataset, stream: Stream,
                  eval_batch: Batch | None = None) -> TrainResult:
    """Plain gradient descent on the dense-mode flow-matching loss (router untouched)."""
    cfg.validate()
    state = state.clone()
    if any(float(w.abs().max()) != 0.0 for w in state.router_weights()):
        raise ContractError("pretraining expects a zero router")
    state.frozen = {"base": False, "router": True}
    router_sum = state.checksum("router")
    names = state.names("base")
    rows, initial, above = [], None, 0
    init_eval = eval_cfm(state, eval_batch) if eval_batch is not None else None
    for step in range(cfg.steps):
        batch = draw_batch(dataset, cfg.batch, stream.child("pretrain", str(step)))
        loss, grads = value_and_grad(state, batch, "base", "cfm")
        with torch.no_grad():
            for n in names:
                state.params[n].sub_(cfg.lr * grads[n])
        if initial is None:
            initial = loss
        above = above + 1 if loss > 10 * initial else 0
        if above >= 50:
            raise DivergenceError(f"pretraining diverged at step {step}: loss {loss:.3g}")
        rows.append([step, repr(loss), repr(0.0), repr(0.0), repr(loss),
                     repr(1 / 3), repr(1 / 3), repr(1 / 3)])
        if step % 100 == 0:
            logger.info("pretrain step %d cfm %.5f", step, loss)
    if state.checksum("router") != router_sum:
        raise FreezeViolation("router changed during base pretraining")
    final_eval = eval_cfm(state, eval_batch) if eval_batch is not None else None
    if init_eval is not None and cfg.steps and not final_eval < init_eval:
        logger.warning("pretraining did not reduce the held-out loss (%.4g -> %.4g)",
                       init_eval, final_eval)
    return TrainResult(state, rows, [], init_eval, final_eval)


def train_router(state: ModelState, cfg: TrainConfig, dataset, stream: Stream) -> TrainResult:
    """Optimise only the router on the combined objective; base weights stay bitwise fixed."""
    cfg.validate()
    state = state.clone()
    state.frozen = {"base": True, "router": False}
    base_sum = state.checksum("base")
    names = state.names("router")
    rows, records = [], []
    for step in range(cfg.steps):
        batch = draw_batch(dataset, cfg.batch, stream.child("router", str(step)))
        params = dict(state.params)
        for n in names:
            params[n] = state.params[n].clone().requires_grad_(True)
        lb, total, soft = total_loss(batch, state, cfg, params, dense_grad=False)
        grads = torch.autograd.grad(total, [params[n] for n in names])
        with torch.no_grad():
            for n, g in zip(names, grads):
                if not torch.isfinite(g).all():
                    raise NumericError(f"gradient of {n}")
                state.params[n].sub_(cfg.lr * g)
        if state.checksum("base") != base_sum:
            raise FreezeViolation(f"a frozen base parameter changed at router step {step}")
        rows.append(_log_row(step, lb, soft.gates))
        records += gate_records(step, [g.detach().mean(0) for g in soft.gates])
        if step % 10 == 0:
            logger.info("router step %d total %.5f (cfm %.5f distill %.3g reg %.4f)",
                        step, lb.total, lb.cfm, lb.distill, lb.reg)
    return TrainResult(state, rows, records)
