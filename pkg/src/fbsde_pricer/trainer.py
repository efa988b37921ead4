"""Two-stage optimization: mixed pretraining, then per-bucket finetuning.

Pretraining runs on calls and puts together with the sentiment channel
disabled (gates held at zero and masked out). Finetuning runs once per
(moneyness, type) bucket: it re-seeds the gates with the bucket prior,
trains the matching value head, both sentiment paths and the generator
output head, and keeps the shared backbones frozen. The ITM gate stays
pinned at zero.

All randomness (batch sampling, path noise, dropout) derives from the
stage seed, so a (seed, config, data) triple fully determines the
parameter trajectory.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tape, backward
from .bsde import ContractBatch, LossBreakdown, LossWeights, recurse, training_loss
from .errors import ConfigError, DataError, NumericsError
from .market import align_sigma
from .memtune import tune_allocator
from .nets import BoundParams, ParamStore, enforce_aaf_floor, generator_apply, value_apply

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

GATE_INIT = {"ATM": 0.25, "ITM": 0.0, "OTM": 1.2}

_STAGE_CODES = {
    ("pretrain", "mixed", "both"): 0,
    ("finetune", "ATM", "call"): 1,
    ("finetune", "ATM", "put"): 2,
    ("finetune", "ITM", "call"): 3,
    ("finetune", "ITM", "put"): 4,
    ("finetune", "OTM", "call"): 5,
    ("finetune", "OTM", "put"): 6,
}


@dataclass
class TrainConfig:
    batch_size: int = 128
    n_steps: int = 32     # recursion grid
    n_paths: int = 16     # Monte Carlo paths per contract
    peak_lr: float = 1e-4
    min_lr: float = 1e-8
    steps: int = 3500
    warmup: int = 1400
    clip: float = 10.0
    weight_decay: float = 1e-5
    dropout: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.warmup >= self.steps and self.steps > 0:
            raise ConfigError("warmup must be < steps")
        if self.min_lr > self.peak_lr:
            raise ConfigError("min_lr must be <= peak_lr")


def pretrain_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(), **overrides)


def finetune_config(**overrides) -> TrainConfig:
    base = TrainConfig(peak_lr=1e-5, steps=5000, warmup=500, clip=20.0)
    return replace(base, **overrides)


@dataclass
class StageSpec:
    stage: str                  # pretrain | finetune
    moneyness: str = "mixed"    # ATM | ITM | OTM | mixed
    type_filter: str = "both"   # call | put | both
    gate_policy: str = "disabled"    # trainable | frozen-zero | disabled
    backbone_policy: str = "trainable"

    def __post_init__(self) -> None:
        if self.stage == "pretrain":
            if (self.moneyness, self.type_filter, self.gate_policy) != (
                    "mixed", "both", "disabled"):
                raise ConfigError("pretraining is mixed-bucket, both types, "
                                  "sentiment disabled")
        elif self.stage == "finetune":
            if self.moneyness not in ("ATM", "ITM", "OTM"):
                raise ConfigError("finetune needs a concrete moneyness bucket")
            if self.type_filter not in ("call", "put"):
                raise ConfigError("finetune trains one option type at a time")
            if self.moneyness == "ITM" and self.gate_policy != "frozen-zero":
                raise ConfigError("the ITM gate stays frozen at zero")
        else:
            raise ConfigError(f"unknown stage {self.stage!r}")

    @classmethod
    def pretrain(cls) -> "StageSpec":
        return cls(stage="pretrain")

    @classmethod
    def finetune(cls, moneyness: str, type_filter: str) -> "StageSpec":
        gate = "frozen-zero" if moneyness == "ITM" else "trainable"
        return cls(stage="finetune", moneyness=moneyness, type_filter=type_filter,
                   gate_policy=gate, backbone_policy="frozen")

    @property
    def code(self) -> int:
        return _STAGE_CODES[(self.stage, self.moneyness, self.type_filter)]

    @property
    def name(self) -> str:
        if self.stage == "pretrain":
            return "pretrain"
        return f"finetune-{self.moneyness}-{self.type_filter}"


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp to peak over the warmup, then cosine decay to min_lr."""
    if step < cfg.warmup:
        return cfg.peak_lr * step / cfg.warmup
    span = cfg.steps - cfg.warmup
    prog = (step - cfg.warmup) / span if span > 0 else 1.0
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * prog))


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> List[np.ndarray]:
    """Joint global-norm clipping across all gradient vectors."""
    total = math.sqrt(sum(float(np.dot(g, g)) for g in grads))
    if total <= max_norm or total == 0.0:
        return list(grads)
    scale = max_norm / total
    return [g * scale for g in grads]


class AdamW:
    """Decoupled weight decay with bias-corrected moments.

    Masked (frozen) entries are untouched: no parameter movement, no
    moment accumulation, no decay.
    """

    def __init__(self, params: Sequence[np.ndarray]):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             masks: Sequence[Optional[np.ndarray]], lr: float,
             weight_decay: float) -> None:
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NumericsError("non-finite gradient; update rejected")
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1**self.t
        bc2 = 1.0 - ADAM_BETA2**self.t
        for p, g, m, v, mask in zip(params, grads, self.m, self.v, masks):
            if mask is not None:
                g = np.where(mask, g, 0.0)
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            update = lr * ((m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS) + weight_decay * p)
            if mask is not None:
                update = np.where(mask, update, 0.0)
            p -= update


def adamw_step(params: np.ndarray, grads: np.ndarray, state: AdamW, lr: float,
               weight_decay: float, mask: Optional[np.ndarray] = None) -> None:
    """Single-vector convenience wrapper around AdamW.step."""
    state.step([params], [grads], [mask], lr, weight_decay)


@dataclass
class TraceRow:
    step: int
    stage: str
    loss_total: float
    loss_price: float
    loss_terminal: float
    loss_path: float
    lr: float


def write_trace(path, rows: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "stage", "loss_total", "loss_price",
                    "loss_terminal", "loss_path", "lr"])
        for r in rows:
            w.writerow([r.step, r.stage, repr(r.loss_total), repr(r.loss_price),
                        repr(r.loss_terminal), repr(r.loss_path), repr(r.lr)])


# -- stage execution -------------------------------------------------------


def _trainable_names(store: ParamStore, spec: StageSpec, head: Optional[str]) -> List[str]:
    names = []
    for name, _ in store.layout:
        shared = name.startswith(("backbone.", "aaf.", "exp."))
        is_head = name.startswith(("head.", "out."))
        if spec.stage == "pretrain":
            # sentiment channel (embedding + gate) is disabled, not updated
            trainable = shared or is_head
        elif is_head:
            trainable = head is None or name.startswith(head)
        elif shared:
            trainable = spec.backbone_policy == "trainable"
        elif name == "gate":
            trainable = spec.gate_policy == "trainable"
        else:  # sentiment embedding: trains with the gate, frozen with it
            trainable = spec.gate_policy != "frozen-zero"
        if trainable:
            names.append(name)
    return names


def _path_seed(base_seed: int, stage_code: int, step: int, slot: int) -> int:
    ss = np.random.SeedSequence((base_seed, stage_code, step, slot))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def assemble_batch(rows: Sequence, idx: np.ndarray, cfg: TrainConfig,
                   stage_code: int, step: int, r: float,
                   use_sentiment: bool) -> ContractBatch:
    """Build one training batch: align volatilities, simulate paths."""
    from .market import simulate_paths

    b = idx.size
    n, m = cfg.n_steps, cfg.n_paths
    x0 = np.empty(b)
    strike = np.empty(b)
    tau = np.empty(b)
    label = np.empty(b)
    is_call = np.empty(b, dtype=bool)
    sigma_steps = np.empty((b, n))
    e = np.zeros((b, 5))
    x = np.empty((b, m, n + 1))
    dw = np.empty((b, m, n))
    for slot, j in enumerate(idx):
        row = rows[j]
        c = row.contract
        x0[slot] = c.underlying
        strike[slot] = c.strike
        tau[slot] = c.tau_years
        label[slot] = c.label
        is_call[slot] = c.kind == "call"
        sigma_steps[slot] = align_sigma(row.traj, n)
        if use_sentiment:
            e[slot] = row.sentiment
        pb = simulate_paths(x0[slot], r, sigma_steps[slot], tau[slot] / n, m,
                            seed=_path_seed(cfg.seed, stage_code, step, slot))
        x[slot], dw[slot] = pb.X, pb.dW
    return ContractBatch(x0=x0, strike=strike, tau=tau, r=r, label=label,
                         is_call=is_call, sigma_steps=sigma_steps, e=e, X=x, dW=dw)


def filter_rows(rows: Sequence, spec: StageSpec) -> List:
    out = []
    for row in rows:
        if spec.moneyness != "mixed" and row.moneyness != spec.moneyness:
            continue
        if spec.type_filter != "both" and row.contract.kind != spec.type_filter:
            continue
        out.append(row)
    return out


def run_stage(spec: StageSpec, cfg: TrainConfig, rows: Sequence,
              value_store: ParamStore, gen_store: ParamStore,
              r: float = 0.0) -> List[TraceRow]:
    """Run one optimization stage in place on the two parameter stores.

    `rows` is the training dataset (contracts with volatility trajectories
    and sentiment vectors); it is filtered here according to the stage.
    Returns the per-step loss trace.
    """
    tune_allocator()
    pool = filter_rows(rows, spec)
    if not pool:
        raise DataError(f"no training rows left for stage {spec.name}")

    use_sentiment = spec.stage == "finetune" and spec.gate_policy != "frozen-zero"
    if spec.stage == "pretrain":
        value_store.set("gate", [0.0])
        gen_store.set("gate", [0.0])
    else:
        gate0 = GATE_INIT[spec.moneyness]
        value_store.set("gate", [gate0])
        gen_store.set("gate", [gate0])

    head = None if spec.stage == "pretrain" else f"head.{spec.type_filter}"
    vmask = value_store.mask_for(_trainable_names(value_store, spec, head))
    gmask = gen_store.mask_for(_trainable_names(gen_store, spec, "out"))

    ss = np.random.SeedSequence((cfg.seed, spec.code))
    batch_rng = np.random.Generator(np.random.PCG64(ss.spawn(1)[0]))
    dropout_rng = np.random.Generator(np.random.PCG64(ss.spawn(1)[0]))

    opt = AdamW([value_store.vector, gen_store.vector])
    trace: List[TraceRow] = []

    for step in range(cfg.steps):
        idx = batch_rng.integers(0, len(pool), size=cfg.batch_size)
        batch = assemble_batch(pool, idx, cfg, spec.code, step, r, use_sentiment)

        tape = Tape()
        bpv = BoundParams(tape, value_store)
        bpg = BoundParams(tape, gen_store)
        drop = dropout_rng if cfg.dropout > 0 else None

        def value_eval(t, inputs, want_dual):
            xs = {k: inputs[k] for k in ("t", "x", "k", "tau", "sigma", "r")}
            uc, up = value_apply(bpv, xs, inputs["e"], rng=drop, dropout=cfg.dropout)
            mask = t.constant(inputs["is_call"])
            u = up + (uc - up) * mask
            return u, (u.dot() if want_dual else None)

        def gen_eval(t, inputs):
            xs = {k: inputs[k] for k in ("t", "x", "y", "z", "k", "tau", "sigma", "r")}
            return generator_apply(bpg, xs, inputs["e"], rng=drop, dropout=cfg.dropout)

        state = recurse(tape, value_eval, gen_eval, batch)
        loss_tv, breakdown = training_loss(tape, state, batch, cfg.weights)
        grads = backward(tape, loss_tv.i)
        gv = bpv.grad_vector(grads)
        gg = bpg.grad_vector(grads)
        gv, gg = clip_gradients([gv, gg], cfg.clip)

        lr = lr_at(step + 1, cfg)
        opt.step([value_store.vector, gen_store.vector], [gv, gg],
                 [vmask, gmask], lr, cfg.weight_decay)
        enforce_aaf_floor(value_store)
        enforce_aaf_floor(gen_store)

        trace.append(TraceRow(step=step, stage=spec.name,
                              loss_total=breakdown.total,
                              loss_price=breakdown.price,
                              loss_terminal=breakdown.terminal,
                              loss_path=breakdown.path, lr=lr))
    return trace
