"""Two-step staged training: step 1 autoencodes unoccluded faces with the
attention module bypassed and frozen; step 2 trains the full model on
occluded samples with the mask loss."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch

from . import checkpoint as ckpt
from .dataset import DatasetError, DatasetSplit, SampleSource, SessionSource, iter_batches
from .imaging import ImageTensor
from .losses import (
    LossBreakdown,
    LossWeights,
    adv_loss_d,
    adv_loss_g,
    mask_loss,
    rec_loss,
    ssim_loss,
    total_loss,
    weighted_total,
)
from .network import GROUPS, NetworkConfig, ParameterStore, discriminator_forward, generator_forward, init_network

log = logging.getLogger(__name__)

PHASES = ("1a", "1b", "2")
PHASE_STEP = {"1a": 1, "1b": 1, "2": 2}
PHASE_SOURCE = {"1a": "generic-corpus", "1b": "user-unoccluded", "2": "user-occluded"}


class TrainingError(RuntimeError):
    pass


class FrozenGroupError(TrainingError):
    pass


class NumericError(TrainingError):
    pass


@dataclass(frozen=True)
class StageSpec:
    name: str
    step: int
    active_losses: frozenset
    epochs: int
    trainable_groups: frozenset
    forward_mode: str
    data_source: str

    def __post_init__(self):
        object.__setattr__(self, "active_losses", frozenset(self.active_losses))
        object.__setattr__(self, "trainable_groups", frozenset(self.trainable_groups))
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.step == 1:
            if self.forward_mode != "bypass" or "attention" in self.trainable_groups or "mask" in self.active_losses:
                raise ValueError(f"step-1 stage {self.name}: bypass mode, no attention, no mask loss")
        elif self.step == 2:
            if self.forward_mode != "attention" or "mask" not in self.active_losses:
                raise ValueError(f"step-2 stage {self.name}: attention mode with the mask loss")
        else:
            raise ValueError(f"step must be 1 or 2, got {self.step}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["active_losses"] = sorted(self.active_losses)
        d["trainable_groups"] = sorted(self.trainable_groups)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageSpec":
        return cls(**d)


def _stage(name, step, losses, epochs) -> StageSpec:
    groups = {"encoder", "decoder"} | ({"attention"} if step == 2 else set())
    if "adv" in losses:
        groups.add("discriminator")
    return StageSpec(
        name,
        step,
        frozenset(losses),
        epochs,
        frozenset(groups),
        "bypass" if step == 1 else "attention",
        "user-unoccluded" if step == 1 else "user-occluded",
    )


STAGE_TABLE = (
    ("s1-rec", 1, ("rec",), 300),
    ("s1-rec-adv", 1, ("rec", "adv"), 100),
    ("s1-rec-adv-ssim", 1, ("rec", "adv", "ssim"), 300),
    ("s2-rec-mask", 2, ("rec", "mask"), 300),
    ("s2-rec-mask-adv", 2, ("rec", "mask", "adv"), 100),
    ("s2-rec-mask-adv-ssim", 2, ("rec", "mask", "adv", "ssim"), 200),
)


def scale_epochs(epochs: int, scale: float) -> int:
    return max(1, round(epochs * scale)) if epochs else 0


def default_schedule(scale: float = 1.0) -> list[StageSpec]:
    """Six stages; losses are added one per stage within each step."""
    if scale <= 0:
        raise ValueError("epoch scale must be > 0")
    return [_stage(n, s, l, scale_epochs(e, scale)) for n, s, l, e in STAGE_TABLE]


@dataclass
class TrainConfig:
    schedule: list[StageSpec] = field(default_factory=default_schedule)
    batch_size: int = 50
    learning_rate: float = 2e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 = stage boundaries only
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.schedule:
            raise ValueError("schedule must be non-empty")
        steps = [s.step for s in self.schedule]
        if steps != sorted(steps):
            raise ValueError("step-1 stages must precede step-2 stages")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("batch_size", "learning_rate", "adam_beta1", "adam_beta2", "adam_eps", "seed", "checkpoint_every", "checkpoint_dir")}
        d["weights"] = asdict(self.weights)
        d["schedule"] = [s.to_dict() for s in self.schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        d["schedule"] = [StageSpec.from_dict(s) for s in d["schedule"]]
        return cls(**d)


@dataclass
class Cursor:
    phase: str = "1a"
    stage: int = 0
    epoch: int = 0
    batch: int = 0
    step: int = 0
    global_epoch: int = 0


@dataclass
class Moment:
    m: torch.Tensor
    v: torch.Tensor
    t: int = 0


@dataclass
class TrainState:
    params: ParameterStore
    config: TrainConfig
    moments: dict[str, Moment] = field(default_factory=dict)
    cursor: Cursor = field(default_factory=Cursor)
    history: list[dict] = field(default_factory=list)
    completed: list[str] = field(default_factory=list)
    boundaries: list[dict] = field(default_factory=list)
    optimizer_steps: int = 0

    @property
    def stage(self) -> StageSpec:
        return self.config.schedule[self.cursor.stage]


def new_state(net: NetworkConfig, config: TrainConfig | None = None) -> TrainState:
    config = config or TrainConfig()
    return TrainState(init_network(net, config.seed), config)


# ---------------------------------------------------------------- optimizer


def adam_update(p: torch.Tensor, g: torch.Tensor, mom: Moment, lr: float, b1: float, b2: float, eps: float) -> None:
    """One bias-corrected Adam step, in place on ``p`` and ``mom``."""
    mom.t += 1
    mom.m.mul_(b1).add_(g, alpha=1 - b1)
    mom.v.mul_(b2).addcmul_(g, g, value=1 - b2)
    m_hat = mom.m / (1 - b1**mom.t)
    v_hat = mom.v / (1 - b2**mom.t)
    p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


def _group_params(params: ParameterStore, groups) -> dict[str, torch.nn.Parameter]:
    out = {}
    for g in GROUPS:
        if g in groups:
            out.update(params.named_group_parameters(g))
    return out


@torch.no_grad()
def optimizer_step(state: TrainState, grads: dict[str, torch.Tensor], groups) -> TrainState:
    """Adam-update the parameters of ``groups``; ``grads`` must cover exactly them."""
    groups = set(groups)
    frozen = [g for g in groups if not state.params.trainable.get(g, False)]
    if frozen:
        raise FrozenGroupError(f"groups {sorted(frozen)} are frozen in the current stage")
    targets = _group_params(state.params, groups)
    if set(grads) != set(targets):
        missing, extra = set(targets) - set(grads), set(grads) - set(targets)
        raise TrainingError(f"gradients do not match parameters: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
    cfg = state.config
    for name, p in targets.items():
        g = grads[name]
        if g.shape != p.shape:
            raise TrainingError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        mom = state.moments.get(name)
        if mom is None:
            mom = state.moments[name] = Moment(torch.zeros_like(p), torch.zeros_like(p))
        adam_update(p, g.to(p.dtype), mom, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    state.optimizer_steps += 1
    return state


def _grads(loss: torch.Tensor, named: dict[str, torch.nn.Parameter]) -> dict[str, torch.Tensor]:
    names = list(named)
    gs = torch.autograd.grad(loss, [named[n] for n in names], allow_unused=True)
    return {n: (torch.zeros_like(named[n]) if g is None else g) for n, g in zip(names, gs)}


# ---------------------------------------------------------------- iterations


def _configure_stage(state: TrainState, stage: StageSpec) -> None:
    state.params.set_trainable(stage.trainable_groups)
    live = set(_group_params(state.params, stage.trainable_groups))
    for name in list(state.moments):
        if name not in live:
            del state.moments[name]


def train_iteration(state: TrainState, stage: StageSpec, batch) -> LossBreakdown:
    """One discriminator update (when adv is active) then one generator update."""
    params, cfg = state.params, state.config
    params.train()
    dtype = next(params.parameters()).dtype
    gt = batch.ground_truth.to(dtype)
    x_in = gt if stage.step == 1 else batch.occluded.to(dtype)
    mask = batch.mask.to(dtype)
    active = stage.active_losses

    x_rec, _ = generator_forward(params, x_in, stage.forward_mode, mask=mask)

    adv_d = None
    if "adv" in active:
        d_params = _group_params(params, {"discriminator"})
        loss_d = adv_loss_d(discriminator_forward(params, gt), discriminator_forward(params, x_rec.detach()))
        optimizer_step(state, _grads(loss_d, d_params), {"discriminator"})
        adv_d = float(loss_d.detach())

    parts = {"rec": rec_loss(x_rec, gt)}
    if "ssim" in active:
        parts["ssim"] = ssim_loss(x_rec, gt)
    if "mask" in active:
        parts["mask"] = mask_loss(x_rec, gt, mask)
    if "adv" in active:
        parts["adv"] = adv_loss_g(discriminator_forward(params, x_rec))
    total = weighted_total(parts, cfg.weights, active)
    if not torch.isfinite(total):
        raise NumericError(f"non-finite generator loss at step {state.cursor.step} ({stage.name})")

    g_groups = stage.trainable_groups - {"discriminator"}
    optimizer_step(state, _grads(total, _group_params(params, g_groups)), g_groups)
    return total_loss({k: float(v.detach()) for k, v in parts.items()}, cfg.weights, active, adv_d)


# ---------------------------------------------------------------- phases


def _as_source(data) -> SampleSource:
    if isinstance(data, SampleSource):
        return data
    if isinstance(data, DatasetSplit):
        return SessionSource(data.train_sessions)
    if isinstance(data, (list, tuple)) and data and isinstance(data[0], ImageTensor):
        return SampleSource.from_images(data)
    if isinstance(data, (list, tuple)):
        return SampleSource(data)
    raise TypeError(f"cannot train on {type(data).__name__}")


def _save_periodic(state: TrainState, tag: str) -> None:
    d = state.config.checkpoint_dir
    if d:
        save_checkpoint(state, Path(d) / "latest.ckpt")
        if tag:
            save_checkpoint(state, Path(d) / f"{tag}.ckpt")


def run_phase(state: TrainState, phase: str, data, max_steps: int | None = None) -> TrainState:
    """Run (or resume) every stage of ``phase`` over ``data``.

    ``max_steps`` bounds the generator steps taken by this call; the cursor
    then points at the next batch so a later call resumes exactly there.
    """
    source = _as_source(data)
    if len(source) == 0:
        raise DatasetError("empty training data")
    cfg = state.config
    stages = [i for i, s in enumerate(cfg.schedule) if s.step == PHASE_STEP[phase]]
    if not stages:
        raise TrainingError(f"schedule has no stages for phase {phase}")
    cur = state.cursor
    if cur.phase != phase or phase in state.completed:
        state.cursor = cur = replace(cur, phase=phase, stage=stages[0], epoch=0, batch=0)
        state.completed = [p for p in state.completed if p != phase]
    taken = 0
    while cur.stage in stages:
        if max_steps is not None and taken >= max_steps:
            return state
        stage = cfg.schedule[cur.stage]
        _configure_stage(state, stage)
        if cur.epoch == 0 and cur.batch == 0:
            state.boundaries.append(
                {"phase": phase, "stage": stage.name, "start_step": cur.step, "data_source": PHASE_SOURCE[phase]}
            )
            log.info("phase %s: stage %s (%d epochs)", phase, stage.name, stage.epochs)
        while cur.epoch < stage.epochs:
            batches = iter_batches(source, cfg.batch_size, cfg.seed, cur.global_epoch, start_batch=cur.batch)
            for batch in batches:
                if max_steps is not None and taken >= max_steps:
                    return state
                parts = train_iteration(state, stage, batch)
                state.history.append({"step": cur.step, "phase": phase, "stage": stage.name, "epoch": cur.global_epoch, **parts.to_dict()})
                cur.step += 1
                cur.batch += 1
                taken += 1
            cur.epoch += 1
            cur.batch = 0
            cur.global_epoch += 1
            if cfg.checkpoint_every and cur.epoch % cfg.checkpoint_every == 0 and cur.epoch < stage.epochs:
                _save_periodic(state, "")
        nxt = stages.index(cur.stage) + 1
        cur.stage = stages[nxt] if nxt < len(stages) else len(cfg.schedule)
        cur.epoch = cur.batch = 0
        _save_periodic(state, "")
    state.completed.append(phase)
    _save_periodic(state, f"step{phase}")
    return state


def pretrain_generic(state: TrainState, corpus, max_steps: int | None = None) -> TrainState:
    """Step 1 on a generic face corpus: plain autoencoding, attention untouched."""
    if state.completed and state.cursor.phase != "1a":
        raise TrainingError("generic pretraining must start at the beginning of the schedule")
    return run_phase(state, "1a", corpus, max_steps)


def finetune_user(state: TrainState, split, max_steps: int | None = None) -> TrainState:
    """Step 1 repeated on the user's unoccluded training frames."""
    if "2" in state.completed or state.cursor.phase == "2":
        raise TrainingError("step 2 already started; cannot return to step 1")
    if "1a" not in state.completed:
        log.warning("finetuning without generic pretraining")
    return run_phase(state, "1b", split, max_steps)


def train_occluded(state: TrainState, split, max_steps: int | None = None) -> TrainState:
    """Step 2: full model, occluded inputs, attention and mask loss active."""
    if not ({"1a", "1b"} & set(state.completed)):
        raise TrainingError("step-1 stages must complete before occluded training")
    return run_phase(state, "2", split, max_steps)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    tensors = {f"param.{k}": v for k, v in state.params.state_dict().items()}
    for name in sorted(state.moments):
        tensors[f"moment.m.{name}"] = state.moments[name].m
        tensors[f"moment.v.{name}"] = state.moments[name].v
    meta = {
        "network": state.params.config.to_dict(),
        "train": state.config.to_dict(),
        "cursor": asdict(state.cursor),
        "moment_steps": {k: state.moments[k].t for k in sorted(state.moments)},
        "trainable": state.params.trainable,
        "completed": state.completed,
        "boundaries": state.boundaries,
        "history": state.history,
        "optimizer_steps": state.optimizer_steps,
        "rng": {"kind": "stateless", "seed": state.config.seed, "permutation_key": [state.config.seed, state.cursor.global_epoch]},
    }
    ckpt.write_container(path, meta, tensors)


def load_checkpoint(path: str | Path, network: NetworkConfig | None = None) -> TrainState:
    """Restore a TrainState; ``network`` (if given) must match the stored shapes."""
    meta, tensors = ckpt.read_container(path)
    stored = NetworkConfig(**meta["network"])
    net = network or stored
    params = ParameterStore(net)
    expected = {f"param.{k}": v for k, v in params.state_dict().items()}
    loaded = {k: v for k, v in tensors.items() if k.startswith("param.")}
    ckpt.check_shapes(expected, loaded, str(path))
    params.load_state_dict({k[len("param."):]: v for k, v in loaded.items()})
    params.set_trainable([g for g, on in meta["trainable"].items() if on])
    named = dict(params.named_parameters())
    moments = {}
    for name, t in meta["moment_steps"].items():
        m, v = tensors[f"moment.m.{name}"], tensors[f"moment.v.{name}"]
        if name not in named or named[name].shape != m.shape:
            raise ckpt.ShapeMismatch(f"{path}: moment for {name} does not match the network")
        moments[name] = Moment(m, v, t)
    return TrainState(
        params,
        TrainConfig.from_dict(meta["train"]),
        moments,
        Cursor(**meta["cursor"]),
        meta["history"],
        meta["completed"],
        meta["boundaries"],
        meta["optimizer_steps"],
    )


def write_loss_csv(history: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LossBreakdown.CSV_COLUMNS)
        for row in history:
            w.writerow(LossBreakdown.from_dict({k: row[k] for k in ("rec", "adv_g", "adv_d", "ssim", "mask", "total", "active_set")}).csv_row(row["step"], row["stage"]))


def loss_trace(state: TrainState, key: str = "total") -> list[float]:
    return [row[key] for row in state.history]


def epoch_means(history: Sequence[dict], key: str = "rec") -> list[float]:
    """Mean of ``key`` per global epoch, in order."""
    sums: dict[int, list[float]] = {}
    for row in history:
        if row.get(key) is not None:
            sums.setdefault(row["epoch"], []).append(row[key])
    return [math.fsum(v) / len(v) for _, v in sorted(sums.items())]
