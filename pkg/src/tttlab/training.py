"""Outer-loop optimization: parameter groups, stage schedules, AdamW and toy training runs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BETAS = (0.9, 0.95)
ADAM_EPS = 1e-8
WEIGHT_DECAY = 1e-4
CLIP_NORM = 0.1
WARMUP_FRACTION = 0.02
EVAL_INTERVAL = 50

# model parameters carry a role prefix: "<role>.<name>"
ROLES = ("ttt", "rnn", "gates", "attn", "mlp", "norm", "embed", "head")
GROUP_ALIASES = {
    "ttt": ("ttt", "rnn", "gates"),  # the new global layer (TTT or a baseline RNN) and its gates
    "pretrained": ("attn", "mlp", "norm", "embed", "head"),
    "local_attn_qkvo": ("attn",),
}


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"training diverged at step {step}" + (f": {detail}" if detail else ""))


def is_decay_exempt(name: str) -> bool:
    """Biases and normalization parameters skip weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return "bias" in leaf or leaf.startswith(("b_", "ln_")) or "norm" in name


def resolve_roles(group: str) -> tuple:
    if group in GROUP_ALIASES:
        return GROUP_ALIASES[group]
    if group in ROLES:
        return (group,)
    raise KeyError(f"unknown parameter group {group!r}")


@dataclass
class ParamGroup:
    name: str
    params: list  # parameter names
    lr: float
    schedule: str = "constant"
    weight_decay_exempt: bool = False

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class Stage:
    name: str
    seq_len: int
    lrs: dict          # group name -> learning rate
    schedules: dict    # group name -> "cosine" | "constant"
    steps: int


@dataclass
class StageSchedule:
    stages: list

    def __post_init__(self):
        lens = [s.seq_len for s in self.stages]
        if any(b <= a for a, b in zip(lens, lens[1:])):
            raise ValueError(f"stage sequence lengths must strictly increase, got {lens}")

    @classmethod
    def from_dict(cls, cfg: dict) -> "StageSchedule":
        stages = []
        for i, s in enumerate(cfg["stages"]):
            lrs = {k: float(v) for k, v in s["trainable"].items()}
            sched = s.get("schedule", "constant")
            scheds = dict(sched) if isinstance(sched, dict) else {g: sched for g in lrs}
            for g in lrs:
                resolve_roles(g)
                scheds.setdefault(g, "constant")
            stages.append(Stage(s.get("video_len", f"stage {i + 1}"), int(s["context_length"]),
                                lrs, scheds, int(s["steps"])))
        return cls(stages)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "StageSchedule":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"stages": [{"video_len": s.name, "context_length": s.seq_len, "trainable": s.lrs,
                            "schedule": s.schedules, "steps": s.steps} for s in self.stages]}


FINETUNE_SCHEDULE = StageSchedule.from_dict({"stages": [
    {"video_len": "3 sec", "context_length": 18048, "trainable": {"ttt": 1e-4, "pretrained": 1e-5},
     "schedule": {"ttt": "cosine", "pretrained": "constant"}, "steps": 5000},
    {"video_len": "9 sec", "context_length": 51456, "trainable": {"ttt": 1e-5, "local_attn_qkvo": 1e-5},
     "schedule": "constant", "steps": 5000},
    {"video_len": "18 sec", "context_length": 99894, "trainable": {"ttt": 1e-5, "local_attn_qkvo": 1e-5},
     "schedule": "constant", "steps": 1000},
    {"video_len": "30 sec", "context_length": 168320, "trainable": {"ttt": 1e-5, "local_attn_qkvo": 1e-5},
     "schedule": "constant", "steps": 500},
    {"video_len": "63 sec", "context_length": 341550, "trainable": {"ttt": 1e-5, "local_attn_qkvo": 1e-5},
     "schedule": "constant", "steps": 250},
]})


def lr_at(group: ParamGroup, step: int, total_steps: int) -> float:
    """Linear warmup over the first 2% of steps, then the group's schedule."""
    warm = math.ceil(WARMUP_FRACTION * total_steps)
    if step < warm:
        return group.lr * step / warm
    if group.schedule == "constant":
        return group.lr
    progress = (step - warm) / max(1, total_steps - warm)
    return group.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def clip_grads(grads: dict, max_norm: float = CLIP_NORM) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if norm > max_norm:
        c = max_norm / norm
        grads = {k: g * c for k, g in grads.items()}
    return grads, norm


def optimizer_step(groups, params: dict, grads: dict, step_index: int, total_steps: int,
                   state: Optional[AdamWState] = None, weight_decay: float = WEIGHT_DECAY,
                   clip: Optional[float] = CLIP_NORM, betas=BETAS, eps: float = ADAM_EPS):
    """One AdamW step over ``groups``; parameters outside every group are returned untouched.

    ``params`` maps names to arrays (or Tensors), ``grads`` names to arrays.
    Returns ``(new_params, state)``.
    """
    state = state or AdamWState()
    active = [n for g in groups for n in g.params]
    raw = {}
    for n in active:
        g = np.asarray(grads[n].data if isinstance(grads[n], Tensor) else grads[n], dtype=np.float64)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {n!r}")
        raw[n] = g
    if clip is not None:
        raw, _ = clip_grads(raw, clip)
    b1, b2 = betas
    out = dict(params)
    for group in groups:
        lr = lr_at(group, step_index, total_steps)
        for n in group.params:
            p = np.asarray(params[n].data if isinstance(params[n], Tensor) else params[n], dtype=np.float64)
            g = raw[n]
            t = state.t.get(n, 0) + 1
            m = b1 * state.m.get(n, np.zeros_like(p)) + (1 - b1) * g
            v = b2 * state.v.get(n, np.zeros_like(p)) + (1 - b2) * g * g
            state.m[n], state.v[n], state.t[n] = m, v, t
            if not group.weight_decay_exempt:
                p = p * (1 - lr * weight_decay)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            out[n] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out, state


def make_groups(names, lrs: dict, schedules: dict) -> list[ParamGroup]:
    """Split the named parameters into groups by role and by decay exemption."""
    role_of = {n: n.split(".", 1)[0] for n in names}
    groups, claimed = [], set()
    for gname, lr in lrs.items():
        roles = resolve_roles(gname)
        members = [n for n in names if role_of[n] in roles and n not in claimed]
        claimed.update(members)
        for exempt in (False, True):
            sel = [n for n in members if is_decay_exempt(n) == exempt]
            if sel:
                groups.append(ParamGroup(gname + ("/no_decay" if exempt else ""), sel, lr,
                                         schedules.get(gname, "constant"), exempt))
    return groups


@dataclass
class Trainer:
    groups: list
    total_steps: int
    frozen: list
    state: AdamWState = field(default_factory=AdamWState)
    step_index: int = 0

    @property
    def trainable(self) -> list:
        return [n for g in self.groups for n in g.params]

    def step(self, params: dict, grads: dict) -> dict:
        new, self.state = optimizer_step(self.groups, params, grads, self.step_index, self.total_steps, self.state)
        self.step_index += 1
        return new


def apply_stage(schedule: StageSchedule, stage_index: int, names) -> Trainer:
    """Configure groups for one stage; roles not named in the stage are frozen."""
    if not 0 <= stage_index < len(schedule.stages):
        raise IndexError(f"stage {stage_index} does not exist")
    stage = schedule.stages[stage_index]
    names = list(names)
    groups = make_groups(names, stage.lrs, stage.schedules)
    active = {n for g in groups for n in g.params}
    return Trainer(groups, stage.steps, [n for n in names if n not in active])


def toy_schedule(seq_len: int, steps: int, lr_new: float = 3e-3, lr_old: float = 1e-3) -> StageSchedule:
    """Single-stage analog of the first fine-tuning stage, with toy-scale learning rates."""
    return StageSchedule([Stage("toy", seq_len, {"ttt": lr_new, "pretrained": lr_old},
                                {"ttt": "cosine", "pretrained": "constant"}, steps)])


@dataclass
class Report:
    """Metrics of one run: ``rows`` are (step, loss) and (step, accuracy) records."""

    config: dict
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.evals[-1]["accuracy"] if self.evals else float("nan")


def train_toy(model_variant: str, task, schedule: Optional[StageSchedule] = None, seed: int = 0,
              batch_size: int = 8, eval_interval: int = EVAL_INTERVAL, eval_size: int = 64,
              clip: Optional[float] = None, model_kwargs: Optional[dict] = None, log=None) -> Report:
    """Train a toy model on ``task`` through every stage of ``schedule``; deterministic per seed.

    ``clip`` overrides the global-norm clipping threshold (None keeps 0.1).
    """
    from .models import ToyModel

    rng = np.random.default_rng(seed)
    schedule = schedule or toy_schedule(task.T, 300)
    kw = dict(model_kwargs or {})
    if hasattr(task, "token_parts"):
        kw.setdefault("token_parts", task.token_parts())
    model = ToyModel(model_variant, vocab=task.vocab_size, T=task.T, segment_len=task.segment_len,
                     seed=seed, **kw)
    params = model.params
    eval_set = task.sample(np.random.default_rng(10_000 + seed), eval_size)
    report = Report({"variant": model_variant, "seed": seed, "task": task.describe(),
                     "batch_size": batch_size, "n_params": model.n_params()})
    step = 0
    for si in range(len(schedule.stages)):
        trainer = apply_stage(schedule, si, params.keys())
        names = trainer.trainable
        for _ in range(trainer.total_steps):
            batch = task.sample(rng, batch_size)
            leaves = {n: Tensor(v, requires_grad=n in names, name=n) for n, v in params.items()}
            try:
                loss = model.loss(leaves, batch)
                grads = ad.grad(loss, [leaves[n] for n in names])
            except FloatingPointError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            lval = loss.item()
            if not math.isfinite(lval):
                raise TrainingDiverged(step, "loss is not finite")
            new, trainer.state = optimizer_step(trainer.groups, params, dict(zip(names, (g.data for g in grads))),
                                                trainer.step_index, trainer.total_steps, trainer.state,
                                                clip=CLIP_NORM if clip is None else clip)
            trainer.step_index += 1
            params = new
            report.losses.append({"step": step, "loss": lval})
            step += 1
            if step % eval_interval == 0 or (si == len(schedule.stages) - 1 and trainer.step_index == trainer.total_steps):
                acc = model.accuracy(params, eval_set)
                report.evals.append({"step": step, "accuracy": acc})
                if log:
                    log(f"{model_variant} seed={seed} step={step} loss={lval:.4f} acc={acc:.3f}")
    model.params = params
    return report
