"""Optimizer, learning-rate schedule and the resumable training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .config import OptimizerConfig, RunConfig, ScheduleConfig
from .network import VoxelKP
from .nn import load_checkpoint, save_checkpoint
from .objectives import assign_targets, total_loss
from .scenes import augment, load_dataset

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "total", "heatmap", "reg", "vis", "iou", "skeleton", "lr")


class NanLossError(RuntimeError):
    def __init__(self, step: int, breakdown: dict):
        terms = ", ".join(f"{k}={v!r}" for k, v in breakdown.items())
        super().__init__(f"non-finite loss at step {step}: {terms}")
        self.step = step
        self.breakdown = breakdown


class OneCycle:
    """Cosine warmup from peak/div to peak, then cosine anneal to peak/final_div."""

    def __init__(self, peak: float, total_steps: int, cfg: ScheduleConfig = ScheduleConfig()):
        self.peak = peak
        self.total = total_steps
        self.initial = peak / cfg.div_factor
        self.final = peak / cfg.final_div_factor
        self.peak_step = int(round(cfg.warmup_frac * (total_steps - 1)))

    def __call__(self, step: int) -> float:
        if step <= self.peak_step:
            if self.peak_step == 0:
                return self.peak
            t = step / self.peak_step
            return self.peak - (self.peak - self.initial) * (1 + math.cos(math.pi * t)) / 2
        span = max(self.total - 1 - self.peak_step, 1)
        t = min((step - self.peak_step) / span, 1.0)
        return self.final + (self.peak - self.final) * (1 + math.cos(math.pi * t)) / 2


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, named_params, cfg: OptimizerConfig = OptimizerConfig()):
        self.params = dict(named_params)
        self.cfg = cfg
        self.m = {n: np.zeros_like(p.value) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in self.params.items()}
        self.t = 0

    def step(self, lr: float):
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for n, p in self.params.items():
            g = p.grad
            m, v = self.m[n], self.v[n]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            dt = p.value.dtype.type
            p.value *= dt(1 - lr * c.weight_decay)
            p.value -= dt(lr) * (m / bc1) / (np.sqrt(v / bc2) + dt(c.eps))

    def state_dict(self) -> dict:
        out = {f"adam_m/{n}": a for n, a in self.m.items()}
        out.update({f"adam_v/{n}": a for n, a in self.v.items()})
        return out

    def load_state_dict(self, state: dict, t: int):
        for n in self.params:
            self.m[n][...] = state[f"adam_m/{n}"]
            self.v[n][...] = state[f"adam_v/{n}"]
        self.t = t


def build_model(cfg: RunConfig) -> VoxelKP:
    return VoxelKP(cfg.network, seed=cfg.seed, dtype=np.dtype(cfg.dtype).type)


def cell_size(cfg: RunConfig) -> float:
    net = cfg.network
    return net.voxel_size[0] * net.stage_stride(min(net.bev.source_stages))


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def sample_batch(scenes: list, cfg: RunConfig, step: int) -> list:
    rng = step_rng(cfg.seed, step)
    n = len(scenes)
    if cfg.batch_size >= n:
        picks = np.arange(n)
    else:
        picks = np.sort(rng.choice(n, size=cfg.batch_size, replace=False))
    batch = [scenes[i] for i in picks]
    if cfg.augment_enabled:
        batch = [augment(s, cfg.augment, rng, bank=scenes) for s in batch]
    return batch


def loss_on_batch(model: VoxelKP, batch: list, cfg: RunConfig):
    """Forward + targets + loss inside the caller's tape; returns ``(loss, breakdown, targets)``."""
    h = model([s.points for s in batch])
    t = assign_targets([s.annotations for s in batch], h.indices, h.positions, cell_size(cfg), len(batch))
    loss, parts = total_loss(h, t, cfg.loss)
    return loss, parts, t


def save_training_state(path, model: VoxelKP, opt: AdamW, step: int):
    state = model.state_dict()
    state.update(opt.state_dict())
    state["meta/step"] = np.array([step], dtype=np.float32)
    save_checkpoint(path, state)


def load_training_state(path, model: VoxelKP, opt: AdamW | None = None) -> int:
    state = load_checkpoint(path)
    model.load_state_dict({k: v for k, v in state.items() if k.startswith(("param/", "buffer/"))})
    step = int(state["meta/step"][0]) if "meta/step" in state else 0
    if opt is not None and step:
        opt.load_state_dict(state, step)
    return step


@dataclass
class TrainResult:
    model: VoxelKP
    rows: list
    checkpoint: Path
    log_path: Path


def _fmt(x: float) -> str:
    return repr(float(x))


def train(cfg: RunConfig, scenes: list | None = None, resume: str | Path | None = None,
          out_dir: str | Path | None = None) -> TrainResult:
    """Run ``cfg.steps`` optimizer steps; resumes from ``resume`` if given.

    Writes ``train_log.csv`` and ``checkpoint.vkpw`` under ``out_dir``.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if scenes is None:
        scenes = load_dataset(cfg.data_dir)
    if not scenes:
        raise ValueError("no scenes")
    model = build_model(cfg)
    opt = AdamW(model.named_parameters(), cfg.optimizer)
    sched = OneCycle(cfg.optimizer.lr, cfg.steps, cfg.schedule)
    start = load_training_state(resume, model, opt) if resume else 0
    if start > cfg.steps:
        raise ValueError(f"checkpoint is at step {start}, beyond the configured {cfg.steps} steps")

    log_path = out / "train_log.csv"
    rows = []
    if start and log_path.exists():
        with open(log_path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["step"]) < start]
    ckpt = out / "checkpoint.vkpw"
    model.train()
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in LOG_COLUMNS])
        for step in range(start, cfg.steps):
            lr = sched(step)
            batch = sample_batch(scenes, cfg, step)
            model.zero_grad()
            with ag.Tape() as tape:
                loss, parts, _ = loss_on_batch(model, batch, cfg)
            if not all(np.isfinite(v) for v in parts.values()):
                save_training_state(out / "nan_dump.vkpw", model, opt, step)
                raise NanLossError(step, parts)
            tape.backward(loss)
            opt.step(lr)
            row = {"step": step, **{k: parts[k] for k in LOG_COLUMNS[1:-1]}, "lr": lr}
            rows.append(row)
            w.writerow([step] + [_fmt(row[c]) for c in LOG_COLUMNS[1:]])
            fh.flush()
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.steps:
                save_training_state(out / f"checkpoint_{step + 1:06d}.vkpw", model, opt, step + 1)
    save_training_state(ckpt, model, opt, cfg.steps)
    return TrainResult(model, rows, ckpt, log_path)


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]
