"""Adam training loop over synthetic scenes, with line-oriented loss curves."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, add
from .backbone import ModelConfig, init_model_params
from .clustering import ClusteringConfig
from .losses import LossBreakdown, loss_forward
from .scenes import PointScene

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "AdamState",
    "train",
    "write_loss_curve",
    "read_loss_curve",
]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    steps: int = 200
    warmup_steps: int = 0  # only semantic + centroid losses while step < warmup
    seed: int = 0
    batch_scenes: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.warmup_steps > self.steps:
            raise ValueError("warmup_steps must be <= steps")
        if self.batch_scenes < 1:
            raise ValueError("batch_scenes must be >= 1")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        self.step = step
        super().__init__(f"non-finite loss {value} at step {step}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def step(self, params: dict[str, Tensor], cfg: TrainConfig) -> None:
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            m = self.m.setdefault(name, np.zeros(p.shape))
            v = self.v.setdefault(name, np.zeros(p.shape))
            m[...] = b1 * m + (1 - b1) * g
            v[...] = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.values = p.values - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def train(
    scenes: list[PointScene],
    model_cfg: ModelConfig,
    cluster_cfg: ClusteringConfig,
    cfg: TrainConfig,
    params: dict[str, Tensor] | None = None,
) -> tuple[dict[str, Tensor], list[LossBreakdown]]:
    """Deterministic per seed; returns trained params and per-step breakdowns.

    Aborts with TrainingDiverged on a non-finite loss.
    """
    if not scenes:
        raise ValueError("no training scenes")
    if params is None:
        params = init_model_params(model_cfg, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState()
    curve: list[LossBreakdown] = []
    for step in range(1, cfg.steps + 1):
        picks = rng.integers(0, len(scenes), size=cfg.batch_scenes)
        warmup = step <= cfg.warmup_steps
        breakdowns = []
        total: Tensor | None = None
        for idx in picks:
            bd, scene_total, _ = loss_forward(scenes[int(idx)], params, model_cfg, cluster_cfg, warmup=warmup)
            breakdowns.append(bd)
            total = scene_total if total is None else add(total, scene_total)
        assert total is not None
        total = total / float(len(picks))
        record = LossBreakdown(
            seg=float(np.mean([b.seg for b in breakdowns])),
            ctr=float(np.mean([b.ctr for b in breakdowns])),
            mask=float(np.mean([b.mask for b in breakdowns])),
            dice=float(np.mean([b.dice for b in breakdowns])),
        )
        if not np.isfinite(record.total):
            raise TrainingDiverged(step, record.total)
        curve.append(record)
        for p in params.values():
            p.zero_grad()
        total.backward()
        adam.step(params, cfg)
    return params, curve


def write_loss_curve(path: str | Path, curve: list[LossBreakdown]) -> None:
    lines = []
    for step, bd in enumerate(curve, start=1):
        lines.append(
            f"step={step} seg={bd.seg!r} ctr={bd.ctr!r} mask={bd.mask!r} dice={bd.dice!r} total={bd.total!r}"
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_loss_curve(path: str | Path) -> list[LossBreakdown]:
    curve = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        fields = dict(part.split("=", 1) for part in line.split())
        curve.append(LossBreakdown(
            seg=float(fields["seg"]), ctr=float(fields["ctr"]),
            mask=float(fields["mask"]), dice=float(fields["dice"]),
        ))
    return curve
