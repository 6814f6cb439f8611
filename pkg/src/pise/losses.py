"""Composite pixel + feature-space objective and gradient-norm diagnostics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import torch


@dataclass(frozen=True)
class LossWeights:
    mse: float = 1.0
    perc: float = 0.05

    def __post_init__(self):
        if self.mse < 0 or self.perc < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.mse == 0 and self.perc == 0:
            raise ValueError("at least one loss weight must be positive")


def composite_loss(x: torch.Tensor, x_hat: torch.Tensor, extractor=None,
                   weights: LossWeights = LossWeights()) -> torch.Tensor:
    """``mse * mean((x - x_hat)^2) + perc * sum_j mean|phi_j(x) - phi_j(x_hat)|``.

    Each tap's absolute difference is averaged over that tap's own elements
    before summing across taps. The feature pass is skipped when ``perc == 0``.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    loss = weights.mse * (x - x_hat).pow(2).mean()
    if weights.perc > 0:
        if extractor is None:
            raise ValueError("a feature extractor is required when perc > 0")
        loss = loss + weights.perc * perceptual_term(x, x_hat, extractor)
    return loss


def perceptual_term(x, x_hat, extractor) -> torch.Tensor:
    with torch.no_grad():
        target = extractor(x)
    return sum((a - b).abs().mean() for a, b in zip(target, extractor(x_hat)))


def parameter_grad_norm(params: Iterable[torch.Tensor]) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(sq)


def epoch_grad_norm(model: torch.nn.Module, batches, loss_fn: Callable) -> tuple[float, float]:
    """Mean over ``batches`` of ``||grad_theta loss||_2`` and of the loss itself.

    ``loss_fn(model, batch)`` must return a scalar; the noise realisation it
    uses is the caller's responsibility. Gradients left on the parameters are
    cleared afterwards so training is unaffected.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    norms, losses = [], []
    for batch in batches:
        for p in params:
            p.grad = None
        loss = loss_fn(model, batch)
        if loss.requires_grad:
            loss.backward()
        norms.append(parameter_grad_norm(params))
        losses.append(float(loss.detach()))
    for p in params:
        p.grad = None
    if not norms:
        raise ValueError("gradient norm needs at least one validation batch")
    return sum(norms) / len(norms), sum(losses) / len(losses)


@dataclass
class GradientTrace:
    values: list[float] = field(default_factory=list)
    normalization: str = "first_epoch"

    def __len__(self):
        return len(self.values)

    def append(self, g: float) -> None:
        if not (math.isfinite(g) and g >= 0):
            raise ValueError(f"gradient norm must be finite and nonnegative, got {g}")
        self.values.append(float(g))

    def normalized(self) -> list[float]:
        g0 = self.values[0] if self.values else 0.0
        return [v / g0 if g0 > 0 else float("nan") for v in self.values]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "G", "normalized_G"])
            for t, (g, n) in enumerate(zip(self.values, self.normalized()), start=1):
                w.writerow([t, repr(g), repr(n)])

    @classmethod
    def from_csv(cls, path) -> "GradientTrace":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        return cls([float(r["G"]) for r in rows])


def grad_index(trace, window: int = 5) -> float:
    """Mean of the last ``window`` gradient norms relative to the first one."""
    values = trace.values if isinstance(trace, GradientTrace) else list(trace)
    if window < 1:
        raise ValueError("window must be positive")
    if len(values) < max(window, 2):
        raise ValueError(f"trace of length {len(values)} is too short for window {window}")
    if values[0] == 0:
        raise ValueError("first-epoch gradient norm is zero; index undefined")
    return sum(values[-window:]) / window / values[0]
