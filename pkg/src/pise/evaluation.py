"""Machine-centric metrics, run statistics, robustness sweeps and cost accounting."""
from __future__ import annotations

import platform
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .models import classify, count_parameters
from .sensing import NoiseSpec, measure

PSNR_CAP = 99.0


def psnr(x: torch.Tensor, x_hat: torch.Tensor, peak: float = 1.0,
         cap: float = PSNR_CAP) -> tuple[torch.Tensor, float]:
    """Per-image PSNR in dB and the batch mean; zero error maps to ``cap``."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    mse = (x.double() - x_hat.double()).pow(2).reshape(x.shape[0], -1).mean(dim=1)
    db = torch.where(mse > 0, 10 * torch.log10(peak ** 2 / mse), torch.full_like(mse, cap))
    db = db.clamp(max=cap)
    return db, float(db.mean()) if len(db) else float("nan")


def eval_accuracy(handle, reconstructions: torch.Tensor, labels: torch.Tensor) -> float:
    if len(reconstructions) != len(labels):
        raise ValueError(f"{len(reconstructions)} images but {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("accuracy of an empty batch is undefined")
    pred, _ = classify(handle, reconstructions.clamp(0, 1))
    return float((pred == labels).double().mean())


# ---------------------------------------------------------------------------
# run statistics

@dataclass
class MetricSummary:
    mean: float
    std: float
    n: int
    values: list[float]
    baseline_mean: float | None = None
    baseline_std: float | None = None
    std_ratio: float | None = None


def summarize(values) -> MetricSummary:
    values = [float(v) for v in values]
    if len(values) < 2:
        raise ValueError("need at least two runs for a sample standard deviation")
    return MetricSummary(statistics.fmean(values), statistics.stdev(values), len(values), values)


def std_ratio(baseline_std: float, method_std: float) -> float | None:
    """``baseline_std / method_std``; undefined (None) unless both are positive."""
    if baseline_std <= 0 or method_std <= 0:
        return None
    return baseline_std / method_std


@dataclass
class RunStatistics:
    metrics: dict[str, MetricSummary] = field(default_factory=dict)
    baseline: str = "baseline"

    def to_dict(self) -> dict:
        return {"baseline": self.baseline, "metrics": {k: asdict(v) for k, v in self.metrics.items()}}


def multi_run_stats(results: dict[str, list[float]], baseline: dict[str, list[float]],
                    baseline_name: str = "baseline") -> RunStatistics:
    """Mean +- sample std per metric, with the std-ratio against ``baseline``.

    Both arguments map metric name to per-run values (e.g. from
    :func:`pise.training.metric_table`).
    """
    stats = RunStatistics(baseline=baseline_name)
    for name, values in results.items():
        s = summarize(values)
        if name in baseline:
            b = summarize(baseline[name])
            s.baseline_mean, s.baseline_std = b.mean, b.std
            s.std_ratio = std_ratio(b.std, s.std)
        stats.metrics[name] = s
    return stats


# ---------------------------------------------------------------------------
# robustness

DEFAULT_SIGMAS = (0.0, 0.05, 0.10, 0.15, 0.20)


@dataclass
class RobustnessCurve:
    method: str
    sigmas: list[float]
    psnr: list[float]
    accuracy: dict[str, list[float]]

    @property
    def psnr_drop(self) -> float:
        """PSNR lost between the first (clean) and last grid point, in dB."""
        return self.psnr[0] - self.psnr[-1]

    def rows(self):
        for i, s in enumerate(self.sigmas):
            yield {"method": self.method, "sigma": s, "psnr": self.psnr[i],
                   **{f"acc_{k}": v[i] for k, v in self.accuracy.items()}}


def check_sigma_grid(sigmas) -> list[float]:
    sigmas = [float(s) for s in sigmas]
    if not sigmas:
        raise ValueError("sigma grid is empty")
    if sigmas[0] != 0 or any(b <= a for a, b in zip(sigmas, sigmas[1:])):
        raise ValueError("sigma grid must start at 0 and increase strictly")
    return sigmas


@torch.no_grad()
def reconstruct_measurements(model, op, y: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    model.eval()
    outs = [model.from_measurements(op, y[i:i + batch_size]) for i in range(0, len(y), batch_size)]
    return torch.cat(outs) if outs else torch.empty(0, op.height, op.width)


def robustness_sweep(model, op, images, labels, classifiers: dict, sigmas=DEFAULT_SIGMAS,
                     seed: int = 0, method: str = "method") -> RobustnessCurve:
    """Evaluate ``model`` on AWGN measurements of ``images`` at each ``sigma_rel``.

    The noise direction is drawn once from ``seed`` and scaled per sigma, so
    the curve is deterministic and sigma=0 is exactly the clean evaluation.
    """
    if model is None:
        raise ValueError("robustness sweep needs a trained model")
    sigmas = check_sigma_grid(sigmas)
    clean = measure(op, images).values
    gen = torch.Generator().manual_seed(seed)
    direction = torch.randn(clean.shape, generator=gen, dtype=clean.dtype)
    rms = clean.pow(2).mean().sqrt()
    curve = RobustnessCurve(method, sigmas, [], {k: [] for k in classifiers})
    for s in sigmas:
        y = clean + (s * rms) * direction if s > 0 else clean
        x_hat = reconstruct_measurements(model, op, y).clamp(0, 1)
        curve.psnr.append(psnr(images, x_hat)[1])
        for name, handle in classifiers.items():
            curve.accuracy[name].append(eval_accuracy(handle, x_hat, labels))
    return curve


def average_curves(curves: list[RobustnessCurve], method: str) -> RobustnessCurve:
    sigmas = curves[0].sigmas
    if any(c.sigmas != sigmas for c in curves):
        raise ValueError("curves use different sigma grids")
    mean = lambda rows: [statistics.fmean(col) for col in zip(*rows)]
    return RobustnessCurve(method, sigmas, mean([c.psnr for c in curves]),
                           {k: mean([c.accuracy[k] for c in curves]) for k in curves[0].accuracy})


# ---------------------------------------------------------------------------
# cost accounting

@dataclass
class CostReport:
    parameters: int
    macs: int
    flops: int
    throughput: float | None
    batch_size: int
    hardware: str
    flop_convention: str = "FLOPs = 2 x MACs"


def count_macs(module: nn.Module, example: torch.Tensor) -> int:
    """Multiply-accumulates for one forward pass of ``example`` (batch of 1).

    Counts convolution, transposed convolution and dense layers from the
    shapes seen during a traced forward; activations and pooling are free.
    """
    total = 0

    def hook(layer, inputs, output):
        nonlocal total
        if isinstance(layer, nn.Conv2d):
            k = layer.kernel_size[0] * layer.kernel_size[1] * layer.in_channels // layer.groups
            total += k * output[0].numel()
        elif isinstance(layer, nn.ConvTranspose2d):
            k = layer.kernel_size[0] * layer.kernel_size[1] * layer.out_channels // layer.groups
            total += k * inputs[0][0].numel()
        elif isinstance(layer, nn.Linear):
            total += layer.in_features * layer.out_features

    handles = [m.register_forward_hook(hook) for m in module.modules()
               if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear))]
    try:
        with torch.no_grad():
            module(example[:1])
    finally:
        for h in handles:
            h.remove()
    return total


def measure_throughput(fn, batch: torch.Tensor, warmup: int = 2, repeats: int = 5) -> float:
    with torch.no_grad():
        for _ in range(warmup):
            fn(batch)
        start = time.perf_counter()
        for _ in range(repeats):
            fn(batch)
        elapsed = time.perf_counter() - start
    return repeats * len(batch) / elapsed


def model_cost(module: nn.Module, example: torch.Tensor, batch_size: int = 64,
               timed: bool = True) -> CostReport:
    """Parameters, MACs and measured items/second for ``module`` on ``example``'s shape."""
    macs = count_macs(module, example)
    rate = None
    if timed:
        was = module.training
        module.eval()
        batch = example[:1].expand(batch_size, *example.shape[1:]).contiguous()
        rate = measure_throughput(module, batch)
        module.train(was)
    hw = f"{platform.machine()} cpu x{torch.get_num_threads()}"
    return CostReport(count_parameters(module), macs, 2 * macs, rate, batch_size, hw)


# ---------------------------------------------------------------------------
# image grids

def image_grid(columns: list[torch.Tensor], pad: int = 2) -> np.ndarray:
    """Tile equally sized ``(B, H, W)`` stacks as columns of an 8-bit mosaic."""
    n = len(columns[0])
    h, w = columns[0].shape[1:]
    out = np.full((n * (h + pad) + pad, len(columns) * (w + pad) + pad), 255, dtype=np.uint8)
    for c, col in enumerate(columns):
        arr = (col.detach().clamp(0, 1).cpu().numpy() * 255).round().astype(np.uint8)
        for r in range(n):
            y0, x0 = pad + r * (h + pad), pad + c * (w + pad)
            out[y0:y0 + h, x0:x0 + w] = arr[r]
    return out


def measurement_tiles(y: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Lay each measurement vector row-major into an ``H x W`` tile for display."""
    b, m = y.shape
    flat = torch.zeros(b, height * width)
    k = min(m, height * width)
    v = y[:, :k]
    lo, hi = v.min(dim=1, keepdim=True).values, v.max(dim=1, keepdim=True).values
    flat[:, :k] = (v - lo) / torch.where(hi > lo, hi - lo, torch.ones_like(hi))
    return flat.reshape(b, height, width)


def save_png(array: np.ndarray, path) -> None:
    from PIL import Image
    if array.dtype != np.uint8 or array.ndim != 2:
        raise ValueError("expected a 2-D uint8 array")
    Image.fromarray(array).save(path)


def is_monotone_nonincreasing(values, tol: float = 0.05) -> bool:
    return all(b <= a + tol for a, b in zip(values, values[1:]))
