"""Seeded end-to-end training of reconstructors, ablation grids and rate sweeps."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import data as datasets
from .evaluation import eval_accuracy, image_grid, measurement_tiles, psnr, reconstruct_measurements, save_png
from .losses import GradientTrace, LossWeights, composite_loss, epoch_grad_norm, grad_index
from .models import (CLASSIFIER_ARCHS, ReconstructorSpec, build_extractor, build_reconstructor,
                     load_classifier, parameter_checksum, save_classifier, save_reconstructor,
                     train_classifier)
from .sensing import (NoiseSpec, adjoint_proxy, calibrate_quant_range, make_operator, measure,
                      normalize_proxy)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    dataset: str = "fashion-mnist"
    data_root: str = ""  # empty: PISE_CACHE or ~/.cache/pise
    n_train: int = 4000
    n_val: int = 512
    n_test: int = 1000
    data_seed: int = 0
    rate: float = 0.05
    pattern: str = "gaussian"
    operator_seed: int = 0
    init_mode: str = "adjoint"
    lambda_mse: float = 1.0
    lambda_perc: float = 0.05
    feature_extractor: str = "auto"
    depth: int = 3
    width: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 15
    param_seed: int = 0
    train_sigma_max: float = 0.1
    eval_noise: str = "poisson"
    eval_sigma: float = 0.0
    eval_photon_scale: float = 1e4
    eval_quant_bits: int = 8
    grad_window: int = 5
    classifier_dir: str = ""  # empty: <data_root>/classifiers/<dataset>
    classifier_epochs: int = 3
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 < self.rate <= 1:
            raise ConfigError(f"rate must lie in (0, 1], got {self.rate}")
        if self.epochs < self.grad_window + 1:
            raise ConfigError(f"epochs must be at least grad_window + 1 = {self.grad_window + 1}")
        if min(self.n_train, self.n_val, self.n_test, self.batch_size) < 1:
            raise ConfigError("split sizes and batch size must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {sorted(OPTIMIZERS)}")
        if self.eval_noise not in ("none", "awgn", "poisson"):
            raise ConfigError(f"unknown eval_noise {self.eval_noise!r}")
        if not 0 <= self.train_sigma_max:
            raise ConfigError("train_sigma_max must be nonnegative")
        try:
            self.loss_weights
            ReconstructorSpec(self.init_mode, self.depth, self.width, self.param_seed)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_mse, self.lambda_perc)

    @property
    def eval_noise_spec(self) -> dict:
        return {"kind": self.eval_noise, "sigma_rel": self.eval_sigma,
                "photon_scale": self.eval_photon_scale, "quant_bits": self.eval_quant_bits}

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


OPTIMIZERS = {"adam": torch.optim.Adam, "sgd": torch.optim.SGD}
_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from e
    return raw


def parse_config_text(text: str, overrides=(), require=()) -> TrainConfig:
    """Parse ``key=value`` lines (``#`` starts a comment) into a config.

    ``overrides`` are further ``key=value`` strings applied on top; keys in
    ``require`` must be present after overriding or the missing ones are
    reported together.
    """
    values = {}
    lines = [(f"line {i}", ln) for i, ln in enumerate(text.splitlines(), 1)]
    lines += [("--set", ov) for ov in overrides]
    for where, line in lines:
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{where}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    missing = [k for k in require if k not in values]
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(missing)}")
    return TrainConfig(**values)


def load_config(path, overrides=(), require=()) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), overrides, require)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n"
                   for k, v in asdict(cfg).items())


# ---------------------------------------------------------------------------
# data and frozen components

def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class Splits:
    train: torch.Tensor
    train_labels: torch.Tensor
    val: torch.Tensor
    test: torch.Tensor
    test_labels: torch.Tensor


def make_splits(ds, cfg: TrainConfig) -> Splits:
    """Fixed (data_seed) subsets: train/val drawn disjointly from the training pool."""
    need = cfg.n_train + cfg.n_val
    if need > len(ds.train_images) or cfg.n_test > len(ds.test_images):
        raise ConfigError(f"{cfg.dataset} has too few images for the requested splits")
    gen = torch.Generator().manual_seed(derive_seed(cfg.data_seed, 1))
    order = torch.randperm(len(ds.train_images), generator=gen)
    tr, va = order[:cfg.n_train], order[cfg.n_train:need]
    return Splits(ds.train_images[tr], ds.train_labels[tr], ds.train_images[va],
                  ds.test_images[:cfg.n_test], ds.test_labels[:cfg.n_test])


def classifier_dir(cfg: TrainConfig) -> Path:
    if cfg.classifier_dir:
        return Path(cfg.classifier_dir)
    return datasets.cache_root(cfg.data_root or None) / "classifiers" / cfg.dataset


def get_classifiers(cfg: TrainConfig, ds=None, seed: int = 0) -> dict:
    """Load frozen evaluation classifiers, training and caching any missing one."""
    root = classifier_dir(cfg)
    handles = {}
    for arch in CLASSIFIER_ARCHS:
        path = root / f"{arch}.pt"
        if path.exists():
            handles[arch] = load_classifier(path)
            continue
        if ds is None:
            ds = datasets.load(cfg.dataset, cfg.data_root or None)
        handle = train_classifier(ds, arch, seed=seed, epochs=cfg.classifier_epochs)
        save_classifier(handle, path)
        handles[arch] = handle
    return handles


# ---------------------------------------------------------------------------
# training

@dataclass
class RunResult:
    config: dict
    checkpoint: str
    grad_trace: list[float]
    grad_index: float
    val_loss: list[float]
    accuracy: dict[str, float]  # averaged over the last grad_window epochs
    accuracy_history: dict[str, list[float]]
    psnr: float
    psnr_history: list[float]
    final_accuracy: dict[str, float]
    final_psnr: float
    parameters: int
    feature_extractor: str | None
    frozen_checksums: dict[str, list[str]]
    wall_seconds: float
    measurements: int = 0
    quant_range: list[float] = field(default_factory=list)
    grad_init: float | None = None  # G before the first update; diagnostic only

    @property
    def final_val_loss(self) -> float:
        return self.val_loss[-1]

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def from_json(cls, path) -> "RunResult":
        return cls(**json.loads(Path(path).read_text()))


def _batches(n: int, size: int, order=None):
    idx = order if order is not None else torch.arange(n)
    return [idx[i:i + size] for i in range(0, n, size)]


def train_reconstructor(cfg: TrainConfig, dataset=None, classifiers=None,
                        write: bool = True) -> RunResult:
    """Train one reconstructor configuration and evaluate it on the test split.

    Training measurements carry AWGN with ``sigma_rel ~ U[0, train_sigma_max]``
    per batch. After every epoch the gradient norm of the run's own loss is
    taken over the validation batches (same noise realisation each epoch);
    during the last ``grad_window`` epochs the test split is evaluated under
    the evaluation noise model.
    """
    cfg.validate()
    start = time.perf_counter()
    ds = dataset if dataset is not None else datasets.load(cfg.dataset, cfg.data_root or None)
    classifiers = classifiers if classifiers is not None else get_classifiers(cfg, ds)
    splits = make_splits(ds, cfg)
    h, w = ds.shape
    op = make_operator(cfg.rate, h, w, cfg.pattern, cfg.operator_seed)
    lo, hi = calibrate_quant_range(op, splits.train)
    weights = cfg.loss_weights

    spec = ReconstructorSpec(cfg.init_mode, cfg.depth, cfg.width, cfg.param_seed)
    model = build_reconstructor(spec, op.rows, h, w)
    extractor = None
    if weights.perc > 0:
        extractor = build_extractor(cfg.feature_extractor, classifiers.get("plaincnn"))
    frozen = {k: c.module for k, c in classifiers.items()}
    if extractor is not None:
        frozen["extractor"] = extractor
    checksums = {k: [parameter_checksum(m)] for k, m in frozen.items()}

    opt_cls = OPTIMIZERS[cfg.optimizer]
    opt = opt_cls(model.parameters(), lr=cfg.lr)
    shuffle_gen = torch.Generator().manual_seed(derive_seed(cfg.param_seed, 2))
    noise_gen = torch.Generator().manual_seed(derive_seed(cfg.param_seed, 3))

    val_gen = torch.Generator().manual_seed(derive_seed(cfg.data_seed, 4))
    val_batches = []
    for idx in _batches(len(splits.val), cfg.batch_size):
        sigma = float(torch.rand((), generator=val_gen)) * cfg.train_sigma_max
        y = measure(op, splits.val[idx], NoiseSpec("awgn", sigma), val_gen).values
        val_batches.append((splits.val[idx], y))

    eval_spec = NoiseSpec(cfg.eval_noise, cfg.eval_sigma, cfg.eval_photon_scale,
                          cfg.eval_quant_bits, (lo, hi) if cfg.eval_quant_bits else None)
    test_gen = torch.Generator().manual_seed(derive_seed(cfg.data_seed, 5))
    y_test = measure(op, splits.test, eval_spec, test_gen).values

    def loss_fn(net, batch):
        x, y = batch
        return composite_loss(x, net.from_measurements(op, y), extractor, weights)

    grad_init, _ = epoch_grad_norm(model, val_batches, loss_fn)
    trace, val_losses = GradientTrace(), []
    acc_hist = {k: [] for k in classifiers}
    psnr_hist = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.randperm(len(splits.train), generator=shuffle_gen)
        running = 0.0
        for idx in _batches(len(splits.train), cfg.batch_size, order):
            x = splits.train[idx]
            sigma = float(torch.rand((), generator=noise_gen)) * cfg.train_sigma_max
            y = measure(op, x, NoiseSpec("awgn", sigma), noise_gen).values
            opt.zero_grad()
            loss = loss_fn(model, (x, y))
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
        g, vl = epoch_grad_norm(model, val_batches, loss_fn)
        trace.append(g)
        val_losses.append(vl)
        line = f"epoch {epoch:3d} train {running / len(splits.train):.5f} val {vl:.5f} G {g:.4g}"
        if epoch > cfg.epochs - cfg.grad_window:
            x_hat = reconstruct_measurements(model, op, y_test).clamp(0, 1)
            psnr_hist.append(psnr(splits.test, x_hat)[1])
            for k, c in classifiers.items():
                acc_hist[k].append(eval_accuracy(c, x_hat, splits.test_labels))
            line += f" psnr {psnr_hist[-1]:.2f} " + " ".join(
                f"acc_{k} {v[-1]:.4f}" for k, v in acc_hist.items())
        log.info(line)

    for k, m in frozen.items():
        checksums[k].append(parameter_checksum(m))
    out = Path(cfg.output_dir)
    ckpt = out / "reconstructor.pt"
    result = RunResult(
        config=asdict(cfg), checkpoint=str(ckpt), grad_trace=trace.values,
        grad_index=grad_index(trace, cfg.grad_window), val_loss=val_losses,
        accuracy={k: statistics.fmean(v) for k, v in acc_hist.items()},
        accuracy_history=acc_hist, psnr=statistics.fmean(psnr_hist), psnr_history=psnr_hist,
        final_accuracy={k: v[-1] for k, v in acc_hist.items()}, final_psnr=psnr_hist[-1],
        parameters=model.metadata()["parameters"],
        feature_extractor=extractor.kind if extractor is not None else None,
        frozen_checksums=checksums, wall_seconds=time.perf_counter() - start,
        measurements=op.rows, quant_range=[lo, hi], grad_init=grad_init,
    )
    if write:
        write_run(result, model, op, splits, y_test, trace)
    result._model = model  # handy for in-process callers; not serialized
    return result


def write_run(result: RunResult, model, op, splits: Splits, y_test, trace: GradientTrace) -> None:
    out = Path(result.config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    save_reconstructor(model, out / "reconstructor.pt",
                       {"operator": {"rate": op.rate, "pattern": op.pattern_kind, "seed": op.seed}})
    trace.to_csv(out / "grad.csv")
    with open(out / "metrics.csv", "w", newline="") as f:
        wr = csv.writer(f)
        archs = sorted(result.accuracy_history)
        wr.writerow(["epoch", "G", "val_loss", "psnr"] + [f"acc_{a}" for a in archs])
        T, k = len(result.val_loss), len(result.psnr_history)
        for t in range(T):
            j = t - (T - k)
            row = [t + 1, repr(result.grad_trace[t]), repr(result.val_loss[t])]
            row.append(repr(result.psnr_history[j]) if j >= 0 else "")
            row += [repr(result.accuracy_history[a][j]) if j >= 0 else "" for a in archs]
            wr.writerow(row)
    n = min(8, len(splits.test))
    y = y_test[:n]
    x_hat = reconstruct_measurements(model, op, y).clamp(0, 1)
    proxy = normalize_proxy(adjoint_proxy(op, y))
    grid = image_grid([measurement_tiles(y, op.height, op.width), proxy, x_hat, splits.test[:n]])
    save_png(grid, out / "recon_grid.png")
    result.to_json(out / "run.json")


# ---------------------------------------------------------------------------
# ablation and sweeps

ARMS = {
    "A": {"init_mode": "learned_random", "lambda_mse": 1.0, "lambda_perc": 0.0},
    "B": {"init_mode": "adjoint", "lambda_mse": 1.0, "lambda_perc": 0.0},
    "C": {"init_mode": "learned_random", "lambda_mse": 1.0, "lambda_perc": 0.05},
    "D": {"init_mode": "adjoint", "lambda_mse": 1.0, "lambda_perc": 0.05},
}
ARM_LABELS = {"A": "Rand+MSE", "B": "Phys+MSE", "C": "Rand+Perc", "D": "Phys+Perc"}


def _run_job(cfg: TrainConfig) -> RunResult:
    out = Path(cfg.output_dir) / "run.json"
    if out.exists():
        cached = RunResult.from_json(out)
        if cached.config == asdict(cfg):
            return cached
    result = train_reconstructor(cfg)
    result.__dict__.pop("_model", None)
    return result


def run_jobs(cfgs: list[TrainConfig], parallel: int = 1) -> list[RunResult]:
    """Run configs (reusing any matching ``run.json``), optionally across processes."""
    if cfgs:
        get_classifiers(cfgs[0])  # train shared classifiers once, before fanning out
    if parallel > 1 and len(cfgs) > 1:
        with ProcessPoolExecutor(parallel) as pool:
            return list(pool.map(_run_job, cfgs))
    return [_run_job(c) for c in cfgs]


def metric_table(results: list[RunResult]) -> dict[str, list[float]]:
    table = {"grad_index": [r.grad_index for r in results], "psnr": [r.psnr for r in results]}
    for arch in results[0].accuracy:
        table[f"acc_{arch}"] = [r.accuracy[arch] for r in results]
    return table


def _mean_std(values):
    mean = statistics.fmean(values)
    return mean, statistics.stdev(values) if len(values) > 1 else 0.0


def run_ablation(base: TrainConfig, arms: dict | None = None, seeds=(0,),
                 parallel: int = 1) -> dict:
    """Train every arm at every seed; summarise each arm as mean +- sample std.

    Arms map a name to config overrides (``ARMS`` holds the four standard
    ones). Each seed sets ``param_seed``; the operator and data subsets stay
    fixed. Run directories are ``<output_dir>/<arm>/seed<k>``.
    """
    arms = ARMS if arms is None else arms
    if not arms or not seeds:
        raise ValueError("ablation needs at least one arm and one seed")
    jobs, keys = [], []
    for name in arms:
        for s in seeds:
            out = Path(base.output_dir) / name / f"seed{s}"
            jobs.append(base.replace(**arms[name], param_seed=s, output_dir=str(out)))
            keys.append((name, s))
    results = run_jobs(jobs, parallel)
    by_arm = {}
    for (name, s), r in zip(keys, results):
        by_arm.setdefault(name, {})[s] = r
    summary = {}
    for name, runs in by_arm.items():
        table = metric_table(list(runs.values()))
        summary[name] = {"label": ARM_LABELS.get(name, name), "overrides": arms[name],
                         "seeds": list(runs), **{
                             k: dict(zip(("mean", "std"), _mean_std(v)), values=v)
                             for k, v in table.items()}}
    return {"arms": summary, "runs": by_arm}


def write_ablation(table: dict, path) -> None:
    """One CSV row per (arm, seed) plus a JSON summary next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for arm, runs in table["runs"].items():
        for seed, r in runs.items():
            rows.append({"arm": arm, "label": ARM_LABELS.get(arm, arm), "seed": seed,
                         "init_mode": r.config["init_mode"], "lambda_perc": r.config["lambda_perc"],
                         "grad_index": r.grad_index, "psnr": r.psnr,
                         **{f"acc_{k}": v for k, v in r.accuracy.items()}})
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)
    path.with_suffix(".json").write_text(json.dumps(table["arms"], indent=2))


def sampling_sweep(base: TrainConfig, rates=(0.02, 0.05, 0.10, 0.20), parallel: int = 1) -> list[dict]:
    """One run per sampling rate with shared seeds; accuracy and PSNR per rate."""
    for r in rates:
        if not 0 < r <= 1:
            raise ConfigError(f"sampling rate {r} outside (0, 1]")
    cfgs = [base.replace(rate=r, output_dir=str(Path(base.output_dir) / f"rate{r:g}")) for r in rates]
    results = run_jobs(cfgs, parallel)
    return [{"rate": r, "measurements": res.measurements, "psnr": res.psnr,
             "grad_index": res.grad_index, **{f"acc_{k}": v for k, v in res.accuracy.items()}}
            for r, res in zip(rates, results)]
