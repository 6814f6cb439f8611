"""Sensing operators, simulated single-pixel measurements and the adjoint proxy.

Images travel as float tensors of shape ``(B, H, W)``; measurements as
``(B, M)``. Randomness is always supplied by the caller through a
``torch.Generator`` so every function here is pure given its inputs.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PISE"
FORMAT_VERSION = 1
PATTERN_CODES = {"gaussian": 0, "binary": 1}
_HEADER = struct.Struct("<4sHIIIIBQ")


@dataclass(frozen=True)
class SensingOperator:
    """An ``M x N`` sensing matrix whose rows are illumination patterns."""

    entries: torch.Tensor  # (M, N) float32, row-major
    height: int
    width: int
    rate: float
    pattern_kind: str
    seed: int

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            MAGIC, FORMAT_VERSION, self.rows, self.cols, self.height, self.width,
            PATTERN_CODES[self.pattern_kind], self.seed,
        )
        body = self.entries.numpy().astype("<f4", copy=False).tobytes(order="C")
        return header + body

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


@dataclass(frozen=True)
class NoiseSpec:
    """What happens to clean measurements before they reach the reconstructor.

    ``sigma_rel`` scales AWGN by the RMS of the clean batch. ``photon_scale``
    is the expected photon count at the brightest clean measurement.
    ``quant_bits=0`` disables quantization; otherwise ``quant_range`` must
    hold the calibrated ``(lo, hi)`` interval.
    """

    kind: str = "none"
    sigma_rel: float = 0.0
    photon_scale: float = 1e4
    quant_bits: int = 0
    quant_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("none", "awgn", "poisson"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma_rel < 0 or not math.isfinite(self.sigma_rel):
            raise ValueError("sigma_rel must be a nonnegative finite number")
        if not self.photon_scale > 0:
            raise ValueError("photon_scale must be positive")
        if self.quant_bits < 0 or int(self.quant_bits) != self.quant_bits:
            raise ValueError("quant_bits must be 0 or a positive integer")
        if self.quant_bits:
            if self.quant_range is None:
                raise ValueError("quantization needs a calibrated quant_range")
            _check_range(*self.quant_range)


@dataclass
class MeasurementBatch:
    values: torch.Tensor  # (B, M)
    noise_tag: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


def num_measurements(rate: float, n_pixels: int) -> int:
    return max(1, math.floor(rate * n_pixels))


def make_operator(rate: float, height: int, width: int, pattern_kind: str = "gaussian",
                  seed: int = 0) -> SensingOperator:
    """Draw a seeded random sensing matrix.

    Gaussian entries are i.i.d. N(0, 1/M); binary entries are +-1/sqrt(M)
    with equal probability. The draw goes through numpy's PCG64 stream so the
    bytes are stable across torch versions.
    """
    if not (0 < rate <= 1) or not math.isfinite(rate):
        raise ValueError(f"sampling rate must lie in (0, 1], got {rate}")
    if height < 1 or width < 1:
        raise ValueError("image geometry must be at least 1x1")
    if pattern_kind not in PATTERN_CODES:
        raise ValueError(f"unknown pattern kind {pattern_kind!r}")
    if not 0 <= seed < 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    n = height * width
    m = num_measurements(rate, n)
    rng = np.random.Generator(np.random.PCG64(seed))
    scale = 1.0 / math.sqrt(m)
    if pattern_kind == "gaussian":
        a = rng.standard_normal((m, n)) * scale
    else:
        a = np.where(rng.integers(0, 2, size=(m, n)) == 1, scale, -scale)
    entries = torch.from_numpy(a.astype(np.float32))
    return SensingOperator(entries, height, width, float(rate), pattern_kind, int(seed))


def load_operator(path) -> SensingOperator:
    return operator_from_bytes(Path(path).read_bytes())


def operator_from_bytes(raw: bytes) -> SensingOperator:
    if len(raw) < _HEADER.size:
        raise ValueError("operator file is truncated")
    magic, version, m, n, h, w, code, seed = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported operator format version {version}")
    if h * w != n:
        raise ValueError(f"header geometry {h}x{w} disagrees with N={n}")
    kinds = {v: k for k, v in PATTERN_CODES.items()}
    if code not in kinds:
        raise ValueError(f"unknown pattern code {code}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * m * n:
        raise ValueError(f"expected {4 * m * n} payload bytes, found {len(body)}")
    entries = np.frombuffer(body, dtype="<f4").reshape(m, n).astype(np.float32)
    return SensingOperator(torch.from_numpy(entries), h, w, m / n, kinds[code], seed)


def _check_range(lo: float, hi: float) -> None:
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise ValueError(f"invalid quantization range [{lo}, {hi}]")


def forward(op: SensingOperator, images: torch.Tensor) -> torch.Tensor:
    """Noiseless ``A vec(x)`` for a ``(B, H, W)`` batch."""
    if images.dim() != 3 or tuple(images.shape[1:]) != (op.height, op.width):
        raise ValueError(
            f"image batch of shape {tuple(images.shape)} does not match operator "
            f"geometry {op.height}x{op.width}")
    a = op.entries.to(images.dtype)
    return images.reshape(images.shape[0], -1) @ a.T


def measure(op: SensingOperator, images: torch.Tensor, noise: NoiseSpec = NoiseSpec(),
            generator: torch.Generator | None = None) -> MeasurementBatch:
    """Simulate bucket-detector readings ``y = A x + noise`` (then quantize)."""
    clean = forward(op, images)
    tag = {"kind": noise.kind}
    y = clean
    if noise.kind == "awgn":
        rms = clean.pow(2).mean().sqrt() if clean.numel() else clean.new_zeros(())
        std = noise.sigma_rel * rms
        tag.update(sigma_rel=noise.sigma_rel, std=float(std))
        if noise.sigma_rel > 0:
            y = clean + std * torch.randn(clean.shape, generator=generator, dtype=clean.dtype)
    elif noise.kind == "poisson" and clean.numel():
        shift = clean.min()
        span = clean.max() - shift
        # a batch of identical readings carries no usable scale
        gain = noise.photon_scale / span if span > 0 else clean.new_tensor(noise.photon_scale)
        counts = torch.poisson(((clean - shift) * gain).double(), generator=generator)
        y = (counts / gain.double() + shift.double()).to(clean.dtype)
        tag.update(photon_scale=noise.photon_scale, shift=float(shift), gain=float(gain))
    if noise.quant_bits:
        lo, hi = noise.quant_range
        y = quantize(y, noise.quant_bits, lo, hi)
        tag.update(quant_bits=noise.quant_bits, quant_range=[lo, hi])
    return MeasurementBatch(y, tag)


def quantize(values, bits: int, range_lo: float, range_hi: float):
    """Uniform mid-rise quantizer with ``2**bits`` cells over the range.

    Values are clipped to ``[range_lo, range_hi]`` and replaced by the centre
    of their cell, so the error for in-range inputs is at most half a cell.
    Accepts a tensor or a :class:`MeasurementBatch`.
    """
    if isinstance(values, MeasurementBatch):
        q = quantize(values.values, bits, range_lo, range_hi)
        return MeasurementBatch(q, {**values.noise_tag, "quant_bits": bits,
                                    "quant_range": [range_lo, range_hi]})
    if bits < 1 or int(bits) != bits:
        raise ValueError("bits must be a positive integer")
    _check_range(range_lo, range_hi)
    levels = 2 ** int(bits)
    step = (range_hi - range_lo) / levels
    idx = torch.floor((values.clamp(range_lo, range_hi) - range_lo) / step).clamp(0, levels - 1)
    return range_lo + (idx + 0.5) * step


def calibrate_quant_range(op: SensingOperator, images: torch.Tensor,
                          n_std: float = 4.0) -> tuple[float, float]:
    """``[mean - 4 std, mean + 4 std]`` of clean measurements of ``images``."""
    y = forward(op, images.double() if images.dtype == torch.float64 else images).double()
    mu, s = float(y.mean()), float(y.std())
    if s == 0:
        s = max(abs(mu), 1.0)
    return mu - n_std * s, mu + n_std * s


def adjoint_proxy(op: SensingOperator, measurements) -> torch.Tensor:
    """Back-project measurements: ``reshape(A^T y)`` for each item."""
    y = measurements.values if isinstance(measurements, MeasurementBatch) else measurements
    if y.dim() != 2 or y.shape[1] != op.rows:
        raise ValueError(f"measurement length {tuple(y.shape)} does not match M={op.rows}")
    x = y @ op.entries.to(y.dtype)
    return x.reshape(y.shape[0], op.height, op.width)


def normalize_proxy(batch: torch.Tensor) -> torch.Tensor:
    """Min-max each image to [0, 1]; constant images become 0.5."""
    if not torch.isfinite(batch).all():
        raise ValueError("proxy contains non-finite values")
    flat = batch.reshape(batch.shape[0], -1)
    if flat.shape[0] == 0:
        return batch.clone()
    lo = flat.min(dim=1, keepdim=True).values
    hi = flat.max(dim=1, keepdim=True).values
    span = hi - lo
    out = torch.where(span > 0, (flat - lo) / torch.where(span > 0, span, 1), 0.5)
    return out.reshape(batch.shape)
