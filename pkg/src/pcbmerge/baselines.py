"""Reference merging methods: weight averaging, task arithmetic, TIES, DARE."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .checkpoint_io import Checkpoint, from_f64, validate_compatibility
from .errors import ConfigError
from .ops import GRANULARITIES, UnitLayout, top_k_mask
from .task_vector import TaskVector, assemble, check_schemas


@dataclass
class TiesConfig:
    trim_keep_fraction: float = 0.2
    lam: float = 1.0
    granularity: str = "per_tensor"

    def validate(self) -> None:
        if not 0 < self.trim_keep_fraction <= 1:
            raise ConfigError(f"TIES keep fraction must be in (0, 1], got {self.trim_keep_fraction}")
        if not np.isfinite(self.lam):
            raise ConfigError("lambda must be finite")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}")


@dataclass
class DareConfig:
    drop_rate: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not 0 <= self.drop_rate < 1:
            raise ConfigError(f"DARE drop rate must be in [0, 1), got {self.drop_rate}")


def average_merge(ckpts: Sequence[Checkpoint], skip_missing: bool = False) -> Checkpoint:
    """Element-wise mean of the checkpoints' floating-point tensors.

    Non-mergeable tensors come from the first checkpoint; output dtypes
    follow the first checkpoint as well.
    """
    if not ckpts:
        raise ConfigError("average_merge needs at least one checkpoint")
    schema = validate_compatibility(ckpts, skip_missing=skip_missing)
    first = ckpts[0]
    out = {}
    for name, entry in schema.entries.items():
        t = first[name]
        if not entry.mergeable or len(ckpts) == 1:
            out[name] = t
            continue
        acc = np.zeros(t.shape, dtype=np.float64)
        for ck in ckpts:
            acc += np.asarray(ck[name].to_numpy(), dtype=np.float64)
        acc /= len(ckpts)
        out[name] = from_f64(acc, t.dtype)
    return Checkpoint(out, metadata=first.metadata)


def task_arithmetic_merge(pretrained: Checkpoint, tvs: Sequence[TaskVector], lam: float = 1.0) -> Checkpoint:
    """pretrained + lam * sum of task vectors."""
    if not tvs:
        raise ConfigError("task arithmetic needs at least one task vector")
    check_schemas(tvs)
    merged = {}
    for name in tvs[0].deltas:
        acc = tvs[0].delta64(name, pretrained)
        for tv in tvs[1:]:
            acc += tv.delta64(name, pretrained)
        merged[name] = acc
    return assemble(pretrained, merged, lam)


def trim_mask(tau: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Mask of the top ceil(k * D) magnitudes of one unit (lower index wins ties)."""
    keep = int(np.ceil(keep_fraction * tau.size - 1e-9))
    return top_k_mask(np.abs(tau), keep)


def trim(tau: np.ndarray, keep_fraction: float) -> np.ndarray:
    return np.where(trim_mask(tau, keep_fraction), tau, tau.dtype.type(0))


def _ties_unit(taus: Sequence[np.ndarray], exact: Sequence[np.ndarray], keep_fraction: float) -> np.ndarray:
    kept = [trim_mask(t, keep_fraction) for t in taus]
    trimmed = [np.where(m, x, 0.0) for m, x in zip(kept, exact)]
    total = np.zeros(taus[0].size, dtype=np.float64)
    for x in trimmed:
        total += x
    elected = np.where(total >= 0, 1.0, -1.0)  # exact zero sums elect +
    num = np.zeros_like(total)
    count = np.zeros_like(total)
    for x in trimmed:
        agree = (x != 0) & (np.sign(x) == elected)
        num[agree] += x[agree]
        count[agree] += 1
    out = np.zeros_like(total)
    np.divide(num, count, out=out, where=count > 0)
    return out


def ties_merge(pretrained: Checkpoint, tvs: Sequence[TaskVector], cfg: Optional[TiesConfig] = None) -> Checkpoint:
    """Trim, elect sign, disjoint mean, then pretrained + lam * merged."""
    cfg = cfg or TiesConfig()
    cfg.validate()
    if not tvs:
        raise ConfigError("TIES needs at least one task vector")
    check_schemas(tvs)
    layout = UnitLayout(tvs[0].names(), {k: v.shape for k, v in tvs[0].deltas.items()}, cfg.granularity)
    merged = {}
    for group in layout.units():
        taus = [layout.gather(group, tv.deltas) for tv in tvs]
        exact = [layout.gather(group, {n: tv.delta64(n, pretrained) for n in group}) for tv in tvs]
        merged.update(layout.scatter(group, _ties_unit(taus, exact, cfg.trim_keep_fraction)))
    return assemble(pretrained, merged, cfg.lam)


# -- DARE ---------------------------------------------------------------------

def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


_MASK64 = (1 << 64) - 1


def _mix_int(x: int) -> int:
    """splitmix64 finalizer on a Python int (same output as ``_splitmix64``)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _name_key(seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{int(seed)}\x00{name}".encode(), digest_size=8).digest()
    return _mix_int(int.from_bytes(digest, "little"))


def keyed_uniform(seed: int, name: str, size: int) -> np.ndarray:
    """Uniform [0, 1) draws that depend only on (seed, name, flat index)."""
    # array arithmetic on uint64 wraps modulo 2**64 without warnings
    bits = _splitmix64(np.arange(size, dtype=np.uint64) + np.uint64(_name_key(seed, name)))
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def dare_preprocess(tv: TaskVector, cfg: DareConfig) -> TaskVector:
    """Drop each delta entry with probability p and scale survivors by 1 / (1 - p)."""
    cfg.validate()
    if cfg.drop_rate == 0:
        return tv
    scale = 1.0 / (1.0 - cfg.drop_rate)
    out = {}
    for name, d in tv.deltas.items():
        u = keyed_uniform(cfg.seed, name, d.size).reshape(d.shape)
        out[name] = np.where(u < cfg.drop_rate, 0.0, d.astype(np.float64) * scale).astype(np.float32)
    return tv.replace(out)
