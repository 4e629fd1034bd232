"""Parameter Competition Balancing (PCB) merging.

Pipeline per granularity unit, for each task i:

    intra_i = softmax(N * norm(tau_i * tau_i))
    inter_i = sum_j softmax(norm(tau_i * tau_j))
    beta_i  = intra_i * inter_i
    keep the D - floor((1 - r) D) highest-scoring entries of beta_i

and then the masked scores weight a per-coordinate mean of the task
vectors: tau_m = sum_i(beta_i * lam_i * tau_i) / sum_i beta_i, with
tau_m = 0 where no task kept the coordinate. The merged model is
theta_pre + lam * tau_m.

``norm`` divides by the unit's largest magnitude. Each unit is processed
independently, so memory stays at a handful of unit-sized buffers on top
of the task vectors themselves.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint_io import Checkpoint, validate_compatibility
from .errors import ConfigError, LengthMismatch, SchemaMismatch
from .ops import GRANULARITIES, UnitLayout, entropy, keep_count, softmax_, top_k_mask
from .task_vector import TaskVector, assemble, check_schemas, compute_task_vector, same_schema

logger = logging.getLogger(__name__)

SCORE_KINDS = ("intra", "inter", "combined", "masked")

# Scores are computed in float64 and only stored as float32. In float32 the
# max-subtracted softmax argument x - max(x) loses any x below ~1e-7 of the
# peak, so small but nonzero deltas tie with exact zeros and the mask can
# drop them.
SCORE_DTYPE = np.float64


@dataclass
class PcbConfig:
    lam: float = 1.0
    per_task_lambdas: Optional[Sequence[float]] = None
    mask_ratio: float = 0.2
    granularity: str = "per_tensor"
    regulator_n: Optional[int] = None
    enable_intra: bool = True
    enable_inter: bool = True
    enable_drop: bool = True
    enable_rescale: bool = True
    # False reproduces the variant that skips norm() inside inter-balancing
    inter_norm: bool = True
    seed: int = 0

    def validate(self, n_tasks: Optional[int] = None) -> None:
        if not 0 < self.mask_ratio <= 1:
            raise ConfigError(f"mask ratio must be in (0, 1], got {self.mask_ratio}")
        if not np.isfinite(self.lam):
            raise ConfigError(f"lambda must be finite, got {self.lam}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}")
        if self.regulator_n is not None and self.regulator_n < 1:
            raise ConfigError("regulator N must be >= 1")
        if self.per_task_lambdas is not None:
            if not all(np.isfinite(x) for x in self.per_task_lambdas):
                raise ConfigError("per-task lambdas must be finite")
            if n_tasks is not None and len(self.per_task_lambdas) != n_tasks:
                raise ConfigError(
                    f"{len(self.per_task_lambdas)} per-task lambdas for {n_tasks} tasks"
                )

    def task_lambdas(self, n_tasks: int) -> list:
        if self.per_task_lambdas is None:
            return [1.0] * n_tasks
        return [float(x) for x in self.per_task_lambdas]


@dataclass
class BalanceMatrix:
    scores: dict
    kind: str

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}")


@dataclass
class Mask:
    bits: dict
    ratio: float


# -- unit kernels -------------------------------------------------------------


def intra_unit(tau: np.ndarray, n_tasks: float) -> np.ndarray:
    x = np.multiply(tau, tau, dtype=SCORE_DTYPE)
    peak = np.max(x) if x.size else 0
    if peak > 0:
        x /= peak
        x *= n_tasks
    else:
        x[...] = 0
    return softmax_(x)


def inter_summand_(out: np.ndarray, tau_i: np.ndarray, tau_j: np.ndarray, use_norm: bool = True) -> np.ndarray:
    np.multiply(tau_i, tau_j, out=out, dtype=out.dtype)
    if use_norm:
        # max |x| without allocating abs(out)
        peak = max(out.max(), -out.min()) if out.size else 0
        if peak > 0:
            out /= peak
        else:
            out[...] = 0
    return softmax_(out)


def inter_unit(tau_i: np.ndarray, taus: Sequence[np.ndarray], use_norm: bool = True) -> np.ndarray:
    acc = np.zeros(tau_i.shape, dtype=SCORE_DTYPE)
    buf = np.empty(tau_i.shape, dtype=SCORE_DTYPE)
    for tau_j in taus:
        acc += inter_summand_(buf, tau_i, tau_j, use_norm)
    return acc


@dataclass
class _UnitResult:
    merged: np.ndarray  # float64 tau_m for the unit
    kept: list
    stats: list


def pcb_unit(
    taus: Sequence[np.ndarray],
    lambdas: Sequence[float],
    cfg: PcbConfig,
    n_reg: float,
    exact: Optional[Callable[[int], np.ndarray]] = None,
    collect_stats: bool = False,
) -> _UnitResult:
    """Merge one granularity unit.

    Scores are computed in float64 from ``taus``. The weighted mean is
    accumulated in float64, from ``exact(i)`` when given (a float64 delta
    for task i) or from the widened float32 delta.
    """
    size = taus[0].size
    k = keep_count(size, cfg.mask_ratio) if cfg.enable_drop else size
    num = np.zeros(size, dtype=np.float64)
    den = np.zeros(size, dtype=np.float64)
    kept, stats = [], []
    for i, (tau_i, lam_i) in enumerate(zip(taus, lambdas)):
        beta = intra_unit(tau_i, n_reg) if cfg.enable_intra else None
        if cfg.enable_inter:
            inter = inter_unit(tau_i, taus, cfg.inter_norm)
            if beta is None:
                beta = inter
            else:
                beta *= inter
            del inter
        if beta is None:
            beta = np.ones(size, dtype=SCORE_DTYPE)
        mask = top_k_mask(beta, k) if k < size else None
        if collect_stats:
            stats.append(_score_stats(beta, k, size))
        kept.append(k / size if size else 1.0)

        delta = exact(i) if exact is not None else tau_i.astype(np.float64)
        if lam_i != 1:
            delta *= lam_i
        if cfg.enable_rescale:
            if mask is not None:
                beta[~mask] = 0
            delta *= beta
            num += delta
            den += beta
        else:
            # disjoint mean over kept, nonzero entries
            sel = tau_i != 0
            if mask is not None:
                sel &= mask
            num[sel] += delta[sel]
            den[sel] += 1
        del beta, mask, delta
    np.divide(num, den, out=num, where=den > 0)
    num[den == 0] = 0
    return _UnitResult(num, kept, stats)


def _score_stats(beta: np.ndarray, k: int, size: int) -> dict:
    total = float(np.sum(beta, dtype=np.float64))
    return {
        "min": float(beta.min()) if size else 0.0,
        "max": float(beta.max()) if size else 0.0,
        "entropy": entropy(beta / total) if total > 0 else 0.0,
        "kept_fraction": k / size if size else 1.0,
    }


# -- task-vector level operations ---------------------------------------------


def _layout(tv: TaskVector, granularity: str) -> UnitLayout:
    return UnitLayout(tv.names(), {k: v.shape for k, v in tv.deltas.items()}, granularity)


def _map_units(tv: TaskVector, granularity: str, fn: Callable) -> dict:
    layout = _layout(tv, granularity)
    out = {}
    for group in layout.units():
        flat = fn(group, layout).astype(np.float32)
        out.update(layout.scatter(group, flat))
    return out


def intra_balance(tv: TaskVector, n_tasks: float, granularity: str = "per_tensor") -> BalanceMatrix:
    """softmax(N * norm(tau * tau)) per granularity unit."""
    if n_tasks < 1:
        raise ConfigError("n_tasks must be >= 1")
    scores = _map_units(
        tv, granularity, lambda g, lay: intra_unit(lay.gather(g, tv.deltas), n_tasks)
    )
    return BalanceMatrix(scores, "intra")


def inter_balance(
    tv_i: TaskVector,
    all_tvs: Sequence[TaskVector],
    granularity: str = "per_tensor",
    use_norm: bool = True,
) -> BalanceMatrix:
    """sum over j of softmax(norm(tau_i * tau_j)); the sum includes j = i."""
    for tv in all_tvs:
        if not same_schema(tv_i, tv):
            raise SchemaMismatch(f"task vectors {tv_i.label!r} and {tv.label!r} differ in schema")

    def unit(group, lay):
        return inter_unit(
            lay.gather(group, tv_i.deltas), [lay.gather(group, tv.deltas) for tv in all_tvs], use_norm
        )

    return BalanceMatrix(_map_units(tv_i, granularity, unit), "inter")


def combine_scores(
    intra: Optional[BalanceMatrix],
    inter: Optional[BalanceMatrix],
    enable_intra: bool = True,
    enable_inter: bool = True,
) -> BalanceMatrix:
    """Element-wise product of intra and inter scores.

    A disabled side drops out of the product; with both disabled every
    score is one.
    """
    if enable_intra and enable_inter:
        if list(intra.scores) != list(inter.scores):
            raise SchemaMismatch("intra and inter score maps cover different tensors")
        scores = {}
        for k, a in intra.scores.items():
            b = inter.scores[k]
            if a.shape != b.shape:
                raise SchemaMismatch(f"score shapes differ for {k!r}")
            scores[k] = a * b
        return BalanceMatrix(scores, "combined")
    if enable_intra:
        return BalanceMatrix(dict(intra.scores), "combined")
    if enable_inter:
        return BalanceMatrix(dict(inter.scores), "combined")
    ref = (intra or inter).scores
    return BalanceMatrix({k: np.ones_like(v) for k, v in ref.items()}, "combined")


def build_mask(beta: BalanceMatrix, ratio: float, granularity: str = "per_tensor") -> Mask:
    """Keep the top D - floor((1 - r) D) scores per unit, lower index first on ties."""
    if not 0 < ratio <= 1:
        raise ConfigError(f"mask ratio must be in (0, 1], got {ratio}")
    layout = UnitLayout(list(beta.scores), {k: v.shape for k, v in beta.scores.items()}, granularity)
    bits = {}
    for group in layout.units():
        flat = layout.gather(group, beta.scores)
        bits.update(layout.scatter(group, top_k_mask(flat, keep_count(flat.size, ratio))))
    return Mask(bits, ratio)


def apply_mask(beta: BalanceMatrix, mask: Mask) -> BalanceMatrix:
    return BalanceMatrix({k: np.where(mask.bits[k], v, np.float32(0)) for k, v in beta.scores.items()}, "masked")


def fuse(
    tvs: Sequence[TaskVector],
    masked_betas: Sequence[BalanceMatrix],
    lambdas: Sequence[float],
) -> TaskVector:
    """sum_i(beta_i * lam_i * tau_i) / sum_i beta_i, zero where the denominator is zero."""
    if not (len(tvs) == len(masked_betas) == len(lambdas)) or not tvs:
        raise LengthMismatch(
            f"fuse needs equal, non-zero counts: {len(tvs)} vectors, "
            f"{len(masked_betas)} score maps, {len(lambdas)} lambdas"
        )
    check_schemas(tvs)
    out = {}
    for name in tvs[0].deltas:
        num = np.zeros(tvs[0].deltas[name].shape, dtype=np.float64)
        den = np.zeros_like(num)
        for tv, beta, lam in zip(tvs, masked_betas, lambdas):
            b = beta.scores[name].astype(np.float64)
            num += b * (tv.delta64(name) * lam)
            den += b
        merged = np.zeros_like(num)
        np.divide(num, den, out=merged, where=den > 0)
        out[name] = merged.astype(np.float32)
    return TaskVector(out, tvs[0].schema, "merged")


@dataclass
class PcbResult:
    checkpoint: Checkpoint
    merged_vector: TaskVector
    kept_fraction: dict = field(default_factory=dict)
    score_stats: list = field(default_factory=list)


def pcb_merge_vectors(
    pretrained: Checkpoint,
    tvs: Sequence[TaskVector],
    cfg: Optional[PcbConfig] = None,
    dump: Optional[Callable[[dict], None]] = None,
) -> PcbResult:
    """Run the full PCB pipeline on precomputed task vectors.

    ``dump``, when given, receives one dict of score statistics per
    (unit, task) pair.
    """
    cfg = cfg or PcbConfig()
    if not tvs:
        raise ConfigError("PCB merging needs at least one task vector")
    cfg.validate(len(tvs))
    check_schemas(tvs)
    n_reg = cfg.regulator_n if cfg.regulator_n is not None else len(tvs)
    lambdas = cfg.task_lambdas(len(tvs))

    layout = _layout(tvs[0], cfg.granularity)
    merged, kept = {}, {}
    stats = []
    for group in layout.units():
        taus = [layout.gather(group, tv.deltas) for tv in tvs]

        def exact(i, group=group):
            return layout.gather(group, {n: tvs[i].delta64(n, pretrained) for n in group})

        res = pcb_unit(taus, lambdas, cfg, n_reg, exact, collect_stats=dump is not None)
        merged.update(layout.scatter(group, res.merged))
        for name in group:
            kept[name] = float(np.mean(res.kept))
        for i, s in enumerate(res.stats):
            rec = {"unit": group[0] if len(group) == 1 else "<global>", "task": tvs[i].label or i, **s}
            stats.append(rec)
            dump(rec)
        del taus, res

    ckpt = assemble(pretrained, merged, cfg.lam)
    tau_m = TaskVector({k: v.astype(np.float32) for k, v in merged.items()}, tvs[0].schema, "merged")
    return PcbResult(ckpt, tau_m, kept, stats)


def pcb_merge(
    pretrained: Checkpoint,
    finetuned: Sequence[Checkpoint],
    cfg: Optional[PcbConfig] = None,
    skip_missing: bool = False,
) -> Checkpoint:
    """Merge fine-tuned checkpoints into ``pretrained`` with PCB."""
    if not finetuned:
        raise ConfigError("PCB merging needs at least one fine-tuned checkpoint")
    schema = validate_compatibility([pretrained, *finetuned], skip_missing=skip_missing)
    tvs = [
        compute_task_vector(ft, pretrained, label=str(i), schema=schema)
        for i, ft in enumerate(finetuned)
    ]
    return pcb_merge_vectors(pretrained, tvs, cfg).checkpoint


def jsonl_dump(fh) -> Callable[[dict], None]:
    def write(rec: dict) -> None:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")

    return write
