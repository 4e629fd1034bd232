"""Merge recipes: one method plus its hyperparameters, validated before any file I/O."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .baselines import DareConfig, TiesConfig, average_merge, dare_preprocess, task_arithmetic_merge, ties_merge
from .checkpoint_io import Checkpoint, TensorSchema, validate_compatibility
from .errors import ConfigError
from .ops import GRANULARITIES
from .pcb import PcbConfig, pcb_merge_vectors
from .task_vector import TaskVector, assemble, compute_task_vector

METHODS = ("average", "task-arithmetic", "ties", "pcb")
PER_TASK_METHODS = ("task-arithmetic", "pcb")


@dataclass
class MergeRecipe:
    method: str = "pcb"
    pretrained: Optional[str] = None
    models: list = field(default_factory=list)
    lam: float = 1.0
    lambdas: Optional[list] = None
    ratio: float = 0.2
    trim_k: Optional[float] = None
    granularity: str = "per_tensor"
    enable_intra: bool = True
    enable_inter: bool = True
    enable_drop: bool = True
    enable_rescale: bool = True
    inter_norm: bool = True
    regulator_n: Optional[int] = None
    dare: Optional[float] = None
    seed: int = 0
    out: Optional[str] = None
    dump_scores: Optional[str] = None
    skip_missing: bool = False

    def validate(self, need_files: bool = True) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if need_files:
            if not self.models:
                raise ConfigError("at least one --models path is required")
            if self.method != "average" and not self.pretrained:
                raise ConfigError(f"method {self.method} requires --pretrained")
            if self.dare is not None and not self.pretrained:
                raise ConfigError("DARE preprocessing requires --pretrained")
        if not np.isfinite(self.lam):
            raise ConfigError("lambda must be finite")
        if not 0 < self.ratio <= 1:
            raise ConfigError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.trim_k is not None and not 0 < self.trim_k <= 1:
            raise ConfigError(f"trim keep fraction must be in (0, 1], got {self.trim_k}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}")
        if self.dare is not None and not 0 <= self.dare < 1:
            raise ConfigError(f"DARE drop rate must be in [0, 1), got {self.dare}")
        if self.lambdas is not None:
            if self.method not in PER_TASK_METHODS:
                raise ConfigError(f"per-task lambdas are not supported by method {self.method}")
            if need_files and len(self.lambdas) != len(self.models):
                raise ConfigError(f"{len(self.lambdas)} per-task lambdas for {len(self.models)} models")
        if self.regulator_n is not None and self.regulator_n < 1:
            raise ConfigError("regulator N must be >= 1")
        if self.method != "pcb" and not (
            self.enable_intra and self.enable_inter and self.enable_drop and self.enable_rescale
        ):
            raise ConfigError("ablation toggles only apply to --method pcb")

    def pcb_config(self, lambdas: Optional[Sequence[float]] = None) -> PcbConfig:
        return PcbConfig(
            lam=self.lam,
            per_task_lambdas=list(lambdas) if lambdas is not None else self.lambdas,
            mask_ratio=self.ratio,
            granularity=self.granularity,
            regulator_n=self.regulator_n,
            enable_intra=self.enable_intra,
            enable_inter=self.enable_inter,
            enable_drop=self.enable_drop,
            enable_rescale=self.enable_rescale,
            inter_norm=self.inter_norm,
            seed=self.seed,
        )

    def ties_config(self, lam: Optional[float] = None) -> TiesConfig:
        k = self.trim_k if self.trim_k is not None else self.ratio
        return TiesConfig(k, self.lam if lam is None else lam, self.granularity)

    def hyperparameters(self) -> dict:
        d = asdict(self)
        for key in ("pretrained", "models", "out", "dump_scores"):
            d.pop(key)
        return d


@dataclass
class Prepared:
    """Loaded inputs for a recipe, reusable across many merges (e.g. during search)."""

    pretrained: Optional[Checkpoint]
    finetuned: list
    schema: TensorSchema
    vectors: list


def prepare(recipe: MergeRecipe, pretrained: Optional[Checkpoint], finetuned: Sequence[Checkpoint]) -> Prepared:
    ckpts = ([pretrained] if pretrained is not None else []) + list(finetuned)
    schema = validate_compatibility(ckpts, skip_missing=recipe.skip_missing)
    vectors = []
    if pretrained is not None:
        for i, ft in enumerate(finetuned):
            tv = compute_task_vector(ft, pretrained, label=str(i), schema=schema)
            if recipe.dare:
                # one stream per task: otherwise every task drops the same coordinates
                tv = dare_preprocess(tv, DareConfig(recipe.dare, recipe.seed + i))
            vectors.append(tv)
    return Prepared(pretrained, list(finetuned), schema, vectors)


@dataclass
class MergeOutcome:
    checkpoint: Checkpoint
    kept_fraction: dict = field(default_factory=dict)


def run_prepared(
    recipe: MergeRecipe,
    prep: Prepared,
    lam: Optional[float] = None,
    lambdas: Optional[Sequence[float]] = None,
    dump: Optional[Callable[[dict], None]] = None,
) -> MergeOutcome:
    """Merge with ``recipe``; ``lam``/``lambdas`` override the recipe's coefficients."""
    lam = recipe.lam if lam is None else lam
    lambdas = recipe.lambdas if lambdas is None else list(lambdas)
    if recipe.method == "average":
        if recipe.dare:
            return MergeOutcome(task_arithmetic_merge(prep.pretrained, prep.vectors, 1.0 / len(prep.vectors)))
        return MergeOutcome(average_merge(prep.finetuned, skip_missing=recipe.skip_missing))
    if recipe.method == "task-arithmetic":
        if lambdas is None:
            return MergeOutcome(task_arithmetic_merge(prep.pretrained, prep.vectors, lam))
        return MergeOutcome(_weighted_sum(prep.pretrained, prep.vectors, lambdas, lam))
    if recipe.method == "ties":
        cfg = recipe.ties_config(lam)
        kept = {
            name: _ceil_fraction(prep.schema.entries[name].shape, cfg.trim_keep_fraction)
            for name in prep.schema.mergeable_names()
        }
        return MergeOutcome(ties_merge(prep.pretrained, prep.vectors, cfg), kept)
    cfg = recipe.pcb_config(lambdas)
    cfg.lam = lam
    res = pcb_merge_vectors(prep.pretrained, prep.vectors, cfg, dump=dump)
    return MergeOutcome(res.checkpoint, res.kept_fraction)


def _weighted_sum(pretrained: Checkpoint, tvs: Sequence[TaskVector], lambdas, lam: float) -> Checkpoint:
    if len(lambdas) != len(tvs):
        raise ConfigError(f"{len(lambdas)} per-task lambdas for {len(tvs)} task vectors")
    merged = {}
    for name in tvs[0].deltas:
        acc = np.zeros(tvs[0].deltas[name].shape, dtype=np.float64)
        for tv, w in zip(tvs, lambdas):
            acc += float(w) * tv.delta64(name, pretrained)
        merged[name] = acc
    return assemble(pretrained, merged, lam)


def _ceil_fraction(shape, k: float) -> float:
    size = int(np.prod(shape, dtype=np.int64))
    if size == 0:
        return 1.0
    return min(size, int(np.ceil(k * size - 1e-9))) / size

