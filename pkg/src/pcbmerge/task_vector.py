"""Task vectors: per-tensor float32 deltas between a fine-tuned model and its base."""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .checkpoint_io import Checkpoint, TensorSchema, from_f64, validate_compatibility
from .errors import SchemaMismatch, ShapeMismatch, ZeroVector

ZERO_TOL = 1e-12


@dataclass(frozen=True)
class TaskVector:
    """Float32 deltas for the mergeable tensors of ``schema``.

    When built by :func:`compute_task_vector` the vector remembers its two
    source checkpoints, so the final merge assembly can recompute the delta
    in float64 (see :meth:`delta64`) instead of widening the rounded
    float32 delta.
    """

    deltas: Mapping[str, np.ndarray]
    schema: TensorSchema
    label: str = ""
    source: Optional[tuple] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        expected = self.schema.mergeable_names()
        if list(self.deltas) != expected:
            if set(self.deltas) != set(expected):
                raise SchemaMismatch(
                    f"task vector {self.label!r} holds {sorted(self.deltas)} "
                    f"but the schema's mergeable tensors are {sorted(expected)}"
                )
            object.__setattr__(self, "deltas", {k: self.deltas[k] for k in expected})
        for name, d in self.deltas.items():
            if tuple(d.shape) != self.schema.entries[name].shape:
                raise ShapeMismatch(name, f"delta {list(d.shape)} vs schema {list(self.schema.entries[name].shape)}")

    def names(self) -> list:
        return list(self.deltas)

    def numel(self) -> int:
        return sum(int(d.size) for d in self.deltas.values())

    def flat(self) -> np.ndarray:
        if not self.deltas:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([d.reshape(-1) for d in self.deltas.values()])

    def replace(self, deltas: Mapping[str, np.ndarray], label: Optional[str] = None) -> "TaskVector":
        return TaskVector(dict(deltas), self.schema, self.label if label is None else label)

    def delta64(self, name: str, pretrained: Optional[Checkpoint] = None) -> np.ndarray:
        """Delta for ``name`` in float64.

        Exact difference of the source tensors when this vector still
        describes ``pretrained`` (or no base is given); otherwise the float32
        delta widened.
        """
        if self.source is not None and (pretrained is None or self.source[1] is pretrained):
            ft, pre = self.source
            return _widen(ft[name]) - _widen(pre[name])
        return self.deltas[name].astype(np.float64)


def same_schema(a: TaskVector, b: TaskVector) -> bool:
    if a.schema is b.schema:
        return True
    return list(a.deltas) == list(b.deltas) and all(
        a.deltas[k].shape == b.deltas[k].shape for k in a.deltas
    )


def check_schemas(tvs) -> None:
    for tv in tvs[1:]:
        if not same_schema(tvs[0], tv):
            raise SchemaMismatch(f"task vectors {tvs[0].label!r} and {tv.label!r} differ in schema")


def compute_task_vector(
    finetuned: Checkpoint,
    pretrained: Checkpoint,
    label: str = "",
    schema: Optional[TensorSchema] = None,
    skip_missing: bool = False,
) -> TaskVector:
    """Delta ``finetuned - pretrained`` for every floating-point tensor, in float32."""
    if schema is None:
        schema = validate_compatibility([pretrained, finetuned], skip_missing=skip_missing)
    deltas = {}
    for name in schema.mergeable_names():
        ft, pre = finetuned[name], pretrained[name]
        if ft.shape != pre.shape:
            raise ShapeMismatch(name, f"{list(ft.shape)} vs {list(pre.shape)}")
        if ft.dtype == "F64" or pre.dtype == "F64":
            delta = (_widen(ft) - _widen(pre)).astype(np.float32)
        else:
            delta = ft.to_f32() - pre.to_f32()
        deltas[name] = delta
    return TaskVector(deltas, schema, label, source=(finetuned, pretrained))


def _widen(t) -> np.ndarray:
    return np.asarray(t.to_numpy(), dtype=np.float64)


def assemble(pretrained: Checkpoint, merged: Mapping[str, np.ndarray], lam: float = 1.0) -> Checkpoint:
    """``pretrained + lam * merged`` in float64, rounded once to each tensor's dtype.

    Tensors absent from ``merged`` (non-mergeable ones included) are copied
    from ``pretrained``. ``lam == 0`` returns the pretrained values untouched.
    """
    out = {}
    for name, t in pretrained.tensors.items():
        if name not in merged or lam == 0:
            out[name] = t
            continue
        d = merged[name]
        if tuple(d.shape) != t.shape:
            raise ShapeMismatch(name, f"delta {list(d.shape)} vs pretrained {list(t.shape)}")
        theta = _widen(t)
        theta += float(lam) * np.asarray(d, dtype=np.float64)
        out[name] = from_f64(theta, t.dtype)
    return Checkpoint(out, metadata=pretrained.metadata)


def apply_delta(pretrained: Checkpoint, delta: TaskVector, lam: float = 1.0) -> Checkpoint:
    """``pretrained + lam * delta`` on mergeable tensors, written back in the pretrained dtype.

    Non-mergeable tensors, and tensors outside the delta's schema, are copied
    from ``pretrained`` unchanged.
    """
    if not np.isfinite(lam):
        raise ValueError(f"lambda must be finite, got {lam}")
    return assemble(pretrained, _LazyDeltas(delta, pretrained), lam)


class _LazyDeltas(Mapping):
    def __init__(self, tv: TaskVector, pretrained: Checkpoint):
        self.tv, self.pretrained = tv, pretrained

    def __getitem__(self, name):
        if name not in self.tv.deltas:
            raise KeyError(name)
        return self.tv.delta64(name, self.pretrained)

    def __iter__(self):
        return iter(self.tv.deltas)

    def __len__(self):
        return len(self.tv.deltas)


@dataclass
class TensorStats:
    l2_norm: float
    max_abs: float
    fraction_zero: float
    element_count: int


@dataclass
class VectorStats:
    per_tensor: dict = field(default_factory=dict)
    total: Optional[TensorStats] = None

    def to_dict(self) -> dict:
        return {
            "global": vars(self.total),
            "per_tensor": {k: vars(v) for k, v in self.per_tensor.items()},
        }


def _stats(x: np.ndarray) -> tuple:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return (
        float(np.dot(x, x)),
        float(np.max(np.abs(x))) if x.size else 0.0,
        int(np.count_nonzero(np.abs(x) < ZERO_TOL)),
        int(x.size),
    )


def vector_stats(tv: TaskVector) -> VectorStats:
    out = VectorStats()
    sq_total, max_total, zeros_total, n_total = 0.0, 0.0, 0, 0
    for name, d in tv.deltas.items():
        sq, mx, zeros, n = _stats(d)
        out.per_tensor[name] = TensorStats(math.sqrt(sq), mx, zeros / n if n else 0.0, n)
        sq_total += sq
        max_total = max(max_total, mx)
        zeros_total += zeros
        n_total += n
    out.total = TensorStats(
        math.sqrt(sq_total), max_total, zeros_total / n_total if n_total else 0.0, n_total
    )
    return out


def cosine_similarity(a: TaskVector, b: TaskVector) -> float:
    """Cosine of the angle between two task vectors, each flattened to one vector."""
    if not same_schema(a, b):
        raise SchemaMismatch(f"task vectors {a.label!r} and {b.label!r} differ in schema")
    dot = na = nb = 0.0
    for name in a.deltas:
        x = a.deltas[name].astype(np.float64).reshape(-1)
        y = b.deltas[name].astype(np.float64).reshape(-1)
        dot += float(np.dot(x, y))
        na += float(np.dot(x, x))
        nb += float(np.dot(y, y))
    if na == 0 or nb == 0:
        raise ZeroVector(f"cannot take the cosine of a zero task vector ({a.label!r}, {b.label!r})")
    return float(np.clip(dot / math.sqrt(na * nb), -1.0, 1.0))
