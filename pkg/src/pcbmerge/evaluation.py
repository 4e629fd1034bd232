"""Fitness sources: an external scoring command, and a synthetic quadratic benchmark."""

from __future__ import annotations

import math
import os
import re
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint_io import Checkpoint, Tensor, save_checkpoint
from .errors import (
    ConfigError,
    EvaluationTimeout,
    InfeasibleSupports,
    NonZeroExit,
    SchemaMismatch,
    UnparsableOutput,
)

PLACEHOLDER = "{checkpoint}"
SCRATCH_ENV = "PCBMERGE_SCRATCH"
SYNTHETIC_TENSOR = "weight"

_SCORE_LINE = re.compile(r"^\s*score\s*:\s*(\S+)\s*$", re.IGNORECASE)


@dataclass(frozen=True)
class ExternalEvaluator:
    command_template: str
    timeout_seconds: float = 3600
    working_dir: Optional[Path] = None

    def __post_init__(self):
        if self.command_template.count(PLACEHOLDER) != 1:
            raise ConfigError(f"evaluator command must contain {PLACEHOLDER} exactly once")


def parse_score(stdout: str) -> float:
    """Score from the last line that is either ``score: <float>`` or a bare float."""
    for line in reversed(stdout.splitlines()):
        if not line.strip():
            continue
        m = _SCORE_LINE.match(line)
        text = m.group(1) if m else line.strip()
        try:
            value = float(text)
        except ValueError:
            continue
        if math.isfinite(value):
            return value
    raise UnparsableOutput(f"no score line in evaluator output: {stdout[-200:]!r}")


def evaluate_external(ev: ExternalEvaluator, checkpoint_path) -> float:
    """Run the evaluator on one checkpoint file and return its score (higher is better)."""
    checkpoint_path = Path(checkpoint_path)
    if not checkpoint_path.exists():
        raise FileNotFoundError(checkpoint_path)
    argv = [
        tok.replace(PLACEHOLDER, str(checkpoint_path)) for tok in shlex.split(ev.command_template)
    ]
    try:
        proc = subprocess.run(
            argv,
            cwd=ev.working_dir,
            capture_output=True,
            text=True,
            timeout=ev.timeout_seconds,
        )
    except subprocess.TimeoutExpired:
        raise EvaluationTimeout(f"evaluator exceeded {ev.timeout_seconds}s on {checkpoint_path}") from None
    except OSError as exc:
        raise NonZeroExit(127, str(exc)) from None
    if proc.returncode != 0:
        raise NonZeroExit(proc.returncode, proc.stderr[-500:])
    return parse_score(proc.stdout)


def scratch_dir(override=None) -> Path:
    base = override or os.environ.get(SCRATCH_ENV) or tempfile.gettempdir()
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def external_fitness(ev: ExternalEvaluator, build, scratch=None, keep: bool = False):
    """Wrap ``build(params) -> Checkpoint`` into a fitness that scores via ``ev``.

    Every call writes to a fresh temporary file, so concurrent calls never
    share a path. Files are removed after a successful evaluation unless
    ``keep`` is set.
    """
    scratch = scratch_dir(scratch)

    def fitness(params) -> float:
        fd, name = tempfile.mkstemp(prefix="merged-", suffix=".safetensors", dir=scratch)
        os.close(fd)
        save_checkpoint(build(params), name)
        score = evaluate_external(ev, name)
        if not keep:
            os.unlink(name)
        return score

    return fitness


# -- synthetic suite ----------------------------------------------------------


@dataclass
class SyntheticSuite:
    pretrained: Checkpoint
    task_checkpoints: list
    task_optima: list
    supports: list
    dim: int
    sparsity: float
    overlap: float
    seed: int

    @property
    def n_tasks(self) -> int:
        return len(self.task_checkpoints)

    def task_vector(self, i: int) -> np.ndarray:
        """Float64 delta of task i's optimum from the pretrained point."""
        base = self.pretrained[SYNTHETIC_TENSOR].to_f32().astype(np.float64)
        return self.task_optima[i].astype(np.float64) - base


def support_size(dim: int, sparsity: float) -> int:
    return int(math.ceil(sparsity * dim - 1e-9))


def gen_synthetic_suite(
    n: int, dim: int, sparsity: float, overlap: float = 0.0, seed: int = 0
) -> SyntheticSuite:
    """Pretrained point plus n sparse task optima over one tensor of shape [dim].

    Each support has ceil(s * dim) coordinates. A shared core of
    round(overlap * size) coordinates belongs to every task; the rest of
    each support is private, so any two supports overlap by that fraction.
    """
    if n < 1:
        raise ConfigError("suite needs at least one task")
    if not 0 < sparsity <= 1:
        raise ConfigError(f"sparsity must be in (0, 1], got {sparsity}")
    if not 0 <= overlap <= 1:
        raise ConfigError(f"overlap must be in [0, 1], got {overlap}")
    size = support_size(dim, sparsity)
    shared = int(round(overlap * size))
    needed = shared + n * (size - shared)
    if needed > dim:
        raise InfeasibleSupports(
            f"{n} supports of {size} with {shared} shared coordinates need {needed} > {dim} positions"
        )

    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(dim).astype(np.float32)
    perm = rng.permutation(dim)
    core = perm[:shared]
    supports, optima, ckpts = [], [], []
    for i in range(n):
        start = shared + i * (size - shared)
        idx = np.sort(np.concatenate([core, perm[start:start + size - shared]]))
        values = (3.0 * rng.standard_normal(size)).astype(np.float32)
        values[values == 0] = np.float32(3.0)
        target = theta.copy()
        target[idx] = theta[idx] + values
        supports.append(idx)
        optima.append(target)
        ckpts.append(Checkpoint({SYNTHETIC_TENSOR: Tensor("F32", target)}))
    pretrained = Checkpoint({SYNTHETIC_TENSOR: Tensor("F32", theta)})
    return SyntheticSuite(pretrained, ckpts, optima, supports, dim, sparsity, overlap, seed)


def score_synthetic(suite: SyntheticSuite, merged: Checkpoint) -> tuple:
    """Per-task squared distance to each optimum on that task's support, and their mean."""
    if SYNTHETIC_TENSOR not in merged or merged[SYNTHETIC_TENSOR].shape != (suite.dim,):
        raise SchemaMismatch(f"merged checkpoint must hold {SYNTHETIC_TENSOR!r} of shape [{suite.dim}]")
    theta = np.asarray(merged[SYNTHETIC_TENSOR].to_numpy(), dtype=np.float64)
    losses = []
    for idx, target in zip(suite.supports, suite.task_optima):
        diff = theta[idx] - target[idx].astype(np.float64)
        losses.append(float(np.dot(diff, diff)))
    return losses, float(np.mean(losses))


def synthetic_fitness(suite: SyntheticSuite, build):
    """Fitness = minus the mean synthetic loss of ``build(params)``."""

    def fitness(params) -> float:
        return -score_synthetic(suite, build(params))[1]

    return fitness


def closed_form_average_loss(suite: SyntheticSuite) -> float:
    """Mean loss of plain weight averaging on a suite with disjoint supports."""
    n = suite.n_tasks
    losses = []
    for i, idx in enumerate(suite.supports):
        tau = suite.task_vector(i)[idx].astype(np.float64)
        losses.append((1 - 1 / n) ** 2 * float(np.dot(tau, tau)))
    return float(np.mean(losses))
