"""Training-free model merging with parameter competition balancing (PCB).

Checkpoints are read and written in the safetensors layout. Merging methods:
weight averaging, task arithmetic, TIES, DARE preprocessing, and PCB, plus a
CMA-ES search over per-task coefficients.
"""

from .baselines import (
    DareConfig,
    TiesConfig,
    average_merge,
    dare_preprocess,
    task_arithmetic_merge,
    ties_merge,
)
from .checkpoint_io import Checkpoint, Tensor, load_checkpoint, save_checkpoint, validate_compatibility
from .errors import (
    CheckpointFormatError,
    CheckpointIOError,
    ConfigError,
    FitnessFailure,
    MergeError,
    ValidationError,
)
from .evaluation import ExternalEvaluator, gen_synthetic_suite, score_synthetic
from .pcb import PcbConfig, pcb_merge, pcb_merge_vectors
from .search import SearchSpace, grid_search, search
from .task_vector import TaskVector, apply_delta, compute_task_vector, cosine_similarity

__version__ = "0.1.0"
