"""robustgrid: composable vision-model structures under adversarial scrutiny.

A self-contained float64 research stack: a tape-based autodiff core, a grid of
transformer/MLP image-model structures assembled from interchangeable parts,
white/black-box attacks and adversarial training, frequency-sensitivity and
Lipschitz diagnostics, magnitude pruning, and a manifest-driven experiment
harness with deterministic CSV artifacts.
"""

from . import tensor
from .attacks import AttackSpec, EvalAttack, RobustReport, fgsm, pgd, robust_accuracy, square_lite
from .data import DataFormatError, LabeledImageSet, read_cifar10, synth_freq_dataset, write_cifar10
from .diagnostics import (
    HeatmapResult,
    attention_collapse_profile,
    fourier_basis,
    fourier_heatmap,
    local_lipschitz,
    rank1_residual,
    render_heatmap_ppm,
)
from .estimator import RobustStructureClassifier
from .harness import build_dataset, run_cell, run_grid, structure_cells
from .manifest import ManifestError, load_manifest, manifest_hash, validate_manifest
from .pruning import PruneMask, magnitude_prune, sparsity_sweep
from .structures import (
    PRESET_IDS,
    Model,
    StructureError,
    StructureSpec,
    accuracy,
    build_model,
    predict_logits,
    structure_from_preset,
    validate_structure,
)
from .tensor import ShapeError, Tape, Tensor
from .training import (
    NonFiniteLossError,
    TrainConfig,
    Trainer,
    TrainResult,
    fit,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "AttackSpec", "EvalAttack", "RobustReport", "fgsm", "pgd", "robust_accuracy",
    "square_lite", "DataFormatError", "LabeledImageSet", "read_cifar10",
    "synth_freq_dataset", "write_cifar10", "HeatmapResult",
    "attention_collapse_profile", "fourier_basis", "fourier_heatmap",
    "local_lipschitz", "rank1_residual", "render_heatmap_ppm",
    "RobustStructureClassifier", "build_dataset", "run_cell", "run_grid",
    "structure_cells", "ManifestError", "load_manifest", "manifest_hash",
    "validate_manifest", "PruneMask", "magnitude_prune", "sparsity_sweep",
    "PRESET_IDS", "Model", "StructureError", "StructureSpec", "accuracy",
    "build_model", "predict_logits", "structure_from_preset", "validate_structure",
    "ShapeError", "Tape", "Tensor", "NonFiniteLossError", "TrainConfig",
    "Trainer", "TrainResult", "fit", "load_checkpoint", "save_checkpoint",
    "tensor", "__version__",
]
