"""Global unstructured magnitude pruning.

Only tensors registered with kind "weight" (linear and convolution kernels)
participate; biases, norm parameters, and positional embeddings stay dense.
The threshold is global across layers: exactly floor(fraction * total) of the
prunable weights are zeroed, smallest magnitudes first, ties resolved by
parameter order then flat index (stable sort). Pruned copies are returned;
the input model is never touched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import EvalAttack, robust_accuracy
from .util import derive_seed


@dataclass
class PruneMask:
    masks: dict[str, np.ndarray]  # bool per prunable tensor, True = keep
    fraction: float
    total: int
    pruned: int

    @property
    def kept(self) -> int:
        return self.total - self.pruned


def prunable_names(model) -> list[str]:
    return [name for name in model.params if model.kinds.get(name) == "weight"]


def magnitude_prune(model, fraction: float):
    """Return (mask, pruned copy) with floor(fraction * total) weights zeroed."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    names = prunable_names(model)
    if not names:
        raise ValueError("model has no prunable weight tensors")
    sizes = [model.params[n].size for n in names]
    total = sum(sizes)
    k = int(np.floor(fraction * total))
    flat = np.concatenate([np.abs(model.params[n].data).reshape(-1) for n in names])
    keep = np.ones(total, dtype=bool)
    if k:
        order = np.argsort(flat, kind="stable")
        keep[order[:k]] = False
    masks = {}
    offset = 0
    for name, size in zip(names, sizes):
        masks[name] = keep[offset : offset + size].reshape(model.params[name].shape).copy()
        offset += size
    pruned = model.copy()
    for name, mask in masks.items():
        p = pruned.params[name]
        p.data = np.where(mask, p.data, 0.0)
    return PruneMask(masks=masks, fraction=float(fraction), total=total, pruned=k), pruned


def sparsity_sweep(model, fractions, images, labels, attacks: list[EvalAttack],
                   seed: int = 0) -> list[dict]:
    """Evaluate pruned copies of the model at each fraction.

    Fractions must be strictly increasing. Each row reports the exact pruning
    accounting plus clean and per-attack accuracy of the pruned copy.
    """
    fractions = [float(f) for f in fractions]
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError(f"fractions must be strictly increasing, got {fractions}")
    rows = []
    for fraction in fractions:
        mask, pruned = magnitude_prune(model, fraction)
        report = robust_accuracy(
            pruned, images, labels, attacks,
            seed=derive_seed(seed, f"sweep:{fraction!r}"),
        )
        row = {
            "fraction": fraction,
            "weights_total": mask.total,
            "weights_pruned": mask.pruned,
            "nonzero_params": pruned.nonzero_count(),
            "clean_acc": report.clean_accuracy,
        }
        for name, acc in report.per_attack.items():
            row[f"acc_{name}"] = acc
        row["worst_acc"] = report.worst_accuracy
        rows.append(row)
    return rows
