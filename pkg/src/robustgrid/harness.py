"""Config-driven grid runner.

One manifest describes a whole experiment: the structure grid, the dataset,
how to train, which adversaries to evaluate, and which diagnostics to record.
The harness expands the grid in manifest order, runs every (structure, family,
seed) cell, and writes CSV artifacts whose bytes depend only on the manifest —
wall-clock timings go to a separate sidecar file that is exempt from that
guarantee.
"""

from __future__ import annotations

import csv
import io
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import AttackSpec, robust_accuracy
from .data import LabeledImageSet, read_cifar10, synth_freq_dataset
from .diagnostics import fourier_heatmap, local_lipschitz, write_heatmap_csv, write_heatmap_ppm
from .manifest import eval_attacks_from, manifest_hash
from .pruning import sparsity_sweep
from .structures import (
    StructureError,
    StructureSpec,
    build_model,
    structure_from_preset,
    validate_structure,
)
from .training import Trainer, TrainConfig, load_checkpoint, save_checkpoint
from .util import atomic_write_text, derive_seed, format_sig, sha256_of_json

RESULTS_SCHEMA = "robustgrid/results/v1"
PRUNING_SCHEMA = "robustgrid/pruning/v1"
TIMINGS_SCHEMA = "robustgrid/timings/v1"


# ---------------------------------------------------------------------------
# grid expansion


@dataclass(frozen=True)
class Cell:
    """One structure column of the grid: a named spec or its rejection."""

    name: str
    family: str
    spec: StructureSpec | None
    rejection: str = ""  # rule slug when the structure failed validation


def _tupled_overrides(overrides: dict) -> dict:
    out = dict(overrides)
    for key in ("image", "stage_layers"):
        if key in out and out[key] is not None:
            out[key] = tuple(out[key])
    return out


def structure_cells(normalized: dict) -> list[Cell]:
    """Expand the manifest's structure section into grid cells, in order."""
    st = normalized["structures"]
    overrides = _tupled_overrides(st["overrides"])
    cells = []
    for preset in st["presets"]:
        for family in st["families"]:
            try:
                spec = structure_from_preset(preset, family, **overrides)
                validate_structure(spec)
                cells.append(Cell(name=preset, family=family, spec=spec))
            except StructureError as exc:
                cells.append(Cell(name=preset, family=family, spec=None,
                                  rejection=exc.rule))
    for entry in st["custom"]:
        d = dict(entry["spec"])
        for key in ("image", "stage_layers"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        family = d.get("family", "vit")
        try:
            spec = StructureSpec.from_dict(d)
            validate_structure(spec)
            cells.append(Cell(name=entry["name"], family=spec.family, spec=spec))
        except StructureError as exc:
            cells.append(Cell(name=entry["name"], family=family, spec=None,
                              rejection=exc.rule))
    return cells


# ---------------------------------------------------------------------------
# dataset assembly (cached per process: workers rebuild it once, not per cell)

_DATASET_CACHE: dict[str, tuple[LabeledImageSet, LabeledImageSet]] = {}


def build_dataset(normalized: dict) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Materialize (train, test) splits for the manifest's dataset section."""
    ds = normalized["dataset"]
    key = sha256_of_json(ds)
    if key in _DATASET_CACHE:
        return _DATASET_CACHE[key]
    if ds["kind"] == "synthetic":
        full = synth_freq_dataset(
            side=ds["side"], count=ds["count"], noise_std=ds["noise_std"],
            low_freq=ds["low_freq"], high_freq=ds["high_freq"],
            amplitude=ds["amplitude"], seed=ds["seed"],
        )
        cut = int(ds["count"] * ds["train_fraction"])
        cut = max(1, min(ds["count"] - 1, cut))
        train = full.subset(slice(None, cut))
        test = full.subset(slice(cut, None))
    else:
        train = read_cifar10(ds["train"])
        if ds["test"]:
            test = read_cifar10(ds["test"])
        else:
            # No held-out files: carve the tail tenth off the training set.
            n = len(train)
            cut = max(1, n - max(1, n // 10))
            test = train.subset(slice(cut, None))
            train = train.subset(slice(None, cut))
        limit = ds["limit"]
        if limit is not None:
            train = train.subset(slice(None, limit))
            test = test.subset(slice(None, limit))
    _DATASET_CACHE[key] = (train, test)
    return train, test


# ---------------------------------------------------------------------------
# single cell


def _safe_name(cell: Cell, seed: int) -> str:
    slug = re.sub(r"[^A-Za-z0-9_.-]", "", cell.name)
    return f"{slug}_{cell.family}_s{seed}"


def _train_config(normalized: dict, seed: int) -> TrainConfig:
    tr = normalized["training"]
    attack = None
    if tr["mode"] == "adversarial":
        attack = AttackSpec.from_dict(tr["attack"])
    return TrainConfig(
        optimizer=tr["optimizer"], lr=tr["lr"], momentum=tr["momentum"],
        epochs=tr["epochs"], batch_size=tr["batch_size"], seed=seed,
        adversarial=attack,
    )


ALL_STAGES = frozenset({"attack", "heatmap", "lipschitz", "prune"})


def _trained_model(normalized: dict, cell: Cell, seed: int, out_dir: Path):
    """Train the cell's model, or reload it from a matching checkpoint.

    A checkpoint is reused only if it carries the same manifest hash and cell
    identity; training is deterministic, so the reloaded model is bit-identical
    to what retraining would produce and reruns stay byte-stable either way.
    """
    digest = manifest_hash(normalized)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_path = ckpt_dir / f"{_safe_name(cell, seed)}.ckpt"
    if ckpt_path.exists():
        try:
            model, trainer, extra = load_checkpoint(ckpt_path)
        except Exception:
            model = trainer = extra = None
        if extra is not None and extra.get("manifest_sha256") == digest and (
            extra.get("structure") == cell.name
            and extra.get("family") == cell.family
            and extra.get("seed") == seed
        ):
            return model, trainer, None

    train, _ = build_dataset(normalized)
    model = build_model(cell.spec, seed=derive_seed(seed, f"model:{cell.name}:{cell.family}"))
    if normalized["dataset"]["normalize"]:
        mean, std = train.channel_stats()
        model.set_normalization(mean, std)
    config = _train_config(normalized, derive_seed(seed, f"train:{cell.name}:{cell.family}"))
    trainer = Trainer(model, config)
    result = trainer.fit(train.images, train.labels)
    if result.aborted:
        return model, trainer, result.reason
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        ckpt_path, model, trainer,
        extra={"structure": cell.name, "family": cell.family, "seed": seed,
               "manifest_sha256": digest},
    )
    return model, trainer, None


def run_cell(normalized: dict, cell: Cell, seed: int, out_dir,
             stages: frozenset = ALL_STAGES) -> dict:
    """Train and evaluate one grid cell; returns the result row.

    Training always happens (or is reloaded from a matching checkpoint);
    ``stages`` selects which downstream evaluations run. The row's "pruning"
    key (a list of sub-rows) is split off by the caller. Artifacts
    (checkpoint, heatmap images) are written under ``out_dir``.
    """
    row: dict = {
        "structure": cell.name, "family": cell.family, "seed": seed,
        "status": "ok", "detail": "", "pruning": [],
    }
    if cell.spec is None:
        row["status"] = "rejected"
        row["detail"] = cell.rejection
        return row

    out_dir = Path(out_dir)
    _, test = build_dataset(normalized)
    model, trainer, abort_reason = _trained_model(normalized, cell, seed, out_dir)
    row["param_count"] = model.parameter_count()
    if abort_reason is not None:
        row["status"] = "aborted"
        row["detail"] = abort_reason
        return row
    epochs = max(1, trainer.epoch)
    per_epoch = max(1, len(trainer.history) // epochs)
    if trainer.history:
        row["final_loss"] = float(np.mean(trainer.history[-per_epoch:]))

    ev = normalized["evaluation"]
    subset = test.images[: ev["subset"]]
    subset_labels = test.labels[: ev["subset"]]
    attacks = eval_attacks_from(normalized)
    if "attack" in stages:
        report = robust_accuracy(
            model, subset, subset_labels, attacks,
            seed=derive_seed(seed, f"eval:{cell.name}:{cell.family}"),
            batch_size=ev["batch_size"],
        )
        row["clean_acc"] = report.clean_accuracy
        for name, acc in report.per_attack.items():
            row[f"acc_{name}"] = acc
        row["worst_acc"] = report.worst_accuracy

    hm = normalized["diagnostics"]["heatmap"]
    if hm["enabled"] and "heatmap" in stages:
        heat = fourier_heatmap(
            model, subset, subset_labels, norm=hm["norm"],
            seed=derive_seed(seed, f"heatmap:{cell.name}:{cell.family}"),
            sample_limit=hm["samples"],
        )
        row["heatmap_mean_err"] = heat.mean_error
        row["heatmap_hf_err"] = heat.high_frequency_mean()
        hm_dir = out_dir / "heatmaps"
        hm_dir.mkdir(parents=True, exist_ok=True)
        stem = _safe_name(cell, seed)
        comment = f"{cell.name} {cell.family} seed={seed} norm={hm['norm']}"
        write_heatmap_ppm(heat.errors, hm_dir / f"{stem}.ppm", scale=hm["scale"],
                          comment=comment)
        write_heatmap_csv(heat.errors, hm_dir / f"{stem}.csv", comment=comment)

    lp = normalized["diagnostics"]["lipschitz"]
    if lp["enabled"] and "lipschitz" in stages:
        ratios = local_lipschitz(
            model, test.images[: lp["samples"]], epsilon=lp["epsilon"],
            steps=lp["steps"], restarts=lp["restarts"], step_size=lp["step_size"],
            seed=derive_seed(seed, f"lipschitz:{cell.name}:{cell.family}"),
        )
        row["lipschitz_median"] = float(np.median(ratios))

    fractions = normalized["pruning"]["fractions"]
    if fractions and "prune" in stages:
        sub_rows = sparsity_sweep(
            model, fractions, subset, subset_labels, attacks,
            seed=derive_seed(seed, f"prune:{cell.name}:{cell.family}"),
        )
        for sub in sub_rows:
            sub.update(structure=cell.name, family=cell.family, seed=seed)
        row["pruning"] = sub_rows
    return row


# ---------------------------------------------------------------------------
# CSV rendering


def _format_cell(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format_sig(float(value), 6)


def _render_csv(schema: str, digest: str, columns: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"# {schema} manifest_sha256={digest}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format_cell(row.get(col, "")) for col in columns])
    return buf.getvalue()


def results_columns(normalized: dict) -> list[str]:
    cols = ["structure", "family", "seed", "status", "detail",
            "param_count", "final_loss", "clean_acc"]
    cols += [f"acc_{a['name']}" for a in normalized["evaluation"]["attacks"]]
    cols.append("worst_acc")
    if normalized["diagnostics"]["heatmap"]["enabled"]:
        cols += ["heatmap_mean_err", "heatmap_hf_err"]
    if normalized["diagnostics"]["lipschitz"]["enabled"]:
        cols.append("lipschitz_median")
    return cols


def pruning_columns(normalized: dict) -> list[str]:
    cols = ["structure", "family", "seed", "fraction", "weights_total",
            "weights_pruned", "nonzero_params", "clean_acc"]
    cols += [f"acc_{a['name']}" for a in normalized["evaluation"]["attacks"]]
    cols.append("worst_acc")
    return cols


# ---------------------------------------------------------------------------
# grid driver


def _worker(args) -> dict:
    normalized, cell, seed, out_dir, stages = args
    start = time.perf_counter()
    row = run_cell(normalized, cell, seed, out_dir, stages)
    row["_seconds"] = time.perf_counter() - start
    return row


def run_grid(normalized: dict, out_dir, jobs: int = 1,
             stages: frozenset = ALL_STAGES) -> dict:
    """Run every cell of the manifest grid and write the CSV artifacts.

    Returns {"results": path, "pruning": path | None, "timings": path,
    "rows": [...]}. Rows are produced in manifest order (structures outer,
    seeds inner) regardless of worker scheduling, so results.csv is
    byte-identical across reruns and across values of ``jobs``.
    """
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = manifest_hash(normalized)

    tasks = [(normalized, cell, seed, str(out_dir), stages)
             for cell in structure_cells(normalized)
             for seed in normalized["seeds"]]
    if jobs == 1 or len(tasks) <= 1:
        rows = [_worker(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_worker, tasks))

    prune_rows = [sub for row in rows for sub in row.pop("pruning")]
    timing_rows = [
        {"structure": r["structure"], "family": r["family"], "seed": r["seed"],
         "seconds": f"{r.pop('_seconds'):.3f}"}
        for r in rows
    ]

    results_path = out_dir / "results.csv"
    atomic_write_text(results_path,
                      _render_csv(RESULTS_SCHEMA, digest, results_columns(normalized), rows))
    pruning_path = None
    if normalized["pruning"]["fractions"]:
        pruning_path = out_dir / "pruning.csv"
        atomic_write_text(pruning_path,
                          _render_csv(PRUNING_SCHEMA, digest, pruning_columns(normalized),
                                      prune_rows))
    timings_path = out_dir / "timings.csv"
    atomic_write_text(timings_path,
                      _render_csv(TIMINGS_SCHEMA, digest,
                                  ["structure", "family", "seed", "seconds"], timing_rows))
    return {"results": results_path, "pruning": pruning_path,
            "timings": timings_path, "rows": rows}
