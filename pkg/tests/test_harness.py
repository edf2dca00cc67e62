"""End-to-end tests for the grid harness: expansion, datasets, cells, CSVs."""

import numpy as np
import pytest

from robustgrid.data import write_cifar10
from robustgrid.harness import (
    ALL_STAGES,
    Cell,
    _safe_name,
    build_dataset,
    results_columns,
    run_cell,
    run_grid,
    structure_cells,
)
from robustgrid.manifest import validate_manifest

TINY_OVERRIDES = {
    "image": [1, 8, 8], "patch": 2, "embed_dim": 8, "heads": 2,
    "mlp_ratio": 2.0, "classes": 2, "stage_layers": [1],
}


def tiny_manifest(**over):
    doc = {
        "schema": "robustgrid/manifest/v1",
        "seeds": [0],
        "structures": {"presets": ["(b)"], "overrides": dict(TINY_OVERRIDES)},
        "dataset": {"kind": "synthetic", "side": 8, "count": 48, "seed": 1},
        "training": {"mode": "natural", "optimizer": "adam", "lr": 0.01,
                     "epochs": 1, "batch_size": 16},
        "evaluation": {"subset": 8, "batch_size": 64,
                       "attacks": [{"name": "fgsm", "method": "fgsm", "epsilon": 0.03}]},
    }
    doc.update(over)
    return doc


BAD_CUSTOM = {
    "name": "bad",
    "spec": {"family": "vit", "image": [1, 8, 8], "patch": 3, "embed_dim": 8,
             "heads": 2, "classes": 2, "stage_layers": [1]},
}


# ---------------------------------------------------------------------------
# grid expansion


def test_structure_cells_order_families_and_rejections():
    norm = validate_manifest(tiny_manifest(structures={
        "presets": ["(b)", "(a)"],
        "families": ["vit", "vmlp"],
        "overrides": dict(TINY_OVERRIDES),
        "custom": [BAD_CUSTOM],
    }))
    cells = structure_cells(norm)
    assert [(c.name, c.family) for c in cells] == [
        ("(b)", "vit"), ("(b)", "vmlp"), ("(a)", "vit"), ("(a)", "vmlp"),
        ("bad", "vit"),
    ]
    assert all(c.spec is not None for c in cells[:4])
    assert cells[4].spec is None
    assert cells[4].rejection == "patch-divisibility"


def test_overrides_reach_the_spec():
    norm = validate_manifest(tiny_manifest())
    (cell,) = structure_cells(norm)
    assert cell.spec.image == (1, 8, 8)
    assert cell.spec.embed_dim == 8
    assert cell.spec.stage_layers == (1,)


def test_safe_name_strips_punctuation():
    cell = Cell(name="(b)-style", family="vit", spec=None)
    assert _safe_name(cell, 0) == "b-style_vit_s0"


# ---------------------------------------------------------------------------
# dataset assembly


def test_synthetic_split_sizes_and_cache_identity():
    norm = validate_manifest(tiny_manifest())
    train, test = build_dataset(norm)
    assert len(train) == 36  # 0.75 of 48
    assert len(test) == 12
    again = build_dataset(validate_manifest(tiny_manifest()))
    assert again[0] is train  # per-process cache hit


def test_cifar_tail_carve_and_explicit_test_files(tmp_path):
    rng = np.random.Generator(np.random.PCG64(0))
    images = rng.integers(0, 256, size=(20, 3, 32, 32)) / 255.0
    labels = rng.integers(0, 10, size=20)
    train_path = tmp_path / "train.bin"
    write_cifar10(train_path, images, labels)

    doc = tiny_manifest(dataset={"kind": "cifar10", "train": [str(train_path)]})
    train, test = build_dataset(validate_manifest(doc))
    assert (len(train), len(test)) == (18, 2)  # tail tenth carved off
    np.testing.assert_array_equal(test.images, images[18:])

    test_path = tmp_path / "test.bin"
    write_cifar10(test_path, images[:5], labels[:5])
    doc = tiny_manifest(dataset={"kind": "cifar10", "train": [str(train_path)],
                                 "test": [str(test_path)]})
    train, test = build_dataset(validate_manifest(doc))
    assert (len(train), len(test)) == (20, 5)

    doc = tiny_manifest(dataset={"kind": "cifar10", "train": [str(train_path)],
                                 "limit": 6})
    train, test = build_dataset(validate_manifest(doc))
    assert (len(train), len(test)) == (6, 2)


# ---------------------------------------------------------------------------
# single cells


def test_run_cell_rejected_structure(tmp_path):
    norm = validate_manifest(tiny_manifest())
    cell = Cell(name="bad", family="vit", spec=None, rejection="patch-divisibility")
    row = run_cell(norm, cell, seed=0, out_dir=tmp_path)
    assert row["status"] == "rejected"
    assert row["detail"] == "patch-divisibility"
    assert "clean_acc" not in row


def test_run_cell_full_row(tmp_path):
    norm = validate_manifest(tiny_manifest())
    (cell,) = structure_cells(norm)
    row = run_cell(norm, cell, seed=0, out_dir=tmp_path)
    assert row["status"] == "ok"
    assert row["param_count"] > 0
    assert 0.0 <= row["clean_acc"] <= 1.0
    assert 0.0 <= row["acc_fgsm"] <= 1.0
    assert row["worst_acc"] <= min(row["clean_acc"], row["acc_fgsm"])
    assert (tmp_path / "checkpoints" / "b_vit_s0.ckpt").exists()


def test_zero_epsilon_attack_columns_equal_clean(tmp_path):
    doc = tiny_manifest(evaluation={
        "subset": 8,
        "attacks": [
            {"name": "pgd0", "method": "pgd", "epsilon": 0.0},
            {"name": "sq0", "method": "square", "epsilon": 0.0, "queries": 20},
        ],
    })
    norm = validate_manifest(doc)
    (cell,) = structure_cells(norm)
    row = run_cell(norm, cell, seed=0, out_dir=tmp_path)
    assert row["acc_pgd0"] == row["clean_acc"]
    assert row["acc_sq0"] == row["clean_acc"]
    assert row["worst_acc"] == row["clean_acc"]


def test_stages_gate_downstream_work(tmp_path):
    doc = tiny_manifest(
        diagnostics={"heatmap": {"enabled": True, "samples": 4, "norm": 1.0}},
        pruning={"fractions": [0.0, 0.5]},
    )
    norm = validate_manifest(doc)
    (cell,) = structure_cells(norm)
    row = run_cell(norm, cell, seed=0, out_dir=tmp_path, stages=frozenset())
    assert row["status"] == "ok"
    assert "clean_acc" not in row
    assert "heatmap_mean_err" not in row
    assert row["pruning"] == []

    row = run_cell(norm, cell, seed=0, out_dir=tmp_path, stages=ALL_STAGES)
    assert "clean_acc" in row
    assert "heatmap_mean_err" in row
    assert len(row["pruning"]) == 2
    assert (tmp_path / "heatmaps" / "b_vit_s0.ppm").exists()
    assert (tmp_path / "heatmaps" / "b_vit_s0.csv").exists()


# ---------------------------------------------------------------------------
# the grid driver and its CSV artifacts


def full_manifest(**over):
    return tiny_manifest(
        seeds=[0, 1],
        structures={"presets": ["(b)"], "overrides": dict(TINY_OVERRIDES),
                    "custom": [BAD_CUSTOM]},
        diagnostics={"heatmap": {"enabled": True, "samples": 4, "norm": 1.0, "scale": 2},
                     "lipschitz": {"enabled": True, "samples": 2, "steps": 3,
                                   "restarts": 1}},
        pruning={"fractions": [0.0, 0.5]},
        **over,
    )


def test_run_grid_artifacts_and_byte_determinism(tmp_path):
    norm = validate_manifest(full_manifest())

    out_a = run_grid(norm, tmp_path / "a")
    results_a = (tmp_path / "a" / "results.csv").read_bytes()
    pruning_a = (tmp_path / "a" / "pruning.csv").read_bytes()
    assert (tmp_path / "a" / "timings.csv").exists()

    # Fresh directory: identical bytes.
    run_grid(norm, tmp_path / "b")
    assert (tmp_path / "b" / "results.csv").read_bytes() == results_a
    assert (tmp_path / "b" / "pruning.csv").read_bytes() == pruning_a

    # Same directory again: checkpoints are reused, bytes still identical.
    ckpt = tmp_path / "a" / "checkpoints" / "b_vit_s0.ckpt"
    ckpt_bytes = ckpt.read_bytes()
    run_grid(norm, tmp_path / "a")
    assert (tmp_path / "a" / "results.csv").read_bytes() == results_a
    assert ckpt.read_bytes() == ckpt_bytes

    # Parallel execution: merge order is manifest order, bytes identical.
    run_grid(norm, tmp_path / "c", jobs=2)
    assert (tmp_path / "c" / "results.csv").read_bytes() == results_a

    # A corrupted checkpoint is ignored and rebuilt.
    ckpt.write_bytes(b"junk")
    run_grid(norm, tmp_path / "a")
    assert (tmp_path / "a" / "results.csv").read_bytes() == results_a
    assert ckpt.read_bytes() == ckpt_bytes

    rows = out_a["rows"]
    assert [(r["structure"], r["seed"]) for r in rows] == [
        ("(b)", 0), ("(b)", 1), ("bad", 0), ("bad", 1),
    ]


def test_results_csv_layout(tmp_path):
    norm = validate_manifest(full_manifest())
    run_grid(norm, tmp_path)
    lines = (tmp_path / "results.csv").read_text().splitlines()
    from robustgrid.manifest import manifest_hash

    assert lines[0] == f"# robustgrid/results/v1 manifest_sha256={manifest_hash(norm)}"
    header = lines[1].split(",")
    assert header == results_columns(norm)
    assert header == [
        "structure", "family", "seed", "status", "detail", "param_count",
        "final_loss", "clean_acc", "acc_fgsm", "worst_acc",
        "heatmap_mean_err", "heatmap_hf_err", "lipschitz_median",
    ]
    ok_row = lines[2].split(",")
    assert ok_row[0] == "(b)"
    assert ok_row[3] == "ok"
    # Rejected rows carry the rule in the detail column and blank metrics.
    bad_row = lines[4].split(",")
    assert bad_row[0] == "bad"
    assert bad_row[3] == "rejected"
    assert bad_row[4] == "patch-divisibility"
    assert set(bad_row[5:]) == {""}

    pruning_lines = (tmp_path / "pruning.csv").read_text().splitlines()
    assert pruning_lines[0].startswith("# robustgrid/pruning/v1 manifest_sha256=")
    assert pruning_lines[1].split(",")[:4] == ["structure", "family", "seed", "fraction"]
    # 2 ok cells x 2 fractions; rejected cells contribute nothing.
    assert len(pruning_lines) == 2 + 4

    timing_lines = (tmp_path / "timings.csv").read_text().splitlines()
    assert timing_lines[0].startswith("# robustgrid/timings/v1")
    assert len(timing_lines) == 2 + 4


def test_run_grid_rejects_bad_jobs(tmp_path):
    norm = validate_manifest(tiny_manifest())
    with pytest.raises(ValueError):
        run_grid(norm, tmp_path, jobs=0)
