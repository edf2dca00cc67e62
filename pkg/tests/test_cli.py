"""Tests for the command-line front end: exit codes, output, error lines."""

import json
import subprocess
import sys

import pytest

from robustgrid.cli import main
from robustgrid.manifest import manifest_hash, validate_manifest

from test_harness import BAD_CUSTOM, TINY_OVERRIDES, tiny_manifest


def write_manifest(tmp_path, doc, name="m.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


# ---------------------------------------------------------------------------
# validate


def test_validate_prints_hash_and_resolved_specs(tmp_path, capsys):
    path = write_manifest(tmp_path, tiny_manifest())
    assert main(["validate", "--manifest", path]) == 0
    out = capsys.readouterr().out.splitlines()
    norm = validate_manifest(tiny_manifest())
    assert out[0] == f"manifest {manifest_hash(norm)}"
    assert out[1].startswith("ok (b) vit {")
    assert '"embed_dim":8' in out[1]


def test_validate_rejected_structures_echo_rule_and_fail(tmp_path, capsys):
    doc = tiny_manifest(structures={"presets": ["(b)"],
                                    "overrides": dict(TINY_OVERRIDES),
                                    "custom": [BAD_CUSTOM]})
    path = write_manifest(tmp_path, doc)
    assert main(["validate", "--manifest", path]) == 2
    captured = capsys.readouterr()
    assert "rejected bad vit rule=patch-divisibility" in captured.out
    err_lines = captured.err.splitlines()
    assert len(err_lines) == 1
    assert err_lines[0].startswith("error: structure: ")
    assert "rule=patch-divisibility" in err_lines[0]


# ---------------------------------------------------------------------------
# error lines


def test_missing_manifest_is_single_error_line(tmp_path, capsys):
    assert main(["validate", "--manifest", str(tmp_path / "nope.json")]) == 2
    err = capsys.readouterr().err.splitlines()
    assert len(err) == 1
    assert err[0].startswith("error: manifest: cannot read manifest")


def test_invalid_json_manifest(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{oops")
    assert main(["validate", "--manifest", str(path)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: manifest: ")
    assert "not valid JSON" in err


def test_schema_violation_has_dotted_path(tmp_path, capsys):
    path = write_manifest(tmp_path, tiny_manifest(seeds=[2, 2]))
    assert main(["validate", "--manifest", path]) == 2
    assert "error: manifest: manifest.seeds:" in capsys.readouterr().err


def test_missing_cifar_file_is_io_error(tmp_path, capsys):
    doc = tiny_manifest(dataset={"kind": "cifar10",
                                 "train": [str(tmp_path / "absent.bin")]})
    path = write_manifest(tmp_path, doc)
    assert main(["train", "--manifest", path, "--out", str(tmp_path / "out")]) == 2
    err = capsys.readouterr().err.splitlines()
    assert len(err) == 1
    assert err[0].startswith("error: io: ")


def test_corrupt_cifar_file_is_dataset_error(tmp_path, capsys):
    bad = tmp_path / "short.bin"
    bad.write_bytes(b"\x00" * 100)
    doc = tiny_manifest(dataset={"kind": "cifar10", "train": [str(bad)]})
    path = write_manifest(tmp_path, doc)
    assert main(["train", "--manifest", path, "--out", str(tmp_path / "out")]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: dataset: ")
    assert "not a multiple of 3073" in err


# ---------------------------------------------------------------------------
# stage commands


def test_train_then_attack_reuses_checkpoint(tmp_path, capsys):
    path = write_manifest(tmp_path, tiny_manifest())
    out = tmp_path / "out"
    assert main(["train", "--manifest", path, "--out", str(out)]) == 0
    capsys.readouterr()
    ckpt = out / "checkpoints" / "b_vit_s0.ckpt"
    ckpt_bytes = ckpt.read_bytes()
    results = (out / "results.csv").read_text()
    # train alone reports no accuracies
    row = results.splitlines()[2].split(",")
    header = results.splitlines()[1].split(",")
    assert row[header.index("clean_acc")] == ""

    assert main(["attack", "--manifest", path, "--out", str(out)]) == 0
    capsys.readouterr()
    assert ckpt.read_bytes() == ckpt_bytes  # reused, not retrained
    results = (out / "results.csv").read_text()
    row = results.splitlines()[2].split(",")
    assert row[header.index("clean_acc")] != ""
    assert row[header.index("acc_fgsm")] != ""


def test_heatmap_and_lipschitz_and_prune_require_manifest_enablement(tmp_path, capsys):
    path = write_manifest(tmp_path, tiny_manifest())
    for command, needle in [
        ("heatmap", "diagnostics.heatmap.enabled"),
        ("lipschitz", "diagnostics.lipschitz.enabled"),
        ("prune", "pruning.fractions"),
    ]:
        assert main([command, "--manifest", path, "--out", str(tmp_path / "out")]) == 2
        err = capsys.readouterr().err
        assert err.startswith("error: manifest: ")
        assert needle in err


def test_heatmap_command_writes_artifacts_when_enabled(tmp_path, capsys):
    doc = tiny_manifest(diagnostics={"heatmap": {"enabled": True, "samples": 4,
                                                 "norm": 1.0}})
    path = write_manifest(tmp_path, doc)
    out = tmp_path / "out"
    assert main(["heatmap", "--manifest", path, "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert (out / "heatmaps" / "b_vit_s0.ppm").exists()
    assert (out / "heatmaps" / "b_vit_s0.csv").exists()
    assert "results " in stdout


def test_grid_reports_paths_and_hash(tmp_path, capsys):
    doc = tiny_manifest(pruning={"fractions": [0.0, 0.5]})
    path = write_manifest(tmp_path, doc)
    out = tmp_path / "out"
    assert main(["grid", "--manifest", path, "--out", str(out), "--jobs", "1"]) == 0
    stdout = capsys.readouterr().out.splitlines()
    norm = validate_manifest(doc)
    assert stdout[0] == f"manifest {manifest_hash(norm)}"
    assert stdout[1] == f"results {out / 'results.csv'}"
    assert stdout[2] == f"pruning {out / 'pruning.csv'}"
    assert stdout[3] == f"timings {out / 'timings.csv'}"


def test_grid_echoes_non_ok_rows(tmp_path, capsys):
    doc = tiny_manifest(structures={"presets": ["(b)"],
                                    "overrides": dict(TINY_OVERRIDES),
                                    "custom": [BAD_CUSTOM]})
    path = write_manifest(tmp_path, doc)
    assert main(["grid", "--manifest", path, "--out", str(tmp_path / "out")]) == 0
    stdout = capsys.readouterr().out
    assert "rejected bad vit seed=0 detail=patch-divisibility" in stdout


# ---------------------------------------------------------------------------
# seed override


def test_seed_override_replaces_seeds_and_changes_hash(tmp_path, capsys):
    doc = tiny_manifest(seeds=[0, 1])
    path = write_manifest(tmp_path, doc)
    out = tmp_path / "out"
    assert main(["train", "--manifest", path, "--out", str(out),
                 "--seed-override", "7"]) == 0
    capsys.readouterr()
    lines = (out / "results.csv").read_text().splitlines()
    assert len(lines) == 3  # schema + header + single row
    assert lines[2].split(",")[2] == "7"
    override_norm = validate_manifest(tiny_manifest(seeds=[7]))
    assert f"manifest_sha256={manifest_hash(override_norm)}" in lines[0]
    base_norm = validate_manifest(doc)
    assert manifest_hash(base_norm) != manifest_hash(override_norm)


def test_negative_seed_override_rejected(tmp_path, capsys):
    path = write_manifest(tmp_path, tiny_manifest())
    assert main(["validate", "--manifest", path, "--seed-override", "-3"]) == 2
    assert "--seed-override must be >= 0" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# module entry point


def test_module_entry_point_runs(tmp_path):
    path = write_manifest(tmp_path, tiny_manifest())
    proc = subprocess.run(
        [sys.executable, "-m", "robustgrid.cli", "validate", "--manifest", path],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert proc.stdout.startswith("manifest ")
