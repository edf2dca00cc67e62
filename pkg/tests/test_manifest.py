"""Tests for manifest validation, normalization, and hashing."""

import json

import pytest

from robustgrid.attacks import EvalAttack
from robustgrid.manifest import (
    PGD_EPSILON,
    SCHEMA_NAME,
    ManifestError,
    eval_attacks_from,
    load_manifest,
    manifest_hash,
    validate_manifest,
)


def minimal(**over):
    doc = {
        "schema": SCHEMA_NAME,
        "structures": {"presets": ["(b)"]},
        "dataset": {"kind": "synthetic"},
    }
    doc.update(over)
    return doc


# ---------------------------------------------------------------------------
# defaults


def test_minimal_manifest_fills_defaults():
    norm = validate_manifest(minimal())
    assert norm["seeds"] == [0]
    assert norm["structures"]["presets"] == ["(b)"]
    assert norm["structures"]["families"] == ["vit"]
    assert norm["structures"]["custom"] == []
    ds = norm["dataset"]
    assert ds["kind"] == "synthetic"
    assert (ds["side"], ds["count"], ds["noise_std"]) == (8, 512, 0.1)
    assert (ds["low_freq"], ds["high_freq"], ds["amplitude"]) == (1, 3, 0.25)
    assert ds["train_fraction"] == 0.75
    assert ds["normalize"] is False
    tr = norm["training"]
    assert tr == {
        "mode": "natural", "optimizer": "adam", "lr": 1e-3, "momentum": 0.9,
        "epochs": 1, "batch_size": 32, "attack": None,
    }
    ev = norm["evaluation"]
    assert (ev["subset"], ev["batch_size"]) == (256, 128)
    assert [a["name"] for a in ev["attacks"]] == ["pgd", "square"]
    assert all(a["epsilon"] == PGD_EPSILON for a in ev["attacks"])
    assert norm["diagnostics"]["heatmap"]["enabled"] is False
    assert norm["diagnostics"]["lipschitz"]["enabled"] is False
    assert norm["pruning"] == {"fractions": []}


def test_adversarial_mode_fills_attack_defaults():
    norm = validate_manifest(minimal(training={"mode": "adversarial"}))
    atk = norm["training"]["attack"]
    assert atk == {
        "epsilon": PGD_EPSILON, "steps": 10, "step_size": 0.01,
        "restarts": 1, "init": "clean",
    }


def test_integers_accepted_for_float_fields():
    norm = validate_manifest(minimal(training={"lr": 1}))
    assert norm["training"]["lr"] == 1.0
    assert isinstance(norm["training"]["lr"], float)


def test_pgd_eval_attack_gets_uniform_multi_restart_defaults():
    norm = validate_manifest(minimal(
        evaluation={"attacks": [{"name": "p", "method": "pgd", "epsilon": 0.1}]}
    ))
    atk = norm["evaluation"]["attacks"][0]
    assert atk["restarts"] == 5
    assert atk["init"] == "uniform"


# ---------------------------------------------------------------------------
# rejections, with dotted paths in the message


@pytest.mark.parametrize(
    "doc, needle",
    [
        ({"structures": {}, "dataset": {}}, "missing required keys ['schema']"),
        (minimal(schema="nope/v0"), "manifest.schema:"),
        (minimal(bogus=1), "unknown keys ['bogus']"),
        (minimal(seeds=[1, 1]), "manifest.seeds: duplicate"),
        (minimal(seeds=[-1]), "manifest.seeds:"),
        (minimal(seeds=[]), "manifest.seeds:"),
        (minimal(structures={"presets": ["(zz)"]}), "manifest.structures.presets[0]: unknown preset"),
        (minimal(structures={"presets": [], "custom": []}), "manifest.structures: need at least one"),
        (minimal(structures={"presets": ["(b)"], "families": ["cnn"]}), "manifest.structures.families[0]"),
        (minimal(dataset={"kind": "imagenet"}), "manifest.dataset.kind: unknown dataset kind"),
        (minimal(dataset={"kind": "synthetic", "train_fraction": 1.0}), "manifest.dataset.train_fraction"),
        (minimal(dataset={"kind": "cifar10"}), "manifest.dataset"),
        (minimal(training={"mode": "robust"}), "manifest.training.mode"),
        (minimal(training={"optimizer": "lbfgs"}), "manifest.training.optimizer"),
        (minimal(training={"attack": {"epsilon": 0.1}}), "manifest.training.attack: only valid"),
        (minimal(training={"mode": "adversarial", "attack": {"epsilon": -1}}), "manifest.training.attack"),
        (minimal(training={"lr": "fast"}), "manifest.training.lr: expected a number"),
        (minimal(evaluation={"attacks": [{"name": "a", "method": "warp"}]}),
         "manifest.evaluation.attacks[0].method: unknown attack method"),
        (minimal(evaluation={"attacks": [
            {"name": "a", "method": "fgsm", "epsilon": 0.1},
            {"name": "a", "method": "pgd", "epsilon": 0.1},
        ]}), "manifest.evaluation.attacks[1].name: duplicate"),
        (minimal(diagnostics={"heatmap": {"enabled": 1}}),
         "manifest.diagnostics.heatmap.enabled: expected a boolean"),
        (minimal(diagnostics={"sonogram": {}}), "manifest.diagnostics: unknown keys"),
        (minimal(pruning={"fractions": [0.5, 0.5]}), "manifest.pruning.fractions: must be strictly increasing"),
        (minimal(pruning={"fractions": [1.5]}), "manifest.pruning.fractions[0]"),
        (minimal(pruning={"fractions": [True]}), "manifest.pruning.fractions[0]"),
    ],
)
def test_rejections_carry_dotted_paths(doc, needle):
    with pytest.raises(ManifestError) as err:
        validate_manifest(doc)
    assert needle in str(err.value), str(err.value)


def test_custom_spec_unknown_field_rejected():
    doc = minimal(structures={"custom": [{"name": "x", "spec": {"family": "vit", "warp": 1}}]})
    with pytest.raises(ManifestError, match=r"structures\.custom\[0\]\.spec"):
        validate_manifest(doc)


# ---------------------------------------------------------------------------
# hashing


def test_hash_is_stable_and_input_order_insensitive():
    a = validate_manifest(minimal())
    b = validate_manifest(json.loads(json.dumps(minimal())))
    assert manifest_hash(a) == manifest_hash(b)
    assert len(manifest_hash(a)) == 64
    # Key order in the source document does not matter after normalization.
    reordered = {
        "dataset": {"kind": "synthetic"},
        "structures": {"presets": ["(b)"]},
        "schema": SCHEMA_NAME,
    }
    assert manifest_hash(validate_manifest(reordered)) == manifest_hash(a)


def test_hash_changes_with_content():
    base = manifest_hash(validate_manifest(minimal()))
    assert manifest_hash(validate_manifest(minimal(seeds=[1]))) != base
    assert manifest_hash(validate_manifest(minimal(training={"lr": 0.01}))) != base


def test_explicit_defaults_hash_like_omitted_ones():
    # Normalization fills defaults, so writing them out changes nothing.
    spelled = minimal(seeds=[0], training={"mode": "natural", "lr": 1e-3})
    assert manifest_hash(validate_manifest(spelled)) == manifest_hash(validate_manifest(minimal()))


# ---------------------------------------------------------------------------
# file loading and attack construction


def test_load_manifest_round_trip(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps(minimal()))
    assert load_manifest(path) == validate_manifest(minimal())


def test_load_manifest_error_paths(tmp_path):
    with pytest.raises(ManifestError, match="cannot read"):
        load_manifest(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ManifestError, match="not valid JSON"):
        load_manifest(bad)
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]")
    with pytest.raises(ManifestError, match="top level must be an object"):
        load_manifest(arr)


def test_eval_attacks_from_reconstructs_objects():
    norm = validate_manifest(minimal())
    attacks = eval_attacks_from(norm)
    assert [a.name for a in attacks] == ["pgd", "square"]
    assert all(isinstance(a, EvalAttack) for a in attacks)
    pgd = attacks[0]
    assert pgd.method == "pgd"
    assert pgd.spec.epsilon == PGD_EPSILON
    assert pgd.spec.restarts == 5
    assert pgd.spec.init == "uniform"
    assert attacks[1].queries == 200
