"""Experiment manifests: one JSON document that pins an entire run.

The manifest is validated structurally before any compute happens: unknown
keys anywhere are rejected (typos must not silently change an experiment), and
every error message carries the dotted path of the offending field. The hash
of the normalized manifest is stamped into every artifact the harness writes.
"""

from __future__ import annotations

import json
from pathlib import Path

from .attacks import AttackSpec, EvalAttack
from .structures import PRESET_IDS, StructureSpec
from .training import OPTIMIZERS
from .util import sha256_of_json

SCHEMA_NAME = "robustgrid/manifest/v1"

PGD_EPSILON = 8.0 / 255.0


class ManifestError(ValueError):
    """The manifest document is malformed."""


def _fail(path: str, message: str):
    raise ManifestError(f"manifest.{path}: {message}" if path else f"manifest: {message}")


def _check_keys(d: dict, path: str, required: tuple[str, ...], optional: tuple[str, ...]):
    if not isinstance(d, dict):
        _fail(path, f"expected an object, got {type(d).__name__}")
    unknown = set(d) - set(required) - set(optional)
    if unknown:
        _fail(path, f"unknown keys {sorted(unknown)}")
    missing = set(required) - set(d)
    if missing:
        _fail(path, f"missing required keys {sorted(missing)}")


def _typed(d: dict, path: str, key: str, types, default=None):
    if key not in d or d[key] is None:
        return default
    value = d[key]
    if types is bool:
        if not isinstance(value, bool):
            _fail(f"{path}.{key}" if path else key, f"expected a boolean, got {value!r}")
    elif types is int:
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(f"{path}.{key}" if path else key, f"expected an integer, got {value!r}")
    elif types is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(f"{path}.{key}" if path else key, f"expected a number, got {value!r}")
        value = float(value)
    elif types is str:
        if not isinstance(value, str):
            _fail(f"{path}.{key}" if path else key, f"expected a string, got {value!r}")
    elif types is list:
        if not isinstance(value, list):
            _fail(f"{path}.{key}" if path else key, f"expected a list, got {value!r}")
    elif types is dict:
        if not isinstance(value, dict):
            _fail(f"{path}.{key}" if path else key, f"expected an object, got {value!r}")
    return value


_ATTACK_KEYS = ("epsilon", "steps", "step_size", "restarts", "init", "queries")


def _attack_spec(d: dict, path: str, defaults: dict | None = None) -> AttackSpec:
    _check_keys(d, path, (), _ATTACK_KEYS)
    base = dict(defaults or {})
    try:
        return AttackSpec(
            epsilon=_typed(d, path, "epsilon", float, base.get("epsilon", PGD_EPSILON)),
            steps=_typed(d, path, "steps", int, base.get("steps", 10)),
            step_size=_typed(d, path, "step_size", float, base.get("step_size", 0.01)),
            restarts=_typed(d, path, "restarts", int, base.get("restarts", 1)),
            init=_typed(d, path, "init", str, base.get("init", "clean")),
        )
    except ValueError as exc:
        _fail(path, str(exc))


def _eval_attack(d: dict, path: str) -> EvalAttack:
    _check_keys(d, path, ("name", "method"), _ATTACK_KEYS)
    name = _typed(d, path, "name", str)
    method = _typed(d, path, "method", str)
    if method not in ("fgsm", "pgd", "square"):
        _fail(f"{path}.method", f"unknown attack method {method!r}")
    defaults = {"restarts": 5, "init": "uniform"} if method == "pgd" else {}
    spec = _attack_spec({k: v for k, v in d.items() if k in _ATTACK_KEYS}, path, defaults)
    queries = _typed(d, path, "queries", int, 200)
    if queries < 0:
        _fail(f"{path}.queries", f"must be >= 0, got {queries}")
    return EvalAttack(name=name, method=method, spec=spec, queries=queries)


def validate_manifest(doc: dict) -> dict:
    """Normalize a parsed manifest: defaults filled, everything type-checked.

    Returns a plain-JSON dict (the canonical form used for hashing); raises
    :class:`ManifestError` on the first problem found.
    """
    _check_keys(
        doc, "",
        required=("schema", "structures", "dataset"),
        optional=("seeds", "training", "evaluation", "diagnostics", "pruning"),
    )
    if doc["schema"] != SCHEMA_NAME:
        _fail("schema", f"expected {SCHEMA_NAME!r}, got {doc['schema']!r}")

    seeds = _typed(doc, "", "seeds", list, [0])
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        _fail("seeds", f"expected a non-empty list of non-negative integers, got {seeds!r}")
    if len(set(seeds)) != len(seeds):
        _fail("seeds", f"duplicate seeds in {seeds}")

    st = doc["structures"]
    _check_keys(st, "structures", (), ("presets", "families", "overrides", "custom"))
    presets = _typed(st, "structures", "presets", list, [])
    for i, pid in enumerate(presets):
        if pid not in PRESET_IDS:
            _fail(f"structures.presets[{i}]", f"unknown preset {pid!r}")
    families = _typed(st, "structures", "families", list, ["vit"])
    for i, fam in enumerate(families):
        if fam not in ("vit", "vmlp"):
            _fail(f"structures.families[{i}]", f"unknown family {fam!r}")
    overrides = _typed(st, "structures", "overrides", dict, {})
    allowed_over = ("image", "patch", "embed_dim", "heads", "mlp_ratio", "classes", "stage_layers")
    _check_keys(overrides, "structures.overrides", (), allowed_over)
    custom = _typed(st, "structures", "custom", list, [])
    norm_custom = []
    for i, entry in enumerate(custom):
        _check_keys(entry, f"structures.custom[{i}]", ("name", "spec"), ())
        name = _typed(entry, f"structures.custom[{i}]", "name", str)
        spec = _typed(entry, f"structures.custom[{i}]", "spec", dict)
        known = set(StructureSpec.__dataclass_fields__)
        unknown = set(spec) - known
        if unknown:
            _fail(f"structures.custom[{i}].spec", f"unknown fields {sorted(unknown)}")
        norm_custom.append({"name": name, "spec": spec})
    if not presets and not norm_custom:
        _fail("structures", "need at least one preset or custom structure")

    ds = doc["dataset"]
    kind = _typed(ds, "dataset", "kind", str)
    if kind == "synthetic":
        _check_keys(ds, "dataset", ("kind",),
                    ("side", "count", "noise_std", "low_freq", "high_freq", "amplitude",
                     "train_fraction", "seed", "normalize"))
        norm_ds = {
            "kind": "synthetic",
            "side": _typed(ds, "dataset", "side", int, 8),
            "count": _typed(ds, "dataset", "count", int, 512),
            "noise_std": _typed(ds, "dataset", "noise_std", float, 0.1),
            "low_freq": _typed(ds, "dataset", "low_freq", int, 1),
            "high_freq": _typed(ds, "dataset", "high_freq", int, 3),
            "amplitude": _typed(ds, "dataset", "amplitude", float, 0.25),
            "train_fraction": _typed(ds, "dataset", "train_fraction", float, 0.75),
            "seed": _typed(ds, "dataset", "seed", int, 0),
            "normalize": _typed(ds, "dataset", "normalize", bool, False),
        }
        if not 0.0 < norm_ds["train_fraction"] < 1.0:
            _fail("dataset.train_fraction", f"must lie in (0, 1), got {norm_ds['train_fraction']}")
    elif kind == "cifar10":
        _check_keys(ds, "dataset", ("kind", "train"), ("test", "limit", "normalize"))
        train = _typed(ds, "dataset", "train", list)
        test = _typed(ds, "dataset", "test", list, [])
        if not train or not all(isinstance(p, str) for p in train):
            _fail("dataset.train", "expected a non-empty list of file paths")
        if not all(isinstance(p, str) for p in test):
            _fail("dataset.test", "expected a list of file paths")
        norm_ds = {
            "kind": "cifar10",
            "train": train,
            "test": test,
            "limit": _typed(ds, "dataset", "limit", int, None),
            "normalize": _typed(ds, "dataset", "normalize", bool, True),
        }
    else:
        _fail("dataset.kind", f"unknown dataset kind {kind!r}")

    tr = doc.get("training") or {}
    _check_keys(tr, "training",
                (), ("mode", "optimizer", "lr", "momentum", "epochs", "batch_size", "attack"))
    mode = _typed(tr, "training", "mode", str, "natural")
    if mode not in ("natural", "adversarial"):
        _fail("training.mode", f"expected 'natural' or 'adversarial', got {mode!r}")
    optimizer = _typed(tr, "training", "optimizer", str, "adam")
    if optimizer not in OPTIMIZERS:
        _fail("training.optimizer", f"expected one of {OPTIMIZERS}, got {optimizer!r}")
    norm_tr = {
        "mode": mode,
        "optimizer": optimizer,
        "lr": _typed(tr, "training", "lr", float, 1e-3),
        "momentum": _typed(tr, "training", "momentum", float, 0.9),
        "epochs": _typed(tr, "training", "epochs", int, 1),
        "batch_size": _typed(tr, "training", "batch_size", int, 32),
        "attack": None,
    }
    if mode == "adversarial":
        atk = _attack_spec(tr.get("attack") or {}, "training.attack")
        norm_tr["attack"] = atk.to_dict()
    elif "attack" in tr and tr["attack"] is not None:
        _fail("training.attack", "only valid when training.mode is 'adversarial'")

    ev = doc.get("evaluation") or {}
    _check_keys(ev, "evaluation", (), ("subset", "attacks", "batch_size"))
    attacks_doc = _typed(ev, "evaluation", "attacks", list, None)
    if attacks_doc is None:
        attacks_doc = [
            {"name": "pgd", "method": "pgd", "epsilon": PGD_EPSILON,
             "steps": 10, "step_size": 0.01, "restarts": 5, "init": "uniform"},
            {"name": "square", "method": "square", "epsilon": PGD_EPSILON, "queries": 200},
        ]
    norm_attacks = []
    seen = set()
    for i, entry in enumerate(attacks_doc):
        atk = _eval_attack(entry, f"evaluation.attacks[{i}]")
        if atk.name in seen:
            _fail(f"evaluation.attacks[{i}].name", f"duplicate attack name {atk.name!r}")
        seen.add(atk.name)
        d = {"name": atk.name, "method": atk.method, "queries": atk.queries}
        d.update(atk.spec.to_dict())
        norm_attacks.append(d)
    norm_ev = {
        "subset": _typed(ev, "evaluation", "subset", int, 256),
        "batch_size": _typed(ev, "evaluation", "batch_size", int, 128),
        "attacks": norm_attacks,
    }

    dg = doc.get("diagnostics") or {}
    _check_keys(dg, "diagnostics", (), ("heatmap", "lipschitz"))
    hm = dg.get("heatmap") or {}
    _check_keys(hm, "diagnostics.heatmap", (), ("enabled", "norm", "samples", "scale"))
    lp = dg.get("lipschitz") or {}
    _check_keys(lp, "diagnostics.lipschitz",
                (), ("enabled", "epsilon", "steps", "restarts", "step_size", "samples"))
    norm_dg = {
        "heatmap": {
            "enabled": _typed(hm, "diagnostics.heatmap", "enabled", bool, False),
            "norm": _typed(hm, "diagnostics.heatmap", "norm", float, 4.0),
            "samples": _typed(hm, "diagnostics.heatmap", "samples", int, 256),
            "scale": _typed(hm, "diagnostics.heatmap", "scale", int, 8),
        },
        "lipschitz": {
            "enabled": _typed(lp, "diagnostics.lipschitz", "enabled", bool, False),
            "epsilon": _typed(lp, "diagnostics.lipschitz", "epsilon", float, PGD_EPSILON),
            "steps": _typed(lp, "diagnostics.lipschitz", "steps", int, 50),
            "restarts": _typed(lp, "diagnostics.lipschitz", "restarts", int, 3),
            "step_size": _typed(lp, "diagnostics.lipschitz", "step_size", float, None),
            "samples": _typed(lp, "diagnostics.lipschitz", "samples", int, 16),
        },
    }

    pr = doc.get("pruning") or {}
    _check_keys(pr, "pruning", (), ("fractions",))
    fractions = _typed(pr, "pruning", "fractions", list, [])
    norm_fr = []
    for i, f in enumerate(fractions):
        if isinstance(f, bool) or not isinstance(f, (int, float)) or not 0.0 <= f <= 1.0:
            _fail(f"pruning.fractions[{i}]", f"expected a number in [0, 1], got {f!r}")
        norm_fr.append(float(f))
    if any(b <= a for a, b in zip(norm_fr, norm_fr[1:])):
        _fail("pruning.fractions", f"must be strictly increasing, got {norm_fr}")

    return {
        "schema": SCHEMA_NAME,
        "seeds": list(seeds),
        "structures": {
            "presets": list(presets),
            "families": list(families),
            "overrides": dict(overrides),
            "custom": norm_custom,
        },
        "dataset": norm_ds,
        "training": norm_tr,
        "evaluation": norm_ev,
        "diagnostics": norm_dg,
        "pruning": {"fractions": norm_fr},
    }


def load_manifest(path) -> dict:
    """Read, parse, and validate a manifest file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestError(f"manifest {path}: top level must be an object")
    return validate_manifest(doc)


def manifest_hash(normalized: dict) -> str:
    """sha256 of the canonical JSON encoding of a normalized manifest."""
    return sha256_of_json(normalized)


def eval_attacks_from(normalized: dict) -> list[EvalAttack]:
    out = []
    for d in normalized["evaluation"]["attacks"]:
        spec = AttackSpec(
            epsilon=d["epsilon"], steps=d["steps"], step_size=d["step_size"],
            restarts=d["restarts"], init=d["init"],
        )
        out.append(EvalAttack(name=d["name"], method=d["method"], spec=spec,
                              queries=d["queries"]))
    return out
