"""Command-line front end.

Every subcommand takes the same manifest file; the subcommand picks which
stage of the pipeline to run. Errors print a single machine-parsable line to
stderr (``error: <category>: <detail>``) and exit with status 2; success exits
0. All artifacts are written atomically under --out.
"""

from __future__ import annotations

import argparse
import sys

from .data import DataFormatError
from .harness import ALL_STAGES, run_grid, structure_cells
from .manifest import ManifestError, load_manifest, manifest_hash
from .structures import StructureError
from .util import canonical_json

_STAGE_OF = {
    "train": frozenset(),
    "attack": frozenset({"attack"}),
    "heatmap": frozenset({"heatmap"}),
    "lipschitz": frozenset({"lipschitz"}),
    "prune": frozenset({"attack", "prune"}),
    "grid": ALL_STAGES,
}


class CliError(Exception):
    def __init__(self, category: str, detail: str):
        super().__init__(f"error: {category}: {detail}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robustgrid",
        description="Train, attack, and diagnose vision-model structure grids.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("validate", "check the manifest and print every resolved structure"),
        ("train", "train all grid cells and write checkpoints"),
        ("attack", "evaluate clean and adversarial accuracy"),
        ("heatmap", "render frequency-sensitivity heatmaps"),
        ("lipschitz", "estimate local Lipschitz lower bounds"),
        ("prune", "run the magnitude-pruning sparsity sweep"),
        ("grid", "run the full pipeline: train, attack, diagnostics, pruning"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--manifest", required=True, help="path to the manifest JSON file")
        if name != "validate":
            p.add_argument("--out", default="out", help="artifact directory (default: out)")
            p.add_argument("--jobs", type=int, default=1,
                           help="worker processes for the grid (default: 1)")
        p.add_argument("--seed-override", type=int, default=None,
                       help="replace the manifest's seed list with this single seed")
    return parser


def _load(args) -> dict:
    try:
        normalized = load_manifest(args.manifest)
    except ManifestError as exc:
        raise CliError("manifest", str(exc)) from exc
    if args.seed_override is not None:
        if args.seed_override < 0:
            raise CliError("manifest", f"--seed-override must be >= 0, got {args.seed_override}")
        normalized["seeds"] = [args.seed_override]
    return normalized


def _cmd_validate(args) -> int:
    normalized = _load(args)
    print(f"manifest {manifest_hash(normalized)}")
    rejected = []
    for cell in structure_cells(normalized):
        if cell.spec is None:
            print(f"rejected {cell.name} {cell.family} rule={cell.rejection}")
            rejected.append(cell)
        else:
            print(f"ok {cell.name} {cell.family} {canonical_json(cell.spec.to_dict())}")
    if rejected:
        first = rejected[0]
        raise CliError(
            "structure",
            f"{len(rejected)} structure(s) rejected; first: "
            f"{first.name} {first.family} rule={first.rejection}",
        )
    return 0


def _require_stage_config(command: str, normalized: dict) -> None:
    if command == "heatmap" and not normalized["diagnostics"]["heatmap"]["enabled"]:
        raise CliError("manifest", "diagnostics.heatmap.enabled is false; nothing to do")
    if command == "lipschitz" and not normalized["diagnostics"]["lipschitz"]["enabled"]:
        raise CliError("manifest", "diagnostics.lipschitz.enabled is false; nothing to do")
    if command == "prune" and not normalized["pruning"]["fractions"]:
        raise CliError("manifest", "pruning.fractions is empty; nothing to do")


def _cmd_run(args) -> int:
    normalized = _load(args)
    _require_stage_config(args.command, normalized)
    try:
        out = run_grid(normalized, args.out, jobs=args.jobs, stages=_STAGE_OF[args.command])
    except (StructureError, DataFormatError, OSError, ValueError) as exc:
        if isinstance(exc, StructureError):
            category = "structure"
        elif isinstance(exc, DataFormatError):
            category = "dataset"
        elif isinstance(exc, OSError):
            category = "io"
        else:
            category = "run"
        raise CliError(category, str(exc)) from exc
    print(f"manifest {manifest_hash(normalized)}")
    print(f"results {out['results']}")
    if out["pruning"] is not None:
        print(f"pruning {out['pruning']}")
    print(f"timings {out['timings']}")
    for row in out["rows"]:
        if row["status"] != "ok":
            print(f"{row['status']} {row['structure']} {row['family']} "
                  f"seed={row['seed']} detail={row['detail']}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            return _cmd_validate(args)
        return _cmd_run(args)
    except CliError as exc:
        print(exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
