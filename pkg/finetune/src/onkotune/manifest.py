"""Evaluation manifest: map each training epoch to a servable model identifier
so the evaluation harness can be driven once per checkpoint (epoch 0 being the
untuned base model)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence


class ManifestError(Exception):
    pass


def export_eval_manifest(
    checkpoint_dirs: Sequence[str | Path], base_model: str, out_path: str | Path
) -> dict:
    """Write a JSON manifest with one row per epoch, starting at the base model."""
    if not checkpoint_dirs:
        raise ManifestError("no checkpoints to export")
    rows = [{"epoch": 0, "model": base_model, "checkpoint": None}]
    for directory in checkpoint_dirs:
        directory = Path(directory)
        meta_path = directory / "meta.json"
        if not meta_path.exists():
            raise ManifestError(f"checkpoint {directory} is missing meta.json")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        epoch = meta["epoch"]
        rows.append(
            {
                "epoch": epoch,
                "model": f"{base_model}-epoch{epoch}",
                "checkpoint": str(directory),
            }
        )
    rows.sort(key=lambda r: r["epoch"])
    manifest = {"base_model": base_model, "rows": rows}
    Path(out_path).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def load_eval_manifest(path: str | Path) -> dict:
    try:
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if "rows" not in manifest or not isinstance(manifest["rows"], list):
        raise ManifestError(f"{path}: manifest has no rows")
    return manifest
