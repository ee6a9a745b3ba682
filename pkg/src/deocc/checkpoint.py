"""Versioned checkpoint blobs: .npz parameter archive + .json manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ModelMismatchError

FORMAT_VERSION = 1


def save_blob(prefix: str | Path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    np.savez(str(prefix) + ".npz", **arrays)
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    (Path(str(prefix) + ".json")).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_blob(prefix: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    npz_path = Path(str(prefix) + ".npz")
    man_path = Path(str(prefix) + ".json")
    if not npz_path.exists() or not man_path.exists():
        raise ModelMismatchError(f"checkpoint {prefix} not found")
    manifest = json.loads(man_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ModelMismatchError(
            f"checkpoint format {manifest.get('format_version')} != {FORMAT_VERSION}")
    with np.load(npz_path) as z:
        arrays = {k: z[k] for k in z.files}
    return arrays, manifest


def rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen
