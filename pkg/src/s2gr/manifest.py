"""Run manifests: config hash, seed, and input/output digests per artifact.

Manifests contain no timestamps or absolute paths, so two identical runs
produce byte-identical manifest files; comparing their digests is the
bit-reproducibility check.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import MissingArtifactError


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(artifact: str | Path) -> Path:
    artifact = Path(artifact)
    return artifact.with_name(artifact.name + ".manifest.json")


def write_manifest(
    artifact: str | Path,
    command: str,
    config_hash: str,
    seed: int,
    inputs: dict[str, str | Path],
    extra: dict | None = None,
) -> Path:
    artifact = Path(artifact)
    payload = {
        "artifact": artifact.name,
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "inputs": {
            name: {"file": Path(p).name, "sha256": file_digest(p)}
            for name, p in sorted(inputs.items())
        },
        "output_sha256": file_digest(artifact),
    }
    if extra:
        payload.update(extra)
    path = manifest_path(artifact)
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def load_manifest(artifact: str | Path) -> dict:
    path = manifest_path(artifact)
    if not path.exists():
        raise MissingArtifactError(f"manifest not found for {artifact}")
    return json.loads(path.read_text(encoding="utf-8"))


def require_artifact(path: str | Path, producer_command: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(
            f"missing artifact {path.name}: run `{producer_command}` first")
    return path
