"""Artifact files: JSON with a small self-describing header.

Every tool output carries the same envelope so files can be identified,
diffed, and traced back to the configuration that produced them. Keys are
sorted on write, which makes reruns byte-identical, and floats round-trip
exactly through the shortest-repr encoding used by the json module.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

TOOL_VERSION = "0.1.0"


class ArtifactError(ValueError):
    """Raised when a file is missing, malformed, or of the wrong kind."""


def config_hash(config: dict) -> str:
    """Stable 12-hex-digit digest of a JSON-serializable configuration."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def write_artifact(path: str | Path, kind: str, payload: dict, cfg_hash: str = "") -> None:
    doc = {
        "format": f"modeloco/{kind}",
        "version": TOOL_VERSION,
        "config_hash": cfg_hash,
        "payload": payload,
    }
    text = json.dumps(doc, sort_keys=True, indent=1)
    Path(path).write_text(text + "\n")


def read_artifact(path: str | Path, kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"no such file: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path} is not valid JSON: {exc}") from exc
    expected = f"modeloco/{kind}"
    if doc.get("format") != expected:
        raise ArtifactError(f"{path}: expected format {expected}, got {doc.get('format')!r}")
    return doc["payload"]


def array_to_payload(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def array_from_payload(p: dict) -> np.ndarray:
    return np.array(p["data"], dtype=float).reshape(p["shape"])
