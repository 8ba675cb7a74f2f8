"""Portable checkpoint files for named float64 tensors.

Layout (documented contract, stable across platforms):

* Line 1: a UTF-8 JSON object terminated by a single ``\\n``::

      {"format": "spatialmarl-tensors-v1",
       "meta": {...arbitrary JSON metadata...},
       "tensors": [{"name": "...", "rows": r, "cols": c}, ...]}

* Body: for each manifest entry, in order, ``rows * cols`` IEEE-754
  float64 values, little-endian, row-major, with no padding.

Tensor names are unique; ``meta`` carries whatever JSON the writer needs
(step counters, RNG states, config echoes).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_TAG = "spatialmarl-tensors-v1"


class CheckpointError(RuntimeError):
    pass


def save_tensors(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    meta: dict | None = None,
) -> None:
    """Write named 2-D float64 tensors plus JSON metadata to one file."""
    manifest = []
    blobs = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        if a.ndim != 2:
            raise CheckpointError(f"tensor {name!r} must be 2-D, got ndim={a.ndim}")
        manifest.append({"name": name, "rows": a.shape[0], "cols": a.shape[1]})
        blobs.append(a.astype("<f8", copy=False).tobytes(order="C"))
    header = {
        "format": FORMAT_TAG,
        "meta": meta or {},
        "tensors": manifest,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a tensor file back; returns (tensors, meta)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
        if header.get("format") != FORMAT_TAG:
            raise CheckpointError(
                f"{path}: unsupported format tag {header.get('format')!r}"
            )
        tensors: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            rows, cols = int(entry["rows"]), int(entry["cols"])
            raw = fh.read(rows * cols * 8)
            if len(raw) != rows * cols * 8:
                raise CheckpointError(f"{path}: truncated tensor {entry['name']!r}")
            tensors[entry["name"]] = (
                np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)
            )
    return tensors, header.get("meta", {})
