"""Reader for the dataset file pair: JSON manifest plus float64 binary block.

This package talks to the controller toolkit only through its published file
formats, so the reader is implemented here against the documented layout:
rows of `[x0 | u_0 ... u_{N-1} | cost]` in little-endian float64, with
shapes, counts, and the mandatory scaling block in the manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np


@dataclass
class TrainingData:
    states: np.ndarray     # (rows, n_x)
    labels: np.ndarray     # (rows, n_u * N) flat input sequences
    costs: np.ndarray      # (rows,)
    manifest: dict

    @property
    def n_x(self) -> int:
        return self.manifest["n_x"]

    @property
    def n_u(self) -> int:
        return self.manifest["n_u"]

    @property
    def horizon(self) -> int:
        return self.manifest["N"]

    def scaling(self):
        s = self.manifest["scaling"]
        return (np.asarray(s["in_offset"]), np.asarray(s["in_scale"]),
                np.asarray(s["out_offset"]), np.asarray(s["out_scale"]))


def load_dataset(basepath) -> TrainingData:
    base = str(basepath)
    if base.endswith(".json") or base.endswith(".bin"):
        base = base.rsplit(".", 1)[0]
    with open(base + ".json") as fh:
        manifest = json.load(fh)
    for key in ("n_x", "n_u", "N", "row_count", "scaling", "data_file"):
        if key not in manifest:
            raise ValueError(f"dataset manifest is missing {key!r}")
    bin_path = os.path.join(os.path.dirname(base) or ".", manifest["data_file"])
    raw = np.fromfile(bin_path, dtype="<f8")
    n_x = manifest["n_x"]
    width = n_x + manifest["n_u"] * manifest["N"] + 1
    rows = manifest["row_count"]
    if raw.size != rows * width:
        raise ValueError(
            f"binary block has {raw.size} doubles, expected {rows}x{width}"
        )
    data = raw.reshape(rows, width)
    return TrainingData(
        states=data[:, :n_x],
        labels=data[:, n_x:-1],
        costs=data[:, -1],
        manifest=manifest,
    )


def validation_split(n_rows: int, fraction: float = 0.1) -> tuple[slice, slice]:
    """Deterministic split: the last rows by draw order are validation."""
    n_val = max(1, int(round(fraction * n_rows)))
    return slice(0, n_rows - n_val), slice(n_rows - n_val, n_rows)
