"""Auxiliary gradient-difference collection (auditor side)."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import binio
from ..fedsim import ModelSpec, ParamVector
from ..pofu import gradient_differences


@dataclass(frozen=True)
class GradDiffMatrix:
    rows: np.ndarray
    layout_id: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if rows.ndim != 2:
            raise ValueError("gradient-difference matrix must be 2-D")
        if not np.all(np.isfinite(rows)):
            raise ValueError("gradient differences contain non-finite values")
        object.__setattr__(self, "rows", rows)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows.shape


def collect_aux_gradients(original: ParamVector, unlearned: ParamVector, spec: ModelSpec, images, labels,
                          provenance: dict | None = None) -> GradDiffMatrix:
    """Query both models' per-sample gradients on the auxiliary set and subtract."""
    if len(labels) == 0:
        raise ValueError("auxiliary dataset is empty")
    rows = gradient_differences(original, unlearned, spec, images, labels)
    return GradDiffMatrix(rows, spec.layout_id, dict(provenance or {}))


def save_grad_matrix(path: str | Path, matrix: GradDiffMatrix) -> Path:
    m, d = matrix.shape
    header = {"m": m, "d": d, "layout": matrix.layout_id, "provenance": matrix.provenance}
    return binio.write(path, binio.MAGIC_GRADS, header, matrix.rows)


def load_grad_matrix(path: str | Path) -> GradDiffMatrix:
    header, payload = binio.read(path, binio.MAGIC_GRADS)
    return GradDiffMatrix(payload.reshape(header["m"], header["d"]), header["layout"], header["provenance"])
