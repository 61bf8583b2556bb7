"""Proofs of federated unlearning built from per-sample gradient differences."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from .fedsim import ClientDataset, ModelSpec, ParamVector, per_sample_gradients


@dataclass(frozen=True)
class PoFURecord:
    """One client's proof: row ``j`` is the gradient difference of its
    ``j``-th forgotten sample.  Carries no images or labels."""

    client_id: int
    rows: np.ndarray
    layout_id: str
    scenario: str = ""
    defense: dict = field(default_factory=lambda: {"id": "none"})
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if rows.ndim != 2:
            raise ValueError("PoFU rows must be a 2-D array")
        if not np.all(np.isfinite(rows)):
            raise ValueError("PoFU contains non-finite values")
        object.__setattr__(self, "rows", rows)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def with_rows(self, rows: np.ndarray, defense: dict) -> "PoFURecord":
        return PoFURecord(self.client_id, rows, self.layout_id, self.scenario, defense, dict(self.meta))


@dataclass(frozen=True)
class VerificationVerdict:
    norms: np.ndarray
    passed: np.ndarray
    tau: float

    @property
    def overall(self) -> bool:
        return bool(np.all(self.passed))

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "overall": self.overall,
            "n_pass": int(self.passed.sum()),
            "n_rows": int(len(self.passed)),
            "max_norm": float(self.norms.max()) if len(self.norms) else 0.0,
        }


def gradient_differences(original: ParamVector, unlearned: ParamVector, spec: ModelSpec, images, labels) -> np.ndarray:
    if original.layout_id != unlearned.layout_id:
        raise ValueError("original and unlearned parameters use different layouts")
    g0 = per_sample_gradients(original, spec, images, labels)
    g1 = per_sample_gradients(unlearned, spec, images, labels)
    g0 -= g1
    return g0


def compute_pofu(original: ParamVector, unlearned: ParamVector, spec: ModelSpec, forgotten: ClientDataset,
                 scenario: str = "") -> PoFURecord:
    if len(forgotten) == 0:
        raise ValueError(f"client {forgotten.client_id} has no forgotten samples")
    rows = gradient_differences(original, unlearned, spec, forgotten.images, forgotten.labels)
    return PoFURecord(forgotten.client_id, rows, spec.layout_id, scenario)


def verify_pofu(record: PoFURecord, tau: float) -> VerificationVerdict:
    """Row j passes iff its L2 norm is at most ``tau`` (inclusive)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    norms = np.linalg.norm(record.rows.astype(np.float64), axis=1)
    return VerificationVerdict(norms, norms <= tau, float(tau))


def save_pofu(path: str | Path, record: PoFURecord) -> Path:
    header = {
        "client_id": record.client_id,
        "n": record.n,
        "d": record.d,
        "scenario": record.scenario,
        "defense": record.defense,
        "layout": record.layout_id,
        "meta": record.meta,
    }
    return binio.write(path, binio.MAGIC_POFU, header, record.rows)


def load_pofu(path: str | Path) -> PoFURecord:
    header, payload = binio.read(path, binio.MAGIC_POFU)
    n, d = header["n"], header["d"]
    if payload.size != n * d:
        raise binio.FormatError(f"{path}: expected {n}x{d} values, found {payload.size}")
    return PoFURecord(header["client_id"], payload.reshape(n, d), header["layout"], header["scenario"],
                      header["defense"], header.get("meta", {}))
