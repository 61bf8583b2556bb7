"""Reconstruction quality metrics: MSE, PSNR and LPIPS."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .perceptual import PerceptualExtractor, feature_distance

PSNR_CAP = 100.0


def _pair(x, x_hat) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return x, x_hat


def mse(x, x_hat) -> float:
    x, x_hat = _pair(x, x_hat)
    return float(np.mean((x - x_hat) ** 2))


def mse_per_image(x, x_hat) -> np.ndarray:
    x, x_hat = _pair(x, x_hat)
    return ((x - x_hat) ** 2).reshape(len(x), -1).mean(axis=1)


def psnr_from_mse(value: float, data_range: float = 1.0) -> float:
    if data_range <= 0:
        raise ValueError("data range must be positive")
    if value <= 0:
        return PSNR_CAP
    return 10.0 * math.log10(data_range**2 / value)


def psnr(x, x_hat, data_range: float = 1.0) -> float:
    return psnr_from_mse(mse(x, x_hat), data_range)


def lpips_per_image(x, x_hat, extractor: PerceptualExtractor, batch: int = 256) -> np.ndarray:
    x, x_hat = _pair(x, x_hat)
    if x.ndim == 3:
        x, x_hat = x[None], x_hat[None]
    out = []
    with torch.no_grad():
        for s in range(0, len(x), batch):
            a = torch.from_numpy(x[s : s + batch].astype(np.float32))
            b = torch.from_numpy(x_hat[s : s + batch].astype(np.float32))
            out.append(feature_distance(extractor, a, b).double().numpy())
    return np.concatenate(out)


def lpips(x, x_hat, extractor: PerceptualExtractor) -> float:
    return float(np.mean(lpips_per_image(x, x_hat, extractor)))


@dataclass
class ReconReport:
    mse: np.ndarray
    psnr: np.ndarray
    psnr_capped: np.ndarray
    lpips: np.ndarray
    fingerprint: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def score(cls, originals, reconstructions, extractor: PerceptualExtractor, data_range: float = 1.0,
              fingerprint: dict | None = None, extra: dict | None = None) -> "ReconReport":
        m = mse_per_image(originals, reconstructions)
        p = np.array([psnr_from_mse(v, data_range) for v in m])
        lp = lpips_per_image(originals, reconstructions, extractor)
        return cls(m, p, m <= 0, lp, dict(fingerprint or {}), dict(extra or {}))

    def __len__(self):
        return len(self.mse)

    def summary(self) -> dict:
        out = {"n": len(self)}
        for name in ("mse", "psnr", "lpips"):
            vals = getattr(self, name)
            out[f"{name}_mean"] = float(np.mean(vals))
            out[f"{name}_std"] = float(np.std(vals))
        out["psnr_capped"] = int(np.sum(self.psnr_capped))
        return out

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fp = json.dumps(self.fingerprint, sort_keys=True, separators=(",", ":"))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "mse", "psnr_db", "psnr_capped", "lpips", "fingerprint"])
            for i in range(len(self)):
                w.writerow([i, repr(float(self.mse[i])), repr(float(self.psnr[i])), int(self.psnr_capped[i]),
                            repr(float(self.lpips[i])), fp])
        return path

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        body = {"summary": self.summary(), "fingerprint": self.fingerprint, **self.extra}
        path.write_text(json.dumps(body, sort_keys=True, indent=2) + "\n")
        return path
