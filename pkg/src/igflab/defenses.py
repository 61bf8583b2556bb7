"""Transforms applied by an unlearned client to its PoFU rows before release.

All functions take a 1-D vector and return a new float32 vector; randomized
ones are pure functions of their ``seed``.  Arithmetic runs in float64.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .pofu import PoFURecord

METHODS = ("none", "sign", "prune", "gauss", "perturb", "smooth", "ortho")
MAX_ORTHO_ATTEMPTS = 8


class DefenseError(ValueError):
    pass


def _f64(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).ravel()


def sign_compress(v, scale: float = 1.0) -> np.ndarray:
    """Elementwise sign (-1, 0, 1), optionally multiplied by ``scale``."""
    out = np.sign(_f64(v))
    if scale != 1.0:
        out *= scale
    return out.astype(np.float32)


def prune(v, fraction: float) -> np.ndarray:
    """Zero all but the ceil((1 - fraction) * d) largest-magnitude entries.
    Ties go to the lower index."""
    if not 0.0 <= fraction < 1.0:
        raise DefenseError("prune fraction must be in [0, 1)")
    x = _f64(v)
    keep = min(len(x), math.ceil(round((1.0 - fraction) * len(x), 9)))
    order = np.argsort(-np.abs(x), kind="stable")
    mask = np.zeros(len(x), dtype=bool)
    mask[order[:keep]] = True
    return (x * mask).astype(np.float32)


def gauss_noise(v, sigma: float, seed: int) -> np.ndarray:
    if sigma < 0:
        raise DefenseError("sigma must be non-negative")
    x = _f64(v)
    noise = np.random.default_rng(seed).standard_normal(len(x))
    return (x + sigma * noise).astype(np.float32)


def perturb(v, scale: float, factor: float, seed: int) -> np.ndarray:
    """Add standard normal noise scaled by ``scale`` and gated elementwise by ``|v| * factor``."""
    if scale < 0 or factor < 0:
        raise DefenseError("scale and factor must be non-negative")
    x = _f64(v)
    noise = np.random.default_rng(seed).standard_normal(len(x))
    return (x + (noise * scale) * (np.abs(x) * factor)).astype(np.float32)


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; the window is truncated at the ends."""
    n = len(x)
    lo = np.maximum(np.arange(n) - (window - 1) // 2, 0)
    hi = np.minimum(np.arange(n) + window // 2 + 1, n)
    csum = np.concatenate([[0.0], np.cumsum(x)])
    return (csum[hi] - csum[lo]) / (hi - lo)


def smooth(v, window: int, alpha: float) -> np.ndarray:
    x = _f64(v)
    if not 1 <= window <= max(len(x), 1):
        raise DefenseError(f"window must be in [1, {len(x)}]")
    if not 0.0 <= alpha <= 1.0:
        raise DefenseError("alpha must be in [0, 1]")
    if window == 1 or alpha == 0.0:
        return x.astype(np.float32)
    return ((1.0 - alpha) * x + alpha * moving_average(x, window)).astype(np.float32)


def orthogonal_obfuscate(v, seed: int) -> np.ndarray:
    """Replace ``v`` by a random direction orthogonal to it with the same L2 norm.

    A Gaussian vector ``r`` has its component along ``v`` removed
    (one Gram-Schmidt step) and is rescaled to ``||v||``.
    """
    x = _f64(v)
    vv = float(x @ x)
    if vv == 0.0:
        raise DefenseError("cannot obfuscate zero proof")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_ORTHO_ATTEMPTS):
        r = rng.standard_normal(len(x))
        u = r - (float(r @ x) / vv) * x
        # second pass removes the rounding residue of the first
        u -= (float(u @ x) / vv) * x
        nu = float(np.linalg.norm(u))
        if nu > 1e-6 * float(np.linalg.norm(r)):
            return (u * (math.sqrt(vv) / nu)).astype(np.float32)
    raise DefenseError("orthogonalization degenerated; random draws stayed parallel to the proof")


@dataclass
class DefenseConfig:
    method: str = "none"
    prune_fraction: float = 0.9
    sigma: float = 0.1
    perturb_scale: float = 0.01
    perturb_factor: float = 1.0
    smooth_window: int = 5
    smooth_alpha: float = 0.1
    sign_scale: float = 1.0
    seed: int = 1234

    def __post_init__(self):
        if self.method not in METHODS:
            raise DefenseError(f"unknown defense {self.method!r}")
        if not 0.0 <= self.prune_fraction < 1.0:
            raise DefenseError("prune fraction must be in [0, 1)")
        if self.sigma < 0:
            raise DefenseError("sigma must be non-negative")
        if self.smooth_window < 1:
            raise DefenseError("smoothing window must be >= 1")
        if not 0.0 <= self.smooth_alpha <= 1.0:
            raise DefenseError("smoothing alpha must be in [0, 1]")

    def tag(self) -> dict:
        """Self-describing header entry: the method plus only the parameters it uses."""
        used = {
            "none": (),
            "sign": ("sign_scale",),
            "prune": ("prune_fraction",),
            "gauss": ("sigma", "seed"),
            "perturb": ("perturb_scale", "perturb_factor", "seed"),
            "smooth": ("smooth_window", "smooth_alpha"),
            "ortho": ("seed",),
        }[self.method]
        params = asdict(self)
        return {"id": self.method, **{k: params[k] for k in used}}


def apply_vector(v, config: DefenseConfig, seed: int) -> np.ndarray:
    m = config.method
    if m == "none":
        return np.asarray(v, dtype=np.float32).copy()
    if m == "sign":
        return sign_compress(v, config.sign_scale)
    if m == "prune":
        return prune(v, config.prune_fraction)
    if m == "gauss":
        return gauss_noise(v, config.sigma, seed)
    if m == "perturb":
        return perturb(v, config.perturb_scale, config.perturb_factor, seed)
    if m == "smooth":
        return smooth(v, config.smooth_window, config.smooth_alpha)
    return orthogonal_obfuscate(v, seed)


def apply_rows(rows: np.ndarray, config: DefenseConfig) -> np.ndarray:
    """Row ``j`` uses seed ``config.seed + j``."""
    return np.stack([apply_vector(r, config, config.seed + j) for j, r in enumerate(rows)]) if len(rows) else rows


def apply_defense(record: PoFURecord, config: DefenseConfig) -> PoFURecord:
    if record.defense.get("id", "none") != "none":
        raise DefenseError(f"record already carries defense {record.defense['id']!r}")
    return record.with_rows(apply_rows(record.rows, config), config.tag())
