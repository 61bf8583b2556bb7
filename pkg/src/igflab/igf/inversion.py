"""Pixel-level inversion network mapping reduced gradient differences to images."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .. import binio
from ..perceptual import PerceptualExtractor, feature_distance

logger = logging.getLogger(__name__)


class InversionDiverged(RuntimeError):
    """Training hit a non-finite loss; ``model`` holds the last good weights."""

    def __init__(self, message, model=None, epoch=None):
        super().__init__(message)
        self.model = model
        self.epoch = epoch


@dataclass(frozen=True)
class InversionModelSpec:
    input_dim: int
    out_shape: tuple[int, int, int]
    seed_channels: int = 256
    seed_size: int = 4
    widths: tuple[int, ...] = (128, 64, 32)
    beta: float = 1.0
    input_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "out_shape", tuple(int(v) for v in self.out_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        side = self.seed_size * 2 ** len(self.widths)
        _, h, w = self.out_shape
        if side < h or side < w:
            raise ValueError(f"{len(self.widths)} upsampling stages from {self.seed_size} reach {side} < {(h, w)}")

    @property
    def canvas(self) -> int:
        return self.seed_size * 2 ** len(self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["out_shape"] = list(self.out_shape)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InversionModelSpec":
        return cls(**{**d, "out_shape": tuple(d["out_shape"]), "widths": tuple(d["widths"])})


class InversionNet(nn.Module):
    """linear -> reshape to a seed map -> [conv3x3, BN, ReLU, PixelShuffle(2)]* -> conv1x1 -> sigmoid -> center crop."""

    def __init__(self, spec: InversionModelSpec):
        super().__init__()
        self.spec = spec
        s, c0 = spec.seed_size, spec.seed_channels
        self.fc = nn.Linear(spec.input_dim, c0 * s * s)
        blocks, prev = [], c0
        for ch in spec.widths:
            blocks += [nn.Conv2d(prev, ch * 4, 3, padding=1), nn.BatchNorm2d(ch * 4), nn.ReLU(), nn.PixelShuffle(2)]
            prev = ch
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv2d(prev, spec.out_shape[0], 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        s = self.spec
        x = self.fc(z * s.input_scale).view(-1, s.seed_channels, s.seed_size, s.seed_size)
        x = torch.sigmoid(self.head(self.blocks(x)))
        _, h, w = s.out_shape
        top, left = (s.canvas - h) // 2, (s.canvas - w) // 2
        return x[:, :, top : top + h, left : left + w]


def composite_loss(recon: torch.Tensor, target: torch.Tensor, beta: float,
                   extractor: PerceptualExtractor | None = None) -> torch.Tensor:
    """Mean squared pixel error plus ``beta`` times the perceptual feature distance."""
    loss = F.mse_loss(recon, target)
    if beta > 0:
        if extractor is None:
            raise ValueError("beta > 0 needs a perceptual extractor")
        loss = loss + beta * feature_distance(extractor, recon, target).mean()
    return loss


@dataclass
class TrainedInversion:
    model: InversionNet
    spec: InversionModelSpec
    loss_curve: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __call__(self, z) -> np.ndarray:
        self.model.eval()
        z = torch.as_tensor(np.asarray(z, dtype=np.float32))
        out = []
        with torch.no_grad():
            for s in range(0, len(z), 512):
                out.append(self.model(z[s : s + 512]).clamp(0.0, 1.0).numpy())
        return np.concatenate(out) if out else np.empty((0, *self.spec.out_shape), np.float32)


def train_inversion(spec: InversionModelSpec, inputs, images, *, lr: float = 1e-4, batch_size: int = 256,
                    epochs: int = 100, seed: int = 1234, extractor: PerceptualExtractor | None = None,
                    normalize_inputs: bool = True) -> TrainedInversion:
    """Adam on the composite loss.  Deterministic for a given ``seed``.

    With ``normalize_inputs`` the spec's ``input_scale`` is set to the
    reciprocal RMS of the training inputs so the first layer sees unit-scale
    features regardless of the gradient magnitudes.
    """
    z = torch.as_tensor(np.asarray(inputs, dtype=np.float32))
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if len(z) != len(x):
        raise ValueError("inputs and images must be aligned one to one")
    if z.shape[1] != spec.input_dim or tuple(x.shape[1:]) != spec.out_shape:
        raise ValueError("inputs/images do not match the inversion spec")
    if normalize_inputs:
        rms = float(torch.sqrt((z.double() ** 2).mean()))
        spec = replace(spec, input_scale=1.0 / rms if rms > 0 else 1.0)
    if spec.beta > 0 and extractor is None:
        extractor = PerceptualExtractor("auto")

    torch.manual_seed(seed)
    model = InversionNet(spec)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    curve: list[float] = []
    last_good = copy.deepcopy(model.state_dict())
    for epoch in range(epochs):
        model.train()
        order = torch.randperm(len(z), generator=gen)
        total, count = 0.0, 0
        for s in range(0, len(z), batch_size):
            idx = order[s : s + batch_size]
            if len(idx) < 2:  # batch norm needs two samples
                continue
            loss = composite_loss(model(z[idx]), x[idx], spec.beta, extractor)
            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                raise InversionDiverged(f"non-finite loss at epoch {epoch + 1}", model=model, epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        curve.append(total / max(count, 1))
        last_good = copy.deepcopy(model.state_dict())
        if epoch == 0 or (epoch + 1) % 10 == 0 or epoch + 1 == epochs:
            logger.info("inversion epoch %d/%d loss %.5f", epoch + 1, epochs, curve[-1])
    model.eval()
    cfg = {"lr": lr, "batch_size": batch_size, "epochs": epochs, "seed": seed,
           "perceptual": extractor.describe() if extractor is not None else None}
    return TrainedInversion(model, spec, curve, cfg)


@dataclass(frozen=True)
class ReconBatch:
    images: np.ndarray
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "images", np.clip(np.asarray(self.images, dtype=np.float32), 0.0, 1.0))

    def __len__(self):
        return len(self.images)


def reconstruct(inversion: TrainedInversion, reducer, record, source: str = "") -> ReconBatch:
    """Reduce every PoFU row with ``reducer`` and invert the whole batch in one pass."""
    rows = getattr(record, "rows", record)
    layout = getattr(record, "layout_id", None)
    reducer_layout = getattr(reducer, "layout_id", "")
    if layout and reducer_layout and layout != reducer_layout:
        raise ValueError(f"PoFU layout {layout} does not match basis layout {reducer_layout}")
    return ReconBatch(inversion(reducer.project(rows)), source)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def _float_state(model: nn.Module) -> list[tuple[str, torch.Tensor]]:
    return [(k, v) for k, v in model.state_dict().items() if v.is_floating_point()]


def save_inversion(path: str | Path, trained: TrainedInversion, meta: dict | None = None) -> Path:
    state = _float_state(trained.model)
    header = {
        "spec": trained.spec.to_dict(),
        "tensors": [[k, list(v.shape)] for k, v in state],
        "config": trained.config,
        "meta": meta or {},
    }
    payload = torch.cat([v.detach().reshape(-1).float() for _, v in state]).numpy()
    return binio.write(path, binio.MAGIC_INVERSION, header, payload)


def load_inversion(path: str | Path) -> TrainedInversion:
    header, payload = binio.read(path, binio.MAGIC_INVERSION)
    spec = InversionModelSpec.from_dict(header["spec"])
    model = InversionNet(spec)
    state = model.state_dict()
    offset = 0
    for name, shape in header["tensors"]:
        n = math.prod(shape)
        state[name] = torch.from_numpy(payload[offset : offset + n].reshape(shape).copy())
        offset += n
    if offset != payload.size:
        raise binio.FormatError(f"{path}: weight count mismatch")
    model.load_state_dict(state)
    model.eval()
    return TrainedInversion(model, spec, [], header["config"])
