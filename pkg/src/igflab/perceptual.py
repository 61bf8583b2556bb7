"""Fixed feature extractor used by the perceptual loss and by LPIPS scoring."""
from __future__ import annotations

import logging
from pathlib import Path

import torch
from torch import nn

logger = logging.getLogger(__name__)

VGG16_FILE = "vgg16-397923af.pth"
VGG16_LAYERS = (3, 8, 15)  # relu1_2, relu2_2, relu3_3
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class ExtractorUnavailable(RuntimeError):
    pass


def vgg16_weights_path() -> Path:
    return Path(torch.hub.get_dir()) / "checkpoints" / VGG16_FILE


class PerceptualExtractor(nn.Module):
    """Returns a list of intermediate feature maps.

    ``backbone``:
      * ``vgg16`` - ImageNet VGG16 relu1_2/relu2_2/relu3_3; needs the
        torchvision weights file in the torch hub cache.
      * ``random`` - seeded random 3-stage conv net (offline fallback).
      * ``auto`` - vgg16 when the weights are cached, otherwise random.

    Single-channel inputs are replicated to three channels.
    """

    def __init__(self, backbone: str = "auto", seed: int = 0, widths=(16, 32, 64)):
        super().__init__()
        if backbone == "auto":
            backbone = "vgg16" if vgg16_weights_path().exists() else "random"
        self.backbone = backbone
        if backbone == "vgg16":
            self.stages = self._vgg16()
        elif backbone == "random":
            self.stages = self._random(seed, widths)
        else:
            raise ValueError(f"unknown perceptual backbone {backbone!r}")
        self.seed = seed
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def is_fallback(self) -> bool:
        return self.backbone == "random"

    def describe(self) -> dict:
        return {"backbone": self.backbone, "seed": self.seed if self.is_fallback else None,
                "layers": len(self.stages)}

    @staticmethod
    def _vgg16() -> nn.ModuleList:
        path = vgg16_weights_path()
        if not path.exists():
            raise ExtractorUnavailable(
                f"VGG16 weights not found at {path}; use the seeded fallback extractor (backbone='random')"
            )
        from torchvision.models import vgg16

        net = vgg16()
        net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        feats = net.features
        stages, start = [], 0
        for end in VGG16_LAYERS:
            stages.append(nn.Sequential(*feats[start : end + 1]))
            start = end + 1
        return nn.ModuleList(stages)

    @staticmethod
    def _random(seed: int, widths) -> nn.ModuleList:
        gen = torch.Generator().manual_seed(seed)
        stages, prev = [], 3
        for i, ch in enumerate(widths):
            conv = nn.Conv2d(prev, ch, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                fan_in = prev * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            stages.append(nn.Sequential(conv, nn.ReLU()))
            prev = ch
        return nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def feature_distance(extractor: PerceptualExtractor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image mean over layers of the mean squared feature difference."""
    fa, fb = extractor(a), extractor(b)
    per_layer = [((x - y) ** 2).flatten(1).mean(1) for x, y in zip(fa, fb)]
    return torch.stack(per_layer).mean(0)
