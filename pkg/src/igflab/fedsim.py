"""Federated training simulator.

Models are handled functionally: every trainable tensor lives in one flat
float32 vector (``ParamVector``) whose layout is the concatenation of the
module's parameters in declaration order.  Gradients, SGD steps and
aggregation all operate on that vector, so the gradient-difference
arithmetic downstream never has to care about module structure.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call, grad, vmap

from . import binio

logger = logging.getLogger(__name__)

ARCHITECTURES = ("convnet", "resnet-small", "mlp")
AGGREGATORS = ("fedavg", "fedprox", "fedopt")


class GradientError(RuntimeError):
    pass


def set_deterministic(threads: int = 1) -> None:
    """Pin torch to a single-threaded deterministic mode."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


# --------------------------------------------------------------------------
# Models
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; ``d`` is derived from the built module.

    ``widths`` is architecture specific: conv channels + hidden units for
    ``convnet``, stage channels for ``resnet-small``, hidden layer sizes for
    ``mlp`` (empty tuple gives a linear softmax classifier).
    """

    arch: str
    input_shape: tuple[int, int, int]
    num_classes: int
    widths: tuple[int, ...] = ()

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def d(self) -> int:
        return _layout(self)[1]

    @property
    def layout_id(self) -> str:
        return _layout(self)[0]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["input_shape"] = list(self.input_shape)
        out["widths"] = list(self.widths)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(
            arch=data["arch"],
            input_shape=tuple(data["input_shape"]),
            num_classes=int(data["num_classes"]),
            widths=tuple(data.get("widths", ())),
        )


class ConvNet(nn.Module):
    def __init__(self, in_shape, num_classes, c1=8, c2=16, hidden=64):
        super().__init__()
        c, h, w = in_shape
        self.conv1 = nn.Conv2d(c, c1, 5)
        self.conv2 = nn.Conv2d(c1, c2, 5)
        h = ((h - 4) // 2 - 4) // 2
        w = ((w - 4) // 2 - 4) // 2
        if h < 1 or w < 1:
            raise ValueError(f"input {in_shape} too small for convnet")
        self.fc1 = nn.Linear(c2 * h * w, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = F.relu(self.fc1(x.flatten(1)))
        return self.fc2(x)


class _ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class ResNetSmall(nn.Module):
    """Reduced residual net: stem, one residual block per stage, strided
    transitions between stages, global average pooling.  No normalization
    layers, so per-sample gradients are well defined."""

    def __init__(self, in_shape, num_classes, widths=(16, 32)):
        super().__init__()
        self.stem = nn.Conv2d(in_shape[0], widths[0], 3, padding=1)
        stages = []
        prev = widths[0]
        for i, ch in enumerate(widths):
            if i:
                stages.append(nn.Conv2d(prev, ch, 3, stride=2, padding=1))
                stages.append(nn.ReLU())
            stages.append(_ResBlock(ch))
            prev = ch
        self.stages = nn.Sequential(*stages)
        self.fc = nn.Linear(prev, num_classes)

    def forward(self, x):
        x = self.stages(F.relu(self.stem(x)))
        return self.fc(x.mean(dim=(2, 3)))


class MLP(nn.Module):
    def __init__(self, in_shape, num_classes, hidden=()):
        super().__init__()
        sizes = [int(np.prod(in_shape)), *hidden, num_classes]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))

    def forward(self, x):
        x = x.flatten(1)
        for layer in self.layers[:-1]:
            x = F.relu(layer(x))
        return self.layers[-1](x)


def build_module(spec: ModelSpec) -> nn.Module:
    if spec.arch == "convnet":
        kw = dict(zip(("c1", "c2", "hidden"), spec.widths))
        return ConvNet(spec.input_shape, spec.num_classes, **kw)
    if spec.arch == "resnet-small":
        return ResNetSmall(spec.input_shape, spec.num_classes, spec.widths or (16, 32))
    return MLP(spec.input_shape, spec.num_classes, spec.widths)


@lru_cache(maxsize=None)
def _template(spec: ModelSpec) -> tuple[nn.Module, tuple[tuple[str, tuple[int, ...]], ...]]:
    module = build_module(spec).eval()
    for p in module.parameters():
        p.requires_grad_(False)
    shapes = tuple((name, tuple(p.shape)) for name, p in module.named_parameters())
    return module, shapes


@lru_cache(maxsize=None)
def _layout(spec: ModelSpec) -> tuple[str, int]:
    _, shapes = _template(spec)
    d = sum(int(np.prod(s)) for _, s in shapes)
    text = binio.canonical_json({"spec": spec.to_dict(), "params": [[n, list(s)] for n, s in shapes]})
    return hashlib.sha256(text.encode()).hexdigest()[:16], d


def unflatten(spec: ModelSpec, flat: torch.Tensor) -> dict[str, torch.Tensor]:
    _, shapes = _template(spec)
    out, offset = {}, 0
    for name, shape in shapes:
        n = math.prod(shape)
        out[name] = flat[offset : offset + n].view(shape)
        offset += n
    return out


def forward(spec: ModelSpec, flat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    module, _ = _template(spec)
    return functional_call(module, unflatten(spec, flat), (x,))


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layout_id: str

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float32)
        if v.ndim != 1:
            raise ValueError("ParamVector must be one-dimensional")
        if not np.all(np.isfinite(v)):
            raise ValueError("ParamVector contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.values.copy())

    def check(self, spec: ModelSpec) -> None:
        if self.layout_id != spec.layout_id or len(self) != spec.d:
            raise ValueError(
                f"parameter layout mismatch: vector {self.layout_id}/{len(self)} "
                f"vs model {spec.layout_id}/{spec.d}"
            )


def flatten_module(module: nn.Module, spec: ModelSpec) -> ParamVector:
    flat = torch.cat([p.detach().reshape(-1) for p in module.parameters()])
    return ParamVector(flat.numpy(), spec.layout_id)


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    torch.manual_seed(seed)
    return flatten_module(build_module(spec), spec)


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClientDataset:
    """Local dataset of one client.  ``indices`` are ids into the source pool."""

    client_id: int
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or len(images) != len(labels):
            raise ValueError("images must be (n,C,H,W) aligned with labels")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("images must lie in [0, 1]")
        idx = np.arange(len(labels)) if self.indices is None else np.asarray(self.indices, np.int64)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.labels)

    def subset(self, mask_or_idx) -> "ClientDataset":
        return ClientDataset(self.client_id, self.images[mask_or_idx], self.labels[mask_or_idx],
                             self.indices[mask_or_idx])


def partition_dataset(images, labels, n_clients: int, scheme: str = "iid", seed: int = 0) -> list[ClientDataset]:
    """Split a pool into ``n_clients`` disjoint shards whose sizes differ by at most one."""
    n = len(labels)
    if n_clients < 1 or n_clients > n:
        raise ValueError(f"cannot split {n} samples across {n_clients} clients")
    if scheme != "iid":
        raise NotImplementedError(f"partition scheme {scheme!r}")
    order = np.random.default_rng(seed).permutation(n)
    shards = np.array_split(order, n_clients)
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    return [ClientDataset(i, images[np.sort(s)], labels[np.sort(s)], np.sort(s)) for i, s in enumerate(shards)]


def concat_clients(clients: Iterable[ClientDataset], client_id: int = -1) -> ClientDataset:
    clients = [c for c in clients if len(c)]
    if not clients:
        raise ValueError("no samples to concatenate")
    return ClientDataset(
        client_id,
        np.concatenate([c.images for c in clients]),
        np.concatenate([c.labels for c in clients]),
        np.concatenate([c.indices for c in clients]),
    )


# --------------------------------------------------------------------------
# Gradients
# --------------------------------------------------------------------------


def _loss_single(flat, x, y, spec):
    logits = forward(spec, flat, x.unsqueeze(0))
    return F.cross_entropy(logits, y.unsqueeze(0))


def _batch_loss(flat, x, y, spec):
    return F.cross_entropy(forward(spec, flat, x), y)


def per_sample_gradients(params: ParamVector, spec: ModelSpec, images, labels, chunk: int = 256) -> np.ndarray:
    """Row ``j`` is the flattened cross-entropy gradient for sample ``j``."""
    params.check(spec)
    images = torch.as_tensor(np.asarray(images, dtype=np.float32))
    labels = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    if images.shape[1:] != spec.input_shape:
        raise ValueError(f"input shape {tuple(images.shape[1:])} != {spec.input_shape}")
    if len(labels) and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise ValueError("label out of range")
    flat = params.tensor()
    with torch.no_grad():
        losses = F.cross_entropy(forward(spec, flat, images), labels, reduction="none") if len(labels) else None
    if losses is not None and not torch.all(torch.isfinite(losses)):
        bad = torch.nonzero(~torch.isfinite(losses)).flatten().tolist()
        raise GradientError(f"non-finite loss for samples {bad[:10]} (param norm {flat.norm():.3g})")
    g = vmap(grad(_loss_single), in_dims=(None, 0, 0, None))
    out = np.empty((len(labels), spec.d), dtype=np.float32)
    for start in range(0, len(labels), chunk):
        sl = slice(start, start + chunk)
        out[sl] = g(flat, images[sl], labels[sl], spec).numpy()
    return out


def per_sample_gradient(params: ParamVector, spec: ModelSpec, x, y: int) -> ParamVector:
    x = np.asarray(x, dtype=np.float32)[None]
    row = per_sample_gradients(params, spec, x, np.array([y]))[0]
    return ParamVector(row, spec.layout_id)


def mean_gradient(params: ParamVector, spec: ModelSpec, images, labels) -> np.ndarray:
    """Gradient of the mean cross-entropy over a batch."""
    flat = params.tensor()
    g = grad(_batch_loss)(flat, torch.as_tensor(images), torch.as_tensor(labels), spec)
    return g.numpy()


def predict(params: ParamVector, spec: ModelSpec, images, batch: int = 1024) -> np.ndarray:
    flat = params.tensor()
    outs = []
    with torch.no_grad():
        for s in range(0, len(images), batch):
            outs.append(forward(spec, flat, torch.as_tensor(images[s : s + batch])).argmax(1).numpy())
    return np.concatenate(outs) if outs else np.empty(0, np.int64)


def accuracy(params: ParamVector, spec: ModelSpec, images, labels) -> float:
    return float(np.mean(predict(params, spec, images) == np.asarray(labels)))


def mean_loss(params: ParamVector, spec: ModelSpec, images, labels) -> float:
    with torch.no_grad():
        logits = forward(spec, params.tensor(), torch.as_tensor(np.asarray(images, np.float32)))
        return float(F.cross_entropy(logits, torch.as_tensor(np.asarray(labels, np.int64))))


# --------------------------------------------------------------------------
# Federation
# --------------------------------------------------------------------------


@dataclass
class FederationConfig:
    n_clients: int = 40
    selection_fraction: float = 0.1
    rounds: int = 20
    local_epochs: int = 2
    lr: float = 0.05
    batch_size: int = 32
    aggregator: str = "fedavg"
    prox_mu: float = 0.01
    server_lr: float = 1.0
    seed: int = 1234

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not 0.0 < self.selection_fraction <= 1.0:
            raise ValueError("selection_fraction must be in (0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")

    def clients_per_round(self, available: int | None = None) -> int:
        n = self.n_clients if available is None else available
        return min(n, max(1, math.floor(self.selection_fraction * n + 0.5)))


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def sgd_epochs(params: ParamVector, spec: ModelSpec, data: ClientDataset, lr: float, epochs: int,
               batch_size: int, seed: int, prox_mu: float = 0.0) -> ParamVector:
    """Minibatch SGD on cross-entropy.  With ``prox_mu > 0`` each step is the
    proximal (implicit) FedProx update toward the starting parameters."""
    if len(data) == 0:
        raise ValueError(f"client {data.client_id} has no data")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    anchor = params.tensor()
    theta = anchor.clone()
    x_all = torch.from_numpy(data.images)
    y_all = torch.from_numpy(data.labels)
    rng = np.random.default_rng(seed)
    g_fn = grad(_batch_loss)
    for _ in range(epochs):
        order = torch.from_numpy(rng.permutation(len(data)))
        for s in range(0, len(data), batch_size):
            idx = order[s : s + batch_size]
            g = g_fn(theta, x_all[idx], y_all[idx], spec)
            if prox_mu > 0:
                theta = (theta - lr * g + (lr * prox_mu) * anchor) / (1.0 + lr * prox_mu)
            else:
                theta = theta - lr * g
    out = ParamVector(theta.numpy(), params.layout_id)
    return out


def local_update(params: ParamVector, spec: ModelSpec, client: ClientDataset, lr: float, epochs: int,
                 batch_size: int, seed: int, aggregator: str = "fedavg", prox_mu: float = 0.0) -> ParamVector:
    params.check(spec)
    mu = prox_mu if aggregator == "fedprox" else 0.0
    return sgd_epochs(params, spec, client, lr, epochs, batch_size, seed, prox_mu=mu)


def aggregate(updates: Sequence[tuple[ParamVector, float]], aggregator: str = "fedavg",
              global_params: ParamVector | None = None, server_lr: float = 1.0) -> ParamVector:
    """Weighted average in the given order (callers sort by client id).

    ``fedopt`` treats ``global - average`` as a pseudo-gradient and takes one
    plain server step of size ``server_lr``.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    layout = updates[0][0].layout_id
    d = len(updates[0][0])
    weights = np.array([w for _, w in updates], dtype=np.float64)
    if np.any(weights <= 0):
        raise ValueError("aggregation weights must be positive")
    weights /= weights.sum()
    acc = np.zeros(d, dtype=np.float64)
    for (vec, _), w in zip(updates, weights):
        if len(vec) != d or vec.layout_id != layout:
            raise ValueError("mismatched parameter vectors in aggregation")
        acc += w * vec.values.astype(np.float64)
    if aggregator == "fedopt":
        if global_params is None:
            raise ValueError("fedopt needs the current global parameters")
        g = global_params.values.astype(np.float64)
        acc = g - server_lr * (g - acc)
    elif aggregator not in AGGREGATORS:
        raise ValueError(f"unknown aggregator {aggregator!r}")
    return ParamVector(acc.astype(np.float32), layout)


@dataclass
class FederationResult:
    params: ParamVector
    rounds: list[dict]
    checkpoints: list[Path]


def train_federated(config: FederationConfig, spec: ModelSpec, clients: Sequence[ClientDataset],
                    init: ParamVector | None = None, init_seed: int | None = None,
                    checkpoint_dir: str | Path | None = None, extra_meta: dict | None = None,
                    eval_set: tuple[np.ndarray, np.ndarray] | None = None) -> FederationResult:
    """Run ``config.rounds`` rounds of federated training.

    Clients with no data are skipped when drawing the per-round selection.
    Everything is a deterministic function of ``config.seed`` (and
    ``init_seed`` for the initial weights, which defaults to ``config.seed``).
    """
    init_seed = config.seed if init_seed is None else init_seed
    theta = init if init is not None else init_params(spec, init_seed)
    theta.check(spec)
    active = sorted((c for c in clients if len(c)), key=lambda c: c.client_id)
    if not active:
        raise ValueError("no client holds any data")
    rng = np.random.default_rng([config.seed, 0])
    per_round = config.clients_per_round(len(active))
    history, paths = [], []
    for t in range(config.rounds):
        chosen = np.sort(rng.choice(len(active), size=per_round, replace=False))
        selected = [active[i] for i in chosen]
        updates = []
        for client in selected:
            seed = derive_seed(config.seed, t, client.client_id)
            new = local_update(theta, spec, client, config.lr, config.local_epochs, config.batch_size,
                               seed, config.aggregator, config.prox_mu)
            updates.append((new, float(len(client))))
        theta = aggregate(updates, config.aggregator, theta, config.server_lr)
        info = {"round": t + 1, "clients": [c.client_id for c in selected]}
        if eval_set is not None:
            info["accuracy"] = accuracy(theta, spec, *eval_set)
        history.append(info)
        logger.info("round %d/%d clients=%s%s", t + 1, config.rounds, info["clients"],
                    f" acc={info['accuracy']:.4f}" if "accuracy" in info else "")
        if checkpoint_dir is not None:
            meta = {"init_seed": init_seed, **(extra_meta or {})}
            paths.append(save_checkpoint(Path(checkpoint_dir) / f"round_{t + 1:03d}.ckpt", theta, spec,
                                         round=t + 1, seed=config.seed, meta=meta))
    return FederationResult(theta, history, paths)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: ParamVector, spec: ModelSpec, round: int = 0, seed: int = 0,
                    meta: dict | None = None) -> Path:
    params.check(spec)
    header = {
        "model": spec.to_dict(),
        "layout": spec.layout_id,
        "d": spec.d,
        "round": int(round),
        "seed": int(seed),
        "meta": meta or {},
    }
    return binio.write(path, binio.MAGIC_CHECKPOINT, header, params.values)


def load_checkpoint(path: str | Path) -> tuple[ParamVector, ModelSpec, dict]:
    header, payload = binio.read(path, binio.MAGIC_CHECKPOINT)
    spec = ModelSpec.from_dict(header["model"])
    if header["layout"] != spec.layout_id or header["d"] != spec.d or len(payload) != spec.d:
        raise binio.FormatError(f"{path}: layout id does not match the model it describes")
    return ParamVector(payload, spec.layout_id), spec, header
