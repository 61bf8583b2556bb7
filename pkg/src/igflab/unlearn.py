"""Federated unlearning: scenario construction, exact retraining (EFU) and
projected gradient ascent with fine-tuning (AFU)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fedsim import (
    ClientDataset,
    FederationConfig,
    ModelSpec,
    ParamVector,
    aggregate,
    concat_clients,
    mean_gradient,
    sgd_epochs,
    train_federated,
)

logger = logging.getLogger(__name__)

SCENARIOS = ("sample-level", "class-level", "client-level")


@dataclass(frozen=True)
class FUScenario:
    """Which samples each unlearned client forgets.

    ``forgotten`` maps client id -> positions (into that client's dataset) of
    the forgotten samples, in the order they are forgotten.
    """

    kind: str
    unlearned_clients: tuple[int, ...]
    forgotten: dict[int, np.ndarray] = field(default_factory=dict)
    target_class: int | None = None

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.kind!r}")
        if not self.unlearned_clients:
            raise ValueError("scenario needs at least one unlearned client")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "unlearned_clients": list(self.unlearned_clients),
            "target_class": self.target_class,
            "forgotten": {str(k): v.tolist() for k, v in self.forgotten.items()},
        }


@dataclass
class ScenarioSplit:
    scenario: FUScenario
    clients_retained: list[ClientDataset]
    forgotten_by_client: dict[int, ClientDataset]

    @property
    def forgotten(self) -> ClientDataset:
        return concat_clients(self.forgotten_by_client[c] for c in self.scenario.unlearned_clients)

    @property
    def retained(self) -> ClientDataset:
        return concat_clients(self.clients_retained)


@dataclass
class AFUConfig:
    ascent_lr: float = 0.05
    radius: float = 5.0
    finetune_epochs: int = 2
    finetune_lr: float = 0.05
    finetune_batch: int = 32
    seed: int = 1234

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("ball radius zeta must be positive")
        if self.ascent_lr < 0:
            raise ValueError("ascent rate must be non-negative")


def make_scenario(kind: str, clients: Sequence[ClientDataset], unlearned: Sequence[int], *,
                  n_forget: int | None = None, target_class: int | None = None, num_classes: int | None = None,
                  seed: int = 0) -> ScenarioSplit:
    """Build a forgetting scenario and the resulting forgotten/retained split.

    sample-level draws ``n_forget`` samples uniformly from the pooled data of
    the unlearned clients; class-level forgets every sample of
    ``target_class`` they hold; client-level forgets their whole datasets.
    """
    unlearned = tuple(sorted(set(int(c) for c in unlearned)))
    if not unlearned:
        raise ValueError("empty unlearned client set")
    by_id = {c.client_id: c for c in clients}
    missing = [c for c in unlearned if c not in by_id]
    if missing:
        raise ValueError(f"unknown clients {missing}")

    forgotten: dict[int, np.ndarray] = {}
    if kind == "sample-level":
        pool = [(c, j) for c in unlearned for j in range(len(by_id[c]))]
        if n_forget is None or not 0 < n_forget <= len(pool):
            raise ValueError(f"cannot forget {n_forget} samples from {len(pool)} held by clients {unlearned}")
        pick = np.random.default_rng(seed).choice(len(pool), size=n_forget, replace=False)
        for c in unlearned:
            forgotten[c] = np.array(sorted(pool[i][1] for i in pick if pool[i][0] == c), dtype=np.int64)
    elif kind == "class-level":
        if target_class is None or target_class < 0 or (num_classes is not None and target_class >= num_classes):
            raise ValueError(f"invalid target class {target_class}")
        for c in unlearned:
            forgotten[c] = np.flatnonzero(by_id[c].labels == target_class)
    elif kind == "client-level":
        for c in unlearned:
            forgotten[c] = np.arange(len(by_id[c]))
    else:
        raise ValueError(f"unknown scenario {kind!r}")

    scenario = FUScenario(kind, unlearned, forgotten, target_class if kind == "class-level" else None)
    retained, forgot = [], {}
    for client in clients:
        if client.client_id in forgotten:
            mask = np.zeros(len(client), dtype=bool)
            mask[forgotten[client.client_id]] = True
            forgot[client.client_id] = client.subset(forgotten[client.client_id])
            retained.append(client.subset(~mask))
        else:
            retained.append(client)
    return ScenarioSplit(scenario, retained, forgot)


def run_efu(config: FederationConfig, spec: ModelSpec, retained_clients: Sequence[ClientDataset],
            init_seed: int, **kwargs) -> ParamVector:
    """Exact unlearning: federated retraining from a fresh initialization on
    the retained data only."""
    if not any(len(c) for c in retained_clients):
        raise ValueError("retained dataset is empty")
    return train_federated(config, spec, retained_clients, init_seed=init_seed, **kwargs).params


def project_to_ball(theta: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Radial projection onto the L2 ball of ``radius`` around ``center`` (float64 in, float64 out)."""
    delta = theta - center
    norm = float(np.linalg.norm(delta))
    if norm > radius:
        delta *= radius / norm
    return center + delta


def afu_ascent(params: ParamVector, spec: ModelSpec, split: ScenarioSplit, config: AFUConfig) -> ParamVector:
    """One full-batch gradient-ascent step per unlearned client, each clipped
    to the radius-zeta ball around the original parameters, then averaged
    with weights proportional to the forgotten counts."""
    base = params.values.astype(np.float64)
    updates = []
    for cid in split.scenario.unlearned_clients:
        data = split.forgotten_by_client[cid]
        if len(data) == 0:
            raise ValueError(f"client {cid} has nothing to forget")
        g = mean_gradient(params, spec, data.images, data.labels).astype(np.float64)
        theta_i = project_to_ball(base + config.ascent_lr * g, base, config.radius)
        updates.append((ParamVector(theta_i.astype(np.float32), params.layout_id), float(len(data))))
    return aggregate(updates, "fedavg")


def run_afu(params: ParamVector, spec: ModelSpec, split: ScenarioSplit, config: AFUConfig) -> ParamVector:
    """Approximate unlearning followed by centralized fine-tuning on the retained data."""
    params.check(spec)
    theta = afu_ascent(params, spec, split, config)
    if config.finetune_epochs > 0:
        theta = sgd_epochs(theta, spec, split.retained, config.finetune_lr, config.finetune_epochs,
                           config.finetune_batch, config.seed)
    return theta
