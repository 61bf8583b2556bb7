"""End-to-end runs: train, unlearn, prove, (defend), attack, score.

A run lives in ``<output_dir>/<fingerprint>/`` with the subdirectories
``checkpoints pofu basis model reports grids``.  Every artifact carries the
config fingerprint and seed, and every stage reuses its persisted output when
the file is already present, so an interrupted run resumes where it stopped.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .. import binio
from ..defenses import DefenseConfig, apply_defense
from ..fedsim import (
    FederationConfig,
    ModelSpec,
    ParamVector,
    accuracy,
    load_checkpoint,
    partition_dataset,
    save_checkpoint,
    set_deterministic,
    train_federated,
)
from ..igf import (
    HashProjector,
    InversionModelSpec,
    collect_aux_gradients,
    default_hash_dim,
    fit_projection,
    load_basis,
    load_inversion,
    save_basis,
    save_inversion,
    train_inversion,
)
from ..metrics import ReconReport, mse_per_image
from ..perceptual import PerceptualExtractor
from ..pofu import PoFURecord, compute_pofu, load_pofu, save_pofu, verify_pofu
from ..unlearn import AFUConfig, make_scenario, run_afu, run_efu
from .config import ExperimentConfig, config_from_dict
from .datasets import load_dataset, num_classes
from .grid import emit_grid

logger = logging.getLogger(__name__)

SUBDIRS = ("checkpoints", "pofu", "basis", "model", "reports", "grids")
STAGES = ("data", "train", "unlearn", "pofu", "defend", "collect", "basis", "inversion", "reconstruct", "score")
OOD_PAIRS = {"mnist": "fashion-mnist", "fashion-mnist": "mnist", "cifar10": "cifar100",
             "cifar100": "cifar10", "synthetic": "synthetic"}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunData:
    clients: list
    test: tuple[np.ndarray, np.ndarray]
    aux: tuple[np.ndarray, np.ndarray]
    spec: ModelSpec


@dataclass
class RunResult:
    run_dir: Path
    fingerprint: str
    report: ReconReport
    summary: dict
    artifacts: list[Path] = field(default_factory=list)


def _json_dump(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    return path


def _stamp(config: ExperimentConfig) -> dict:
    return {"fingerprint": config.fingerprint, "seed": config.seed}


def run_dir_for(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / config.fingerprint


def load_run_config(run_dir: str | Path) -> ExperimentConfig:
    data = json.loads((Path(run_dir) / "config.json").read_text())
    data.pop("fingerprint", None)
    return config_from_dict(data)


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------


def prepare_data(config: ExperimentConfig) -> RunData:
    """Disjoint train / test / auxiliary slices of the (shuffled) pool."""
    images, labels = load_dataset(config.dataset, synthetic_n=config.data.synthetic_n, seed=config.seed)
    n_train, n_test = config.data.n_train, config.data.n_test
    ood = config.attack.aux_source == "out-of-distribution"
    need = n_train + n_test + (0 if ood else config.attack.aux_size)
    if need > len(labels):
        raise ValueError(f"{config.dataset} has {len(labels)} samples, the config needs {need}")
    order = np.random.default_rng([config.seed, 1]).permutation(len(labels))
    tr, te = order[:n_train], order[n_train : n_train + n_test]
    clients = partition_dataset(images[tr], labels[tr], config.federation.n_clients, seed=config.seed)
    if ood:
        name = config.attack.aux_dataset or OOD_PAIRS[config.dataset]
        ax, ay = load_dataset(name, synthetic_n=config.attack.aux_size, seed=config.seed + 1)
        pick = np.random.default_rng([config.seed, 2]).permutation(len(ay))[: config.attack.aux_size]
        ax, ay = ax[pick], ay[pick]
        if ax.shape[1:] != images.shape[1:]:
            raise ValueError(f"aux images {ax.shape[1:]} do not match {images.shape[1:]}")
        ay = ay % num_classes(config.dataset)
    else:
        pick = order[n_train + n_test : need]
        ax, ay = images[pick], labels[pick]
    widths = tuple(config.model.widths)
    spec = ModelSpec(config.model.arch, images.shape[1:], num_classes(config.dataset), widths)
    return RunData(clients, (images[te], labels[te]), (ax, ay), spec)


def make_split(config: ExperimentConfig, data: RunData):
    sc = config.scenario
    return make_scenario(sc.kind, data.clients, sc.unlearned_clients, n_forget=sc.n_forget,
                         target_class=sc.target_class, num_classes=data.spec.num_classes, seed=config.seed)


def afu_config(config: ExperimentConfig) -> AFUConfig:
    u, lr = config.unlearn, config.federation.lr
    return AFUConfig(lr if u.ascent_lr is None else u.ascent_lr, u.radius, u.finetune_epochs,
                     lr if u.finetune_lr is None else u.finetune_lr, u.finetune_batch, config.federation.seed)


def unlearn_method_meta(config: ExperimentConfig) -> dict:
    meta = {"method": config.unlearn.method, "scenario": config.scenario.kind}
    if config.unlearn.method == "afu":
        afu = afu_config(config)
        meta.update(zeta=afu.radius, eta_u=afu.ascent_lr, finetune_epochs=afu.finetune_epochs,
                    finetune_lr=afu.finetune_lr)
    else:
        meta["init_seed"] = config.federation.seed + config.unlearn.efu_seed_offset
    return meta


def unlearn_model(config: ExperimentConfig, spec: ModelSpec, original: ParamVector, split) -> ParamVector:
    u = config.unlearn
    if u.method == "afu":
        return run_afu(original, spec, split, afu_config(config))
    return run_efu(config.federation, spec, split.clients_retained,
                   init_seed=config.federation.seed + u.efu_seed_offset)


def baseline_mse(aux_images, targets) -> np.ndarray:
    """Per-sample MSE of the constant predictor that outputs the per-pixel mean of the aux set."""
    mean = np.asarray(aux_images, dtype=np.float64).mean(axis=0, keepdims=True)
    targets = np.asarray(targets, dtype=np.float64)
    return mse_per_image(targets, np.broadcast_to(mean, targets.shape))


# --------------------------------------------------------------------------
# Pipeline
# --------------------------------------------------------------------------


class _Runner:
    def __init__(self, config: ExperimentConfig, resume: bool):
        self.config = config
        self.resume = resume
        self.dir = run_dir_for(config)
        self.stamp = _stamp(config)
        self.artifacts: list[Path] = []

    def path(self, sub: str, name: str) -> Path:
        return self.dir / sub / name

    def have(self, *paths: Path) -> bool:
        return self.resume and all(p.exists() for p in paths)

    def keep(self, path: Path) -> Path:
        self.artifacts.append(path)
        return path

    def stage(self, name: str, fn, *args):
        logger.info("stage %s", name)
        try:
            return fn(*args)
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise StageError(name, exc) from exc

    # individual stages ----------------------------------------------------

    def train(self, data: RunData) -> ParamVector:
        cfg = self.config.federation
        final = self.path("checkpoints", "original.ckpt")
        if self.have(final):
            return load_checkpoint(final)[0]
        result = train_federated(cfg, data.spec, data.clients, checkpoint_dir=self.dir / "checkpoints",
                                 extra_meta=self.stamp)
        self.artifacts.extend(result.checkpoints)
        acc = accuracy(result.params, data.spec, *data.test)
        save_checkpoint(final, result.params, data.spec, round=cfg.rounds, seed=cfg.seed,
                        meta={**self.stamp, "role": "original", "test_accuracy": acc})
        self.keep(final)
        return result.params

    def unlearn(self, data: RunData, original: ParamVector, split) -> ParamVector:
        u = self.config.unlearn
        path = self.path("checkpoints", "unlearned.ckpt")
        if self.have(path):
            return load_checkpoint(path)[0]
        theta = unlearn_model(self.config, data.spec, original, split)
        acc = accuracy(theta, data.spec, *data.test)
        save_checkpoint(path, theta, data.spec, seed=self.config.federation.seed,
                        meta={**self.stamp, **unlearn_method_meta(self.config), "role": "unlearned",
                              "test_accuracy": acc,
                              "distance": float(np.linalg.norm(theta.values.astype(np.float64)
                                                               - original.values.astype(np.float64)))})
        self.keep(path)
        return theta

    def pofu(self, data: RunData, original, unlearned, split) -> list[PoFURecord]:
        records = []
        for cid in split.scenario.unlearned_clients:
            path = self.path("pofu", f"client_{cid:03d}.pofu")
            if self.have(path):
                records.append(load_pofu(path))
                continue
            rec = compute_pofu(original, unlearned, data.spec, split.forgotten_by_client[cid],
                               split.scenario.kind)
            rec = dataclasses.replace(rec, meta={**self.stamp, "n_forgotten": len(rec.rows)})
            save_pofu(path, rec)
            records.append(rec)
            self.keep(path)
        return records

    def defend(self, records: list[PoFURecord]) -> list[PoFURecord]:
        cfg = self.config.defense
        if cfg.method == "none":
            return records
        out = []
        for rec in records:
            path = self.path("pofu", f"client_{rec.client_id:03d}.{cfg.method}.pofu")
            if self.have(path):
                out.append(load_pofu(path))
                continue
            defended = apply_defense(rec, cfg)
            save_pofu(path, defended)
            out.append(defended)
            self.keep(path)
        return out

    def verify(self, clean: list[PoFURecord], submitted: list[PoFURecord]) -> dict:
        tau = self.config.metrics.tau
        body = {"tau": tau, **self.stamp, "clients": {}}
        for a, b in zip(clean, submitted):
            va, vb = verify_pofu(a, tau), verify_pofu(b, tau)
            body["clients"][str(a.client_id)] = {
                "clean": va.to_dict(), "submitted": vb.to_dict(),
                "unchanged": bool(np.array_equal(va.passed, vb.passed)),
            }
        self.keep(_json_dump(self.path("reports", "verification.json"), body))
        return body

    def reducer(self, data: RunData, original, unlearned):
        a = self.config.attack
        if a.reducer == "hash":
            path = self.path("basis", "hash.json")
            d = data.spec.d
            red = HashProjector(d, a.hash_dim or default_hash_dim(d), a.hash_seed)
            if not self.have(path):
                self.keep(_json_dump(path, {**red.describe(), **self.stamp}))
            return red, None
        path = self.path("basis", "basis.bin")
        if self.have(path):
            return load_basis(path), None
        grads = collect_aux_gradients(original, unlearned, data.spec, *data.aux,
                                      provenance={"aux_source": a.aux_source, "m": len(data.aux[1])})
        basis = fit_projection(grads, a.nu, a.center, a.svd_method)
        save_basis(path, basis, meta=self.stamp)
        self.keep(path)
        return basis, grads

    def inversion(self, data: RunData, original, unlearned, reducer, grads, extractor):
        a = self.config.attack
        path = self.path("model", "inversion.bin")
        if self.have(path):
            return load_inversion(path)
        if grads is None:
            grads = collect_aux_gradients(original, unlearned, data.spec, *data.aux)
        z = reducer.project(grads.rows)
        spec = InversionModelSpec(z.shape[1], data.spec.input_shape, a.seed_channels, a.seed_size,
                                  tuple(a.widths), a.beta)
        trained = train_inversion(spec, z, data.aux[0], lr=a.lr, batch_size=a.batch_size, epochs=a.epochs,
                                  seed=a.seed, extractor=extractor)
        save_inversion(path, trained, meta=self.stamp)
        self.keep(path)
        self.keep(_json_dump(self.path("model", "loss_curve.json"), {"loss": trained.loss_curve, **self.stamp}))
        return trained


def _extractor(config: ExperimentConfig) -> PerceptualExtractor:
    return PerceptualExtractor(config.metrics.perceptual, seed=config.metrics.perceptual_seed)


def save_recon(path: Path, images: np.ndarray, meta: dict) -> Path:
    header = {"shape": list(images.shape), "meta": meta}
    return binio.write(path, binio.MAGIC_RECON, header, images)


def load_recon(path: str | Path) -> np.ndarray:
    header, payload = binio.read(path, binio.MAGIC_RECON)
    return payload.reshape(header["shape"])


def _score(runner: _Runner, tag: str, originals, recon, baseline, extractor, extra: dict) -> tuple[ReconReport, dict]:
    cfg = runner.config
    fp = {**cfg.short_fingerprint(), **extra.pop("fingerprint_extra", {})}
    report = ReconReport.score(originals, recon, extractor, cfg.metrics.data_range, fingerprint=fp)
    summary = {
        **report.summary(),
        "baseline_mse_mean": float(baseline.mean()),
        "mse_ratio": float(report.mse.mean() / baseline.mean()),
        "fraction_better_than_baseline": float(np.mean(report.mse < baseline)),
        "perceptual": extractor.describe(),
        **extra,
    }
    report.extra = {"details": summary, "seed": cfg.seed}
    runner.keep(report.write_csv(runner.path("reports", f"{tag}.csv")))
    runner.keep(report.write_json(runner.path("reports", f"{tag}.json")))
    pairs = min(cfg.metrics.grid_pairs, len(originals))
    runner.keep(emit_grid(originals[:pairs], recon[:pairs], runner.path("grids", f"{tag}.png"),
                          text={"fingerprint": cfg.fingerprint, "seed": cfg.seed, "defense": json.dumps(fp["defense"])}))
    return report, summary


def run_pipeline(config: ExperimentConfig, resume: bool = True) -> RunResult:
    """Execute every stage, persisting each one.  Raises :class:`StageError`."""
    config.validate()
    set_deterministic()
    r = _Runner(config, resume)
    for sub in SUBDIRS:
        (r.dir / sub).mkdir(parents=True, exist_ok=True)
    cfg_path = r.dir / "config.json"
    cfg_path.write_text(json.dumps({**config.to_dict(), "fingerprint": config.fingerprint}, sort_keys=True,
                                   indent=2) + "\n")
    r.keep(cfg_path)

    data = r.stage("data", prepare_data, config)
    split = r.stage("data", make_split, config, data)
    original = r.stage("train", r.train, data)
    unlearned = r.stage("unlearn", r.unlearn, data, original, split)
    clean = r.stage("pofu", r.pofu, data, original, unlearned, split)
    submitted = r.stage("defend", r.defend, clean)
    verdict = r.stage("defend", r.verify, clean, submitted)
    reducer, grads = r.stage("basis", r.reducer, data, original, unlearned)
    extractor = r.stage("inversion", _extractor, config)
    trained = r.stage("inversion", r.inversion, data, original, unlearned, reducer, grads, extractor)

    def reconstruct():
        path = r.path("reports", "recon.bin")
        if r.have(path):
            return load_recon(path)
        rows = np.concatenate([rec.rows for rec in submitted])
        images = trained(reducer.project(rows)).astype(np.float32)
        r.keep(save_recon(path, images, r.stamp))
        return images

    recon = r.stage("reconstruct", reconstruct)
    originals = split.forgotten.images
    base = baseline_mse(data.aux[0], originals)
    extra = {
        "reducer": reducer.describe(),
        "aux_size": len(data.aux[1]),
        "verification_unchanged": all(c["unchanged"] for c in verdict["clients"].values()),
    }
    report, summary = r.stage("score", _score, r, "recon", originals, recon, base, extractor, extra)
    r.keep(_json_dump(r.path("reports", "summary.json"), {**summary, **r.stamp}))
    return RunResult(r.dir, config.fingerprint, report, summary, r.artifacts)


def evaluate_defense(run_dir: str | Path, defense: DefenseConfig) -> dict:
    """Apply ``defense`` to a finished run's PoFU files and attack them with the
    run's trained inversion model.  Outputs are written next to the run's own
    reports under a ``defense-<method>`` prefix."""
    run_dir = Path(run_dir)
    config = load_run_config(run_dir)
    config.output_dir = str(run_dir.parent)
    set_deterministic()
    r = _Runner(config, resume=False)
    tag = f"defense-{defense.method}"
    try:
        clean = [load_pofu(p) for p in sorted((run_dir / "pofu").glob("client_[0-9][0-9][0-9].pofu"))]
        if not clean:
            raise FileNotFoundError(f"no PoFU files under {run_dir / 'pofu'}")
        defended = []
        for rec in clean:
            d = apply_defense(rec, defense)
            d = dataclasses.replace(d, meta={**rec.meta, **r.stamp})
            r.keep(save_pofu(run_dir / "pofu" / f"client_{rec.client_id:03d}.{tag}.pofu", d))
            defended.append(d)
        tau = config.metrics.tau
        unchanged = all(np.array_equal(verify_pofu(a, tau).passed, verify_pofu(b, tau).passed)
                        for a, b in zip(clean, defended))
        if config.attack.reducer == "hash":
            h = json.loads((run_dir / "basis" / "hash.json").read_text())
            reducer = HashProjector(h["d"], h["out_dim"], h["seed"])
        else:
            reducer = load_basis(run_dir / "basis" / "basis.bin")
        trained = load_inversion(run_dir / "model" / "inversion.bin")
        recon = trained(reducer.project(np.concatenate([rec.rows for rec in defended]))).astype(np.float32)
        r.keep(save_recon(run_dir / "reports" / f"{tag}.recon.bin", recon, {**r.stamp, "defense": defense.tag()}))
        data = prepare_data(config)
        split = make_split(config, data)
        originals = split.forgotten.images
        base = baseline_mse(data.aux[0], originals)
        extra = {"verification_unchanged": bool(unchanged), "fingerprint_extra": {"defense": defense.tag()}}
        _, summary = _score(r, tag, originals, recon, base, _extractor(config), extra)
    except Exception as exc:  # noqa: BLE001
        raise StageError("defend", exc) from exc
    r.keep(_json_dump(run_dir / "reports" / f"{tag}.summary.json", {**summary, **r.stamp}))
    return summary


def compare_reductions(config: ExperimentConfig, resume: bool = True) -> list[dict]:
    """Run the attack through the SVD path and the hash path on identical inputs."""
    rows = []
    for reducer in ("svd", "hash"):
        cfg = config_from_dict({**config.to_dict(include_output=True),
                                "attack": {**dataclasses.asdict(config.attack), "reducer": reducer}})
        res = run_pipeline(cfg, resume=resume)
        s = res.summary
        rows.append({"method": reducer, "stored_dims": s["reducer"]["k" if reducer == "svd" else "out_dim"],
                     "original_dims": s["reducer"]["d"], "aux_size": s["aux_size"], "mse": s["mse_mean"],
                     "psnr": s["psnr_mean"], "lpips": s["lpips_mean"], "mse_ratio": s["mse_ratio"],
                     "run": res.fingerprint})
    svd, hsh = rows
    for key in ("mse", "psnr", "lpips"):
        svd[f"delta_{key}"] = svd[key] - hsh[key]
    return rows


# --------------------------------------------------------------------------
# Verification of a run directory
# --------------------------------------------------------------------------


def _artifact_fingerprint(path: Path) -> str | None:
    suffix = path.suffix
    if suffix in (".ckpt", ".pofu", ".bin"):
        _, header = binio.peek_header(path)
        meta = header.get("meta", header.get("provenance", {}))
        return meta.get("fingerprint")
    if suffix == ".json":
        body = json.loads(path.read_text())
        fp = body.get("fingerprint")
        return fp.get("run") if isinstance(fp, dict) else fp
    if suffix == ".csv":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        fps = {json.loads(row["fingerprint"]).get("run") for row in rows}
        return fps.pop() if len(fps) == 1 else None
    if suffix == ".png":
        return Image.open(path).text.get("fingerprint")
    return None


def verify_run(run_dir: str | Path) -> dict:
    """Recompute the config fingerprint and check it against every artifact."""
    run_dir = Path(run_dir)
    config = load_run_config(run_dir)
    expected = config.fingerprint
    problems = []
    if run_dir.name != expected:
        problems.append(f"directory name {run_dir.name} != config fingerprint {expected}")
    stored = json.loads((run_dir / "config.json").read_text()).get("fingerprint")
    if stored != expected:
        problems.append(f"config.json records {stored}, recomputed {expected}")
    checked = 0
    for path in sorted(run_dir.rglob("*")):
        if not path.is_file() or path.name == "config.json":
            continue
        checked += 1
        try:
            got = _artifact_fingerprint(path)
        except Exception as exc:  # noqa: BLE001
            problems.append(f"{path.relative_to(run_dir)}: unreadable ({exc})")
            continue
        if got != expected:
            problems.append(f"{path.relative_to(run_dir)}: fingerprint {got} != {expected}")
    return {"fingerprint": expected, "checked": checked, "ok": not problems, "problems": problems}
