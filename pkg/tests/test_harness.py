import gzip
import json
import struct

import numpy as np
import pytest
from PIL import Image

from igflab import binio
from igflab.defenses import DefenseConfig
from igflab.harness import config as hc
from igflab.harness import datasets as ds
from igflab.harness import grid
from igflab.harness import pipeline as pl
from igflab.pofu import load_pofu, verify_pofu
from conftest import ROOT

SMOKE = ROOT / "configs" / "smoke_synthetic.yaml"


# ---------------------------------------------------------------- configuration


def test_shipped_configs_load():
    for path in sorted((ROOT / "configs").glob("*.yaml")):
        assert hc.load_config(path).fingerprint


def test_desk_yaml_matches_builder():
    assert hc.load_config(ROOT / "configs" / "desk_mnist.yaml").fingerprint == hc.desk_config().fingerprint


def test_unknown_keys_are_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("federation: {n_clinets: 3}\n")
    with pytest.raises(hc.ConfigError, match="n_clinets"):
        hc.load_config(path)
    with pytest.raises(hc.ConfigError):
        hc.config_from_dict({"colour": "blue"})


@pytest.mark.parametrize("patch", [{"dataset": "imagenet"}, {"attack": {"nu": 0.0}}, {"attack": {"beta": -1}},
                                   {"metrics": {"tau": 0}}, {"scenario": {"unlearned_clients": [99]}},
                                   {"defense": {"method": "sign", "prune_fraction": 2.0}},
                                   {"unlearn": {"method": "retrain"}}])
def test_invalid_values_are_rejected(patch):
    with pytest.raises(hc.ConfigError):
        hc.desk_config(**patch)


def test_fingerprint_tracks_content_not_output_dir():
    a = hc.desk_config()
    b = hc.desk_config(output_dir="elsewhere")
    c = hc.desk_config(attack={"beta": 2.0})
    assert a.fingerprint == b.fingerprint != c.fingerprint


def test_published_setup_encoded():
    cfg = hc.reference_config()
    assert cfg.federation.n_clients == 40
    assert cfg.federation.selection_fraction == 0.1
    assert cfg.federation.rounds == 20
    assert cfg.scenario.n_forget == 1000
    assert (cfg.attack.batch_size, cfg.attack.lr, cfg.attack.seed) == (256, 1e-4, 1234)


def test_afu_rates_inherit_local_rate():
    cfg = hc.desk_config()
    afu = pl.afu_config(cfg)
    assert afu.ascent_lr == afu.finetune_lr == cfg.federation.lr
    afu = pl.afu_config(hc.desk_config(unlearn={"ascent_lr": 0.3}))
    assert afu.ascent_lr == 0.3


# ---------------------------------------------------------------- data


def test_synthetic_is_seeded_and_bounded():
    x, y = ds.synthetic(50, seed=3)
    x2, y2 = ds.synthetic(50, seed=3)
    assert x.shape == (50, 1, 28, 28) and x.dtype == np.float32
    assert x.tobytes() == x2.tobytes() and np.array_equal(y, y2)
    assert x.min() >= 0 and x.max() <= 1 and set(np.unique(y)) <= set(range(10))


def _write_idx(path, arr, gz=False):
    head = struct.pack(">HBB", 0, 8, arr.ndim) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    opener = gzip.open if gz else open
    with opener(path, "wb") as fh:
        fh.write(head + arr.astype(np.uint8).tobytes())


def test_idx_reader(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (3, 28, 28))
    root = tmp_path / "mnist"
    root.mkdir()
    _write_idx(root / "train-images-idx3-ubyte.gz", imgs, gz=True)
    _write_idx(root / "train-labels-idx1-ubyte", np.array([1, 2, 3]))
    x, y = ds.load_dataset("mnist", tmp_path)
    assert x.shape == (3, 1, 28, 28) and y.tolist() == [1, 2, 3]
    np.testing.assert_allclose(x[:, 0] * 255, imgs, atol=1e-4)


def test_missing_dataset_is_reported(tmp_path):
    with pytest.raises(ds.DatasetUnavailable):
        ds.load_dataset("cifar10", tmp_path)


def test_prepared_slices_are_disjoint():
    cfg = hc.load_config(SMOKE)
    data = pl.prepare_data(cfg)
    sizes = [len(c) for c in data.clients]
    assert sum(sizes) == cfg.data.n_train
    assert len(data.test[1]) == cfg.data.n_test and len(data.aux[1]) == cfg.attack.aux_size
    pool = [data.test[0], data.aux[0]] + [c.images for c in data.clients]
    keys = [im.tobytes() for part in pool for im in part]
    assert len(set(keys)) == len(keys)


# ---------------------------------------------------------------- grids


def test_grid_layout():
    r = np.random.default_rng(0)
    a, b = r.random((8, 1, 5, 5)), r.random((8, 1, 5, 5))
    g = grid.grid_array(a, b, pairs_per_row=8, pad=2)
    assert g.shape == (5 + 4, 16 * 7 + 2)
    for i in range(8):
        np.testing.assert_array_equal(grid.tile(g, i, 0, (5, 5)), np.rint(a[i, 0] * 255))
        np.testing.assert_array_equal(grid.tile(g, i, 1, (5, 5)), np.rint(b[i, 0] * 255))


def test_identical_pairs_draw_identical_tiles():
    a = np.random.default_rng(1).random((4, 1, 6, 6))
    g = grid.grid_array(a, a, pairs_per_row=2)
    for i in range(4):
        assert np.array_equal(grid.tile(g, i, 0, (6, 6), 2), grid.tile(g, i, 1, (6, 6), 2))


def test_grid_rejects_empty_and_mismatched():
    with pytest.raises(ValueError):
        grid.grid_array(np.zeros((0, 1, 4, 4)), np.zeros((0, 1, 4, 4)))
    with pytest.raises(ValueError):
        grid.grid_array(np.zeros((2, 1, 4, 4)), np.zeros((3, 1, 4, 4)))


def test_grid_png_carries_text(tmp_path):
    a = np.zeros((2, 3, 4, 4))
    path = grid.emit_grid(a, a, tmp_path / "g.png", text={"fingerprint": "abc"})
    img = Image.open(path)
    assert img.text["fingerprint"] == "abc" and img.mode == "RGB"


# ---------------------------------------------------------------- pipeline


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    cfg = hc.load_config(SMOKE)
    cfg.output_dir = str(tmp_path_factory.mktemp("runs"))
    return cfg, pl.run_pipeline(cfg)


def test_pipeline_layout(smoke_run):
    cfg, res = smoke_run
    assert res.run_dir.name == cfg.fingerprint
    for sub in pl.SUBDIRS:
        assert (res.run_dir / sub).is_dir()
    for rel in ("checkpoints/original.ckpt", "checkpoints/unlearned.ckpt", "pofu/client_000.pofu",
                "basis/basis.bin", "model/inversion.bin", "reports/recon.csv", "reports/summary.json",
                "grids/recon.png", "reports/verification.json"):
        assert (res.run_dir / rel).is_file(), rel
    assert res.summary["n"] == cfg.scenario.n_forget
    assert np.isfinite(res.summary["mse_mean"])


def test_every_artifact_embeds_fingerprint_and_seed(smoke_run):
    cfg, res = smoke_run
    report = pl.verify_run(res.run_dir)
    assert report["ok"], report["problems"]
    assert report["checked"] >= 10
    _, header = binio.peek_header(res.run_dir / "checkpoints" / "original.ckpt")
    assert header["meta"]["seed"] == cfg.seed


def test_resume_reuses_artifacts(smoke_run):
    cfg, res = smoke_run
    before = {p: p.read_bytes() for p in res.run_dir.rglob("*") if p.is_file()}
    again = pl.run_pipeline(cfg)
    assert again.summary == res.summary
    assert all(p.read_bytes() == b for p, b in before.items())


def test_defense_evaluation_on_finished_run(smoke_run):
    _, res = smoke_run
    summary = pl.evaluate_defense(res.run_dir, DefenseConfig("ortho", seed=1))
    assert summary["verification_unchanged"]
    tau = 10.0
    clean = load_pofu(res.run_dir / "pofu" / "client_000.pofu")
    defended = load_pofu(res.run_dir / "pofu" / "client_000.defense-ortho.pofu")
    assert np.array_equal(verify_pofu(clean, tau).passed, verify_pofu(defended, tau).passed)
    assert (res.run_dir / "grids" / "defense-ortho.png").is_file()
    assert pl.verify_run(res.run_dir)["ok"]


def test_tampering_is_detected(smoke_run, tmp_path):
    import shutil

    _, res = smoke_run
    copy = tmp_path / res.run_dir.name
    shutil.copytree(res.run_dir, copy)
    path = copy / "reports" / "summary.json"
    body = json.loads(path.read_text())
    body["fingerprint"] = "000000000000"
    path.write_text(json.dumps(body))
    report = pl.verify_run(copy)
    assert not report["ok"]
    assert any("summary.json" in p for p in report["problems"])


def test_stage_failure_names_the_stage(tmp_path, monkeypatch):
    cfg = hc.load_config(SMOKE)
    cfg.output_dir = str(tmp_path)

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(pl, "train_federated", boom)
    with pytest.raises(pl.StageError) as info:
        pl.run_pipeline(cfg)
    assert info.value.stage == "train"
