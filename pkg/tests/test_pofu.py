import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from igflab import binio
from igflab import fedsim as fs
from igflab import pofu
from igflab.defenses import DefenseConfig, apply_defense
from oracles import linear_ce_grad

SPEC = fs.ModelSpec("mlp", (1, 2, 2), 3)


def forgotten(n=8, seed=0):
    r = np.random.default_rng(seed)
    return fs.ClientDataset(4, r.random((n, 1, 2, 2)).astype(np.float32), r.integers(0, 3, n))


def params(seed):
    return fs.ParamVector(np.random.default_rng(seed).normal(size=SPEC.d), SPEC.layout_id)


def test_identical_models_give_zero_rows():
    p = params(0)
    rec = pofu.compute_pofu(p, p, SPEC, forgotten())
    assert rec.rows.shape == (8, SPEC.d)
    assert not np.any(rec.rows)


def test_single_sample_row_matches_closed_form_difference():
    a, b = params(1), params(2)
    data = forgotten(1)
    x = data.images[0].ravel().astype(np.float64)
    y = int(data.labels[0])

    def g(p):
        v = p.values.astype(np.float64)
        return linear_ce_grad(v[:12].reshape(3, 4), v[12:], x, y)

    rec = pofu.compute_pofu(a, b, SPEC, data)
    np.testing.assert_allclose(rec.rows[0], g(a) - g(b), atol=1e-6)


def test_rows_follow_sample_order():
    a, b = params(1), params(2)
    data = forgotten()
    perm = np.random.default_rng(0).permutation(len(data))
    rows = pofu.compute_pofu(a, b, SPEC, data).rows
    permuted = pofu.compute_pofu(a, b, SPEC, data.subset(perm)).rows
    assert permuted.tobytes() == rows[perm].tobytes()


def test_compute_rejects_empty_and_mismatched_layouts():
    p = params(0)
    with pytest.raises(ValueError):
        pofu.compute_pofu(p, p, SPEC, forgotten().subset(np.array([], dtype=int)))
    other = fs.ParamVector(p.values, "different")
    with pytest.raises(ValueError):
        pofu.compute_pofu(p, other, SPEC, forgotten())


def test_verify_zero_record_passes_any_positive_tau():
    rec = pofu.PoFURecord(0, np.zeros((3, 5)), "x")
    v = pofu.verify_pofu(rec, 0.1)
    assert v.overall and v.passed.all()


def test_verify_boundary_is_inclusive():
    rec = pofu.PoFURecord(0, np.array([[3.0, 4.0]]), "x")
    v = pofu.verify_pofu(rec, 5.0)
    assert v.norms[0] == 5.0 and v.overall
    assert not pofu.verify_pofu(rec, 4.9).overall


def test_verify_rejects_non_positive_tau():
    rec = pofu.PoFURecord(0, np.zeros((1, 2)), "x")
    with pytest.raises(ValueError):
        pofu.verify_pofu(rec, 0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.floats(0.1, 10.0))
def test_overall_pass_iff_every_row_passes(seed, tau):
    rows = np.random.default_rng(seed).normal(size=(6, 4)) * 2
    v = pofu.verify_pofu(pofu.PoFURecord(0, rows, "x"), tau)
    assert v.overall == bool(np.all(np.linalg.norm(rows.astype(np.float32).astype(np.float64), axis=1) <= tau))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12), d=st.integers(3, 400), q=st.floats(0.05, 0.95))
def test_orthogonal_defense_leaves_verdicts_unchanged(seed, n, d, q):
    rows = np.random.default_rng(seed).normal(size=(n, d)) * np.linspace(0.5, 3, n)[:, None]
    rec = pofu.PoFURecord(1, rows, "x")
    norms = np.linalg.norm(rec.rows.astype(np.float64), axis=1)
    # put tau between two row norms, away from the edge by more than the rescale error
    tau = float(np.quantile(norms, q)) * (1 + 1e-4)
    before = pofu.verify_pofu(rec, tau)
    after = pofu.verify_pofu(apply_defense(rec, DefenseConfig("ortho", seed=seed)), tau)
    assert np.array_equal(before.passed, after.passed)
    np.testing.assert_allclose(after.norms, before.norms, rtol=1e-6)


def test_save_load_round_trip(tmp_path):
    rec = pofu.compute_pofu(params(1), params(2), SPEC, forgotten(), "sample-level")
    path = pofu.save_pofu(tmp_path / "c.pofu", rec)
    back = pofu.load_pofu(path)
    assert back.rows.tobytes() == rec.rows.tobytes()
    assert (back.client_id, back.layout_id, back.scenario, back.defense) == (4, SPEC.layout_id, "sample-level",
                                                                             {"id": "none"})


def test_serialized_proof_carries_no_images_or_labels(tmp_path):
    data = forgotten(5)
    rec = pofu.compute_pofu(params(1), params(2), SPEC, data, "sample-level")
    path = pofu.save_pofu(tmp_path / "c.pofu", rec)
    magic, header = binio.peek_header(path)
    assert magic == binio.MAGIC_POFU
    assert set(header) == {"client_id", "n", "d", "scenario", "defense", "layout", "meta"}
    blob = path.read_bytes()
    header_len = len(binio.canonical_json(header).encode())
    assert len(blob) == 20 + header_len + rec.n * rec.d * 4
    for img in data.images:
        assert img.astype("<f4").tobytes() not in blob


def test_record_rejects_non_finite_rows():
    with pytest.raises(ValueError):
        pofu.PoFURecord(0, np.array([[np.inf, 0.0]]), "x")


def test_truncated_file_is_rejected(tmp_path):
    rec = pofu.PoFURecord(0, np.ones((2, 3)), "x")
    path = pofu.save_pofu(tmp_path / "c.pofu", rec)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(binio.FormatError):
        pofu.load_pofu(path)
