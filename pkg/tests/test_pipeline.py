import csv
from dataclasses import replace

import numpy as np
import pytest

from metaguide.config import EngagementConfig
from metaguide.errors import CorruptFile, EmptyDataset, VersionMismatch
from metaguide.pipeline import (
    QDOT_COLS,
    Dataset,
    collect,
    export_csv,
    load_dataset,
    preprocess,
    save_dataset,
)


@pytest.fixture(scope="module")
def small():
    cfg = EngagementConfig()
    cfg = replace(cfg, collection=replace(cfg.collection, t_max=2.0))
    return cfg, collect(cfg, 3, seed=7)


def _toy(qdot_rows, traj, dt=0.005):
    n = len(traj)
    feats = np.zeros((n, 9))
    feats[:, list(QDOT_COLS)] = qdot_rows
    return Dataset(np.arange(n) * dt, np.asarray(traj), feats, np.zeros((n, 2)), None, {"dt": dt})


def test_collection_deterministic_and_bounded(small):
    cfg, ds = small
    again = collect(cfg, 3, seed=7)
    assert np.array_equal(ds.features, again.features) and np.array_equal(ds.controls, again.controls)
    assert ds.t.max() <= cfg.collection.t_max + cfg.sim.dt + 1e-12
    assert set(np.unique(ds.traj)) == {0, 1, 2}
    assert ds.meta["n_rows"] == len(ds)


def test_random_controls_zero_mean(small):
    cfg, ds = small
    u = ds.controls[ds.controls.any(axis=1)]
    sigma = cfg.collection.control_sigma
    assert np.all(np.abs(u.mean(axis=0)) < 4 * sigma / np.sqrt(len(u)))
    assert np.all(np.abs(u) <= cfg.sim.a_max)


def test_two_point_trajectory_gives_one_transition():
    ds = _toy(np.array([[0.1, 0.2], [0.4, 0.1]]), [0, 0])
    out, _ = preprocess(ds, noise_sigma=0.0)
    assert len(out) == 1
    assert np.allclose(out.targets, [[0.3, -0.1]])


def test_linear_rate_gives_constant_targets():
    k = 0.02
    t = np.arange(50) * 0.005
    ds = _toy(np.column_stack([k * t, -k * t]), np.zeros(50, dtype=int))
    out, _ = preprocess(ds, noise_sigma=0.0)
    assert np.allclose(out.qddot_targets(), [[k, -k]], rtol=1e-9)


def test_pairs_never_cross_trajectories():
    ds = _toy(np.arange(12, dtype=float).reshape(6, 2), [0, 0, 0, 1, 1, 1])
    out, _ = preprocess(ds, noise_sigma=0.0)
    assert len(out) == 4
    assert np.allclose(out.targets, 2.0)


def test_noiseless_preprocess_is_identity_on_features(small):
    _, ds = small
    out, _ = preprocess(ds, noise_sigma=0.0)
    keep = np.nonzero(ds.traj[1:] == ds.traj[:-1])[0]
    assert np.array_equal(out.features, ds.features[keep])


def test_augmentation_leaves_targets_and_controls(small):
    _, ds = small
    clean, _ = preprocess(ds, noise_sigma=0.0)
    noisy, norm = preprocess(ds, noise_sigma=0.05, seed=3)
    assert np.array_equal(clean.targets, noisy.targets)
    assert np.array_equal(clean.controls, noisy.controls)
    assert not np.array_equal(clean.features, noisy.features)
    z = norm.normalize(noisy.model_inputs())
    assert np.all(np.abs(z.mean(axis=0)) < 1e-9)


def test_preprocess_rejects_empty():
    with pytest.raises(EmptyDataset):
        preprocess(_toy(np.zeros((0, 2)), np.zeros(0, dtype=int)))
    with pytest.raises(EmptyDataset):
        preprocess(_toy(np.zeros((2, 2)), [0, 1]))


def test_save_load_round_trip(small, tmp_path):
    _, ds = small
    out, _ = preprocess(ds)
    for d, name in ((ds, "raw.mgd"), (out, "tr.mgd")):
        back = load_dataset(save_dataset(d, tmp_path / name))
        assert back.kind == d.kind
        assert np.array_equal(back.features, d.features) and np.array_equal(back.traj, d.traj)
        if d.targets is not None:
            assert np.array_equal(back.targets, d.targets)
        assert back.meta == d.meta


def test_corrupt_dataset_detected(small, tmp_path):
    _, ds = small
    data = save_dataset(ds, tmp_path / "d.mgd").read_bytes()
    (tmp_path / "t.mgd").write_bytes(data[:-100])
    with pytest.raises(CorruptFile):
        load_dataset(tmp_path / "t.mgd")
    b = bytearray(data)
    b[-50] ^= 0x01
    (tmp_path / "f.mgd").write_bytes(bytes(b))
    with pytest.raises(CorruptFile):
        load_dataset(tmp_path / "f.mgd")
    (tmp_path / "v.mgd").write_bytes(data.replace(b"MGUIDE-DATASET 1", b"MGUIDE-DATASET 9", 1))
    with pytest.raises(VersionMismatch):
        load_dataset(tmp_path / "v.mgd")


def test_csv_export_row_count(small, tmp_path):
    _, ds = small
    n = export_csv(ds, tmp_path / "d.csv")
    with open(tmp_path / "d.csv") as fh:
        rows = list(csv.reader(fh))
    assert n == len(ds) == len(rows) - 1
    assert rows[0][:3] == ["t", "traj", "R"]
