import os

import numpy as np
import pytest

from pdet import fields as F
from pdet.spectral import generate_dataset


def make_traj(rng, t=30, f=1, n=64, meta=None):
    data = rng.standard_normal((t, f, n, n)).astype(np.float32)
    ft = ["density"] if f == 1 else ["velocity_x", "velocity_y"][:f]
    return F.Trajectory(data, ft, 0.01, 0.0, meta or {"pde": "diff"})


def test_file_size_is_header_plus_payload(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "one.pdet"
    F.write_dataset([make_traj(rng)], path)
    header = F.dataset_header_size(path)
    assert os.path.getsize(path) == header + 30 * 1 * 64 * 64 * 4


def test_roundtrip_is_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    trajs = [make_traj(rng, t=5, f=2, n=8, meta={"pde": "burgers", "params": {"viscosity": 1e-4}, "seed": i})
             for i in range(3)]
    path = tmp_path / "rt.pdet"
    F.write_dataset(trajs, path)
    back = F.read_dataset(path)
    assert len(back) == 3
    for a, b in zip(trajs, back):
        assert a.data.tobytes() == b.data.tobytes()
        assert a.meta == b.meta and a.field_types == b.field_types and a.dt == b.dt


def test_parse_errors_are_distinct(tmp_path):
    rng = np.random.default_rng(2)
    path = tmp_path / "x.pdet"
    F.write_dataset([make_traj(rng, t=2, n=8)], path)
    raw = path.read_bytes()

    bad = tmp_path / "magic.pdet"
    bad.write_bytes(b"NOTPDET!" + raw[8:])
    with pytest.raises(F.MagicError):
        F.read_dataset(bad)

    short = tmp_path / "short.pdet"
    short.write_bytes(raw[:-10])
    with pytest.raises(F.TruncatedError):
        F.read_dataset(short)

    # manifest claims a different shape than nbytes allows
    header = F.dataset_header_size(path)
    text = raw[16:header].decode().replace('"shape": [2, 1, 8, 8]', '"shape": [2, 1, 8, 9]')
    mangled = tmp_path / "manifest.pdet"
    body = text.encode()
    mangled.write_bytes(b"PDETDATA" + len(body).to_bytes(8, "little") + body + raw[header:])
    with pytest.raises(F.ManifestError):
        F.read_dataset(mangled)


def test_write_rejects_inconsistent_shapes(tmp_path):
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError):
        F.write_dataset([make_traj(rng, n=8), make_traj(rng, n=16)], tmp_path / "bad.pdet")
    with pytest.raises(ValueError):
        F.write_dataset([], tmp_path / "empty.pdet")


def test_diff_dataset_records_viscosity_range(tmp_path):
    trajs = generate_dataset("diff", 4, num_steps=2, resolution=16, seed=5)
    path = tmp_path / "diff.pdet"
    F.write_dataset(trajs, path)
    for tr in F.read_dataset(path):
        for key in ("nu_x", "nu_y"):
            assert 0.005 <= tr.meta["params"][key] < 0.05


def test_timestamps_are_uniform():
    tr = F.Trajectory(np.zeros((4, 1, 4, 4)), ["density"], 0.5, 2.0)
    np.testing.assert_array_equal(tr.times, [2.0, 2.5, 3.0, 3.5])
    assert tr.snapshot(2).time == 3.0


def test_snapshot_field_count_checked():
    with pytest.raises(ValueError):
        F.Snapshot(np.zeros((2, 4, 4)), ["density"], 0.0)


# -- normalization -------------------------------------------------------------

def test_normalize_roundtrip_and_identity():
    rng = np.random.default_rng(4)
    tr = F.Trajectory(rng.standard_normal((6, 2, 8, 8)) * [[[[3.0]], [[0.5]]]] + 2.0,
                      ["velocity_x", "velocity_y"], 0.1)
    stats = F.compute_stats([tr])
    back = F.denormalize(F.normalize(tr, stats), stats)
    np.testing.assert_allclose(back.data, tr.data, rtol=1e-6)
    unit = F.FieldStats(np.zeros(2), np.ones(2))
    np.testing.assert_array_equal(F.normalize(tr, unit).data, tr.data)


def test_constant_field_normalizes_to_zero(caplog):
    tr = F.Trajectory(np.full((3, 1, 4, 4), 7.0), ["density"], 0.1)
    stats = F.compute_stats([tr])
    out = F.normalize(tr, stats)
    np.testing.assert_array_equal(out.data, 0.0)
    assert "zero std" in caplog.text


def test_stats_field_mismatch():
    tr = F.Trajectory(np.ones((3, 1, 4, 4)), ["density"], 0.1)
    with pytest.raises(ValueError):
        F.normalize(tr, F.FieldStats(np.zeros(2), np.ones(2)))


def test_stats_come_from_train_split_only():
    trajs = generate_dataset("diff", 12, num_steps=3, resolution=16, seed=2)
    sp = F.paper_style_split(len(trajs), seed=0)
    stats = F.compute_stats([trajs[i] for i in sp.train])
    # independent recomputation from the raw train arrays
    pooled = np.concatenate([trajs[i].data[:, 0].ravel() for i in sp.train])
    np.testing.assert_allclose(stats.mean[0], pooled.mean(), rtol=1e-10)
    np.testing.assert_allclose(stats.std[0], pooled.std(), rtol=1e-10)
    everything = F.compute_stats(trajs)
    assert not np.isclose(everything.mean[0], stats.mean[0], rtol=1e-12)


# -- splitting -------------------------------------------------------------------

def test_paper_style_split_600():
    sp = F.split(600, seed=0, fractions=(0.85, 0.15, 0.0), test_ids=range(500, 600))
    assert sp.test == list(range(500, 600))
    assert len(sp.val) == 75 and len(sp.train) == 425
    assert F.paper_style_split(600, 0).test == list(range(500, 600))


def test_split_all_train_and_determinism():
    sp = F.split(10, seed=3, fractions=(1.0, 0.0, 0.0))
    assert sp.train == list(range(10)) and not sp.val and not sp.test
    a = F.split(50, seed=9)
    b = F.split(50, seed=9)
    assert a == b
    assert not set(a.train) & set(a.val) and not set(a.train) & set(a.test) and not set(a.val) & set(a.test)


def test_split_errors():
    with pytest.raises(ValueError):
        F.split([], seed=0)
    with pytest.raises(ValueError):
        F.split(10, seed=0, fractions=(0.8, 0.2, 0.2))
