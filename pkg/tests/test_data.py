import dataclasses
import struct

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stsr import data as D
from stsr.genegraph import coexpression_matrix


def stack(arr):
    return D.STStack(np.asarray(arr, dtype=float))


# ---------------------------------------------------------------- generator


def test_rank_one_case_gives_identical_maps():
    spec = D.SyntheticSpec(n_genes=3, n_programs=1, noise=0.0, loading=((1.0,), (1.0,), (1.0,)))
    hr, hist, L = D.generate(spec)
    npt.assert_array_equal(hr.data[0], hr.data[1])
    npt.assert_array_equal(hr.data[0], hr.data[2])
    npt.assert_array_equal(L, np.ones((3, 1)))


def test_generate_is_deterministic():
    spec = D.SyntheticSpec(seed=11)
    a, b = D.generate(spec), D.generate(spec)
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()
    assert not np.array_equal(a[0].data, D.generate(spec, seed=12)[0].data)


def test_generate_shapes_and_ranges():
    spec = D.SyntheticSpec()
    hr, hist, L = D.generate(spec)
    assert hr.shape == (4, 32, 32) and np.all(hr.data >= 0)
    assert hist.data.shape == (3, 64, 64)
    assert hist.data.min() >= 0 and hist.data.max() <= 1
    assert L.shape == (4, 2)


def test_within_block_correlation_exceeds_cross_block():
    spec = D.SyntheticSpec()
    blk = D.block_of(spec)
    within, cross = [], []
    for hr, _, _ in D.generate_dataset(spec, 16):
        C = np.corrcoef(hr.data.reshape(spec.n_genes, -1))
        for i in range(spec.n_genes):
            for j in range(i + 1, spec.n_genes):
                (within if blk[i] == blk[j] else cross).append(C[i, j])
    assert np.mean(within) - np.mean(cross) >= 0.3


def test_coexpression_recovers_blocks():
    spec = D.SyntheticSpec()
    blk = D.block_of(spec)
    same = blk[:, None] == blk[None, :]
    off = ~np.eye(spec.n_genes, dtype=bool)
    gaps = []
    for hr, _, _ in D.generate_dataset(spec, 8):
        I = coexpression_matrix(hr.data.reshape(spec.n_genes, -1))
        gaps.append(I[same & off].mean() - I[~same].mean())
    assert np.mean(gaps) >= 0.2


@pytest.mark.parametrize("bad", [dict(n_programs=5), dict(sr_factor=5), dict(noise=-1.0),
                                 dict(hist_size=48), dict(loading=((1.0,),))])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        D.SyntheticSpec(**bad).validate()


def test_stack_validation():
    with pytest.raises(ValueError):
        stack(-np.ones((1, 2, 2)))
    with pytest.raises(ValueError):
        stack(np.ones((2, 2)))
    with pytest.raises(ValueError):
        D.STStack(np.ones((2, 2, 2)), genes=["a"])


# ---------------------------------------------------------------- degradation


def test_degrade_examples():
    assert D.degrade(stack([[[0, 2], [4, 6]]]), 2).data.tolist() == [[[3.0]]]
    c = D.degrade(stack(np.full((2, 8, 8), 1.25)), 4)
    npt.assert_array_equal(c.data, 1.25)
    assert c.scale == 40.0
    with pytest.raises(ValueError):
        D.degrade(stack(np.ones((1, 6, 6))), 4)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 8, 8), elements=st.floats(0, 100)))
def test_degrade_composes_and_preserves_mean(x):
    s = stack(x)
    npt.assert_allclose(D.degrade(D.degrade(s, 2), 2).data, D.degrade(s, 4).data, rtol=1e-12, atol=1e-12)
    npt.assert_allclose(D.degrade(s, 4).data.mean(), x.mean(), rtol=1e-12, atol=1e-12)


def test_normalization_roundtrip():
    rng = np.random.default_rng(0)
    xs = [rng.uniform(0, 5, size=(3, 4, 4)) for _ in range(3)]
    lo, hi = D.norm_constants(xs)
    n = D.normalize(xs[1], lo, hi)
    assert n.min() >= 0 and n.max() <= 1
    npt.assert_allclose(D.denormalize(n, lo, hi), xs[1], atol=1e-12)


# ---------------------------------------------------------------- metrics


def test_metric_examples():
    a = np.array([0.0, 1.0, 2.0])
    assert D.rmse(a, a) == 0.0 and D.pcc(a, a) == pytest.approx(1.0)
    z = a - a.mean()
    assert D.pcc(z, -z) == pytest.approx(-1.0)
    assert D.rmse(a, 2 * a) == pytest.approx(np.sqrt(5 / 3))
    assert D.pcc(a, 2 * a) == pytest.approx(1.0)


def test_metric_errors():
    with pytest.raises(D.UndefinedVarianceError):
        D.pcc(np.ones(4), np.arange(4.0))
    with pytest.raises(ValueError):
        D.rmse(np.ones(3), np.ones(4))


def test_per_gene_metrics_marks_constant_gene():
    p = np.zeros((2, 2, 2))
    p[0] = [[0, 1], [2, 3]]
    t = p.copy()
    t[1] = 1.0
    rows = D.per_gene_metrics(p, t)
    assert rows[0] == (0.0, pytest.approx(1.0))
    assert np.isnan(rows[1][1]) and rows[1][0] == 1.0


# ---------------------------------------------------------------- container


def test_container_roundtrip_bound(tmp_path):
    rng = np.random.default_rng(1)
    x = rng.normal(0, 50, size=(4, 16, 16))
    path = tmp_path / "x.dstc"
    meta = {"genes": ["a", "b", "c", "d"], "scale": 10.0, "norm_min": [0.0] * 4}
    D.save_container(path, {"hr": x, "w": np.arange(3.0)}, meta)
    got, m = D.load_container(path)
    assert m == meta
    assert np.max(np.abs(got["hr"] - x)) <= 2.0 ** -23 * np.max(np.abs(x))
    npt.assert_array_equal(got["w"], [0, 1, 2])


def test_container_f8_is_exact(tmp_path):
    x = np.random.default_rng(2).normal(size=(3, 5))
    D.save_container(tmp_path / "x", {"x": x}, dtype="<f8")
    npt.assert_array_equal(D.load_container(tmp_path / "x")[0]["x"], x)


def test_container_empty(tmp_path):
    path = tmp_path / "e.dstc"
    D.save_container(path, {})
    buf = path.read_bytes()
    assert buf[:4] == b"DSTC" and buf[4] == 1
    (hlen,) = struct.unpack_from("<I", buf, 5)
    assert len(buf) == 9 + hlen
    assert D.load_container(path) == ({}, {})


def test_container_layout_is_little_endian_f4(tmp_path):
    path = tmp_path / "l.dstc"
    D.save_container(path, {"v": np.array([1.5, -2.0])})
    buf = path.read_bytes()
    assert buf[-8:] == struct.pack("<2f", 1.5, -2.0)


def test_container_errors(tmp_path):
    path = tmp_path / "x.dstc"
    D.save_container(path, {"x": np.ones((4, 4))})
    buf = path.read_bytes()

    (tmp_path / "magic").write_bytes(b"XSTC" + buf[4:])
    with pytest.raises(D.BadMagicError):
        D.load_container(tmp_path / "magic")
    (tmp_path / "ver").write_bytes(buf[:4] + bytes([9]) + buf[5:])
    with pytest.raises(D.VersionMismatchError):
        D.load_container(tmp_path / "ver")
    (tmp_path / "trunc").write_bytes(buf[:-3])
    with pytest.raises(D.TruncatedPayloadError):
        D.load_container(tmp_path / "trunc")
    for cls in (D.BadMagicError, D.VersionMismatchError, D.TruncatedPayloadError):
        assert issubclass(cls, D.ContainerError)


def test_generate_dataset_children_are_distinct():
    ds = D.generate_dataset(dataclasses.replace(D.SyntheticSpec(), hr_size=16, hist_size=32), 3)
    assert len({d[0].data.tobytes() for d in ds}) == 3
