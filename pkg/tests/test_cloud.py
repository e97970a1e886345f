import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from plyfile import PlyData, PlyElement

from gsmark.cloud import (GaussianCloud, Origin, PlyFormatError, build_covariance, load_ply,
                          save_ply, sidecar_path, union)
from gsmark.validation import InvalidParameterError

from helpers import random_cloud

finite = st.floats(-3, 3, allow_nan=False)
quat = st.lists(finite, min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3)
logs = st.lists(st.floats(-4, 1), min_size=3, max_size=3)


def test_covariance_identity():
    np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [0, 0, 0]), np.eye(3), atol=1e-15)


def test_covariance_rotated_z():
    c, s = np.cos(np.pi / 4), np.sin(np.pi / 4)
    cov = build_covariance([c, 0, 0, s], [np.log(2), 0, 0])
    # oracle: R diag(4, 1, 1) R^T with R the 90 degree turn about z
    R = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    np.testing.assert_allclose(cov, R @ np.diag([4.0, 1, 1]) @ R.T, atol=1e-12)
    np.testing.assert_allclose(cov, np.diag([1.0, 4, 1]), atol=1e-12)


def test_covariance_degenerate_scale():
    cov = build_covariance([1, 0, 0, 0], [-20, -20, -20])
    assert np.trace(cov) == pytest.approx(3 * np.exp(-40), rel=1e-9)
    assert np.linalg.eigvalsh(cov).min() >= 0


@pytest.mark.parametrize("q,ls", [([np.nan, 0, 0, 1], [0, 0, 0]), ([1, 0, 0, 0], [0, np.inf, 0])])
def test_covariance_rejects_nonfinite(q, ls):
    with pytest.raises(InvalidParameterError):
        build_covariance(q, ls)


@settings(max_examples=60, deadline=None)
@given(quat, logs)
def test_covariance_properties(q, ls):
    cov = build_covariance(q, ls)
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)
    np.testing.assert_allclose(cov, build_covariance(-np.asarray(q), ls), atol=1e-12)
    eig = np.sort(np.linalg.eigvalsh(cov))
    np.testing.assert_allclose(eig, np.sort(np.exp(2 * np.asarray(ls))), rtol=1e-9, atol=1e-14)
    # normalization is idempotent
    qn = np.asarray(q) / np.linalg.norm(q)
    np.testing.assert_allclose(cov, build_covariance(qn, ls), atol=1e-12)


def test_union_counts_and_flags():
    a, b = random_cloud(100, seed=1), random_cloud(10, seed=2)
    u = union(a, b)
    assert len(u) == 110 and u.n_original == 100 and u.n_markers == 10
    assert u.filter(Origin.ORIGINAL).identical(a)


def test_union_empty_markers_is_identity():
    a = random_cloud(7)
    assert union(a, GaussianCloud.empty()).identical(a)


def test_union_degree_mismatch():
    with pytest.raises(InvalidParameterError):
        union(random_cloud(3), random_cloud(3, sh_degree=1))


@pytest.mark.parametrize("degree", [0, 1, 3])
def test_ply_round_trip(tmp_path, degree):
    cloud = union(random_cloud(2, seed=3, sh_degree=degree), random_cloud(3, seed=4, sh_degree=degree))
    save_ply(cloud, tmp_path / "c.ply")
    back = load_ply(tmp_path / "c.ply")
    assert back.identical(cloud)
    meta = json.loads(sidecar_path(tmp_path / "c.ply").read_text())
    assert meta["marker_ranges"] == [[2, 5]]


def test_ply_layout(tmp_path):
    save_ply(random_cloud(2, sh_degree=1), tmp_path / "c.ply")
    names = [p.name for p in PlyData.read(str(tmp_path / "c.ply"))["vertex"].properties]
    assert names[:9] == ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    assert names[9:18] == [f"f_rest_{i}" for i in range(9)]
    assert names[18:] == ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def _write_raw(path, drop=None, nan_field=None):
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    names = [n for n in names if n != drop]
    data = np.zeros(2, dtype=[(n, "<f4") for n in names])
    if "rot_0" in names:
        data["rot_0"] = 1.0
    if nan_field:
        data[nan_field][0] = np.nan
    PlyData([PlyElement.describe(data, "vertex")], text=False, byte_order="<").write(str(path))


def test_ply_missing_property(tmp_path):
    _write_raw(tmp_path / "bad.ply", drop="opacity")
    with pytest.raises(PlyFormatError, match="opacity"):
        load_ply(tmp_path / "bad.ply")


def test_ply_nan_position(tmp_path):
    _write_raw(tmp_path / "nan.ply", nan_field="x")
    with pytest.raises(InvalidParameterError):
        load_ply(tmp_path / "nan.ply")
    with pytest.warns(RuntimeWarning):
        load_ply(tmp_path / "nan.ply", on_nonfinite="warn")


def test_save_rejects_nonfinite(tmp_path):
    c = random_cloud(2)
    bad = c.replace(positions=np.array([[np.nan, 0, 0], [0, 0, 0]]))
    with pytest.raises(InvalidParameterError):
        save_ply(bad, tmp_path / "x.ply")


def test_cloud_is_immutable():
    c = random_cloud(3)
    with pytest.raises(ValueError):
        c.positions[0, 0] = 1.0
