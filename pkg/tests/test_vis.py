import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hbpool import pooling
from hbpool import tensor as T
from hbpool.data import load_pgm
from hbpool.tensor import ShapeError
from hbpool.trainer import Model
from hbpool.vis import conv_map, export_maps, project_map, response_maps


def feature_model(variant, c=3, d=4, o=2, seed=0):
    rng = np.random.default_rng(seed)
    return Model(variant, pooling.init_head(variant, c, d, o, rng).as_dict())


def test_conv_map_single_hot_location():
    x = np.zeros((4, 5, 3))
    x[2, 1] = [1.0, -2.0, 0.5]
    heat = conv_map(x)
    assert heat[2, 1] == pytest.approx(3.5 / 3)
    heat[2, 1] = 0.0
    assert np.all(heat == 0.0)


def test_project_map_matches_direct_recomputation():
    z = np.random.default_rng(0).normal(size=(3, 4, 5))
    pooled = z.reshape(-1, 5).sum(axis=0)
    direct = np.array([[sum(z[i, j, k] * pooled[k] for k in range(5)) for j in range(4)] for i in range(3)])
    np.testing.assert_allclose(project_map(z), direct, rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 8), st.integers(0, 2**31))
def test_project_map_sums_to_squared_pooled_norm(h, w, d, seed):
    z = np.random.default_rng(seed).normal(size=(h, w, d))
    pooled = T.sum_over_spatial(z)
    assert project_map(z).sum() == pytest.approx(pooled @ pooled, rel=1e-9, abs=1e-12)


def test_rank_checks():
    with pytest.raises(ShapeError):
        conv_map(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        project_map(np.zeros((1, 2, 2, 2)))


@pytest.mark.parametrize("variant,names", [
    ("FBP", ["conv_layer3", "project_layer3"]),
    ("CBP", ["conv_layer2", "conv_layer3", "project_layer23"]),
    ("HBP", ["conv_layer1", "conv_layer2", "conv_layer3",
             "project_layer12", "project_layer13", "project_layer23"]),
])
def test_response_map_names(variant, names):
    maps = np.abs(np.random.default_rng(1).normal(size=(3, 2, 3, 3)))
    out = response_maps(feature_model(variant), tuple(maps))
    assert sorted(out) == names
    assert all(m.shape == (2, 3) for m in out.values())


def test_hbp_project_maps_use_pair_projections():
    model = feature_model("HBP")
    x, y, z = np.abs(np.random.default_rng(2).normal(size=(3, 3, 3, 3)))
    out = response_maps(model, (x, y, z))
    h = model.head
    expected = project_map(T.hadamard(T.project(y, h["V"]), T.project(z, h["S"])))
    np.testing.assert_array_equal(out["project_layer23"], expected)


def test_export_writes_scaled_pgms(tmp_path):
    heat = np.arange(6.0).reshape(2, 3)
    paths = export_maps({"a": heat, "flat": np.full((2, 2), 7.0)}, tmp_path / "maps")
    assert [p.name for p in paths] == ["a.pgm", "flat.pgm"]
    np.testing.assert_array_equal(load_pgm(paths[0]), [[0, 51, 102], [153, 204, 255]])
    assert np.all(load_pgm(paths[1]) == 0)
