import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catcnn import checkpoint as ckpt
from catcnn import evaluation as E
from catcnn import pnm
from catcnn.data import SynthConfig, make_dataset, save_scene
from catcnn.groundtruth import compute_bins
from catcnn.model import ArchConfig, forward, init_params
from catcnn.tensor import no_grad


def test_metric_examples():
    r = E.report_from_counts(["a", "b"], [10, 20], [12, 17])
    assert r.mae == 2.5
    assert abs(r.mse - math.sqrt(6.5)) < 1e-12
    assert E.count_metrics([3, 4], [3, 4]) == (0.0, 0.0)
    mae, mse = E.count_metrics([7], [4.5])
    assert mae == mse == 2.5


def test_metrics_reject_empty_or_mismatched():
    with pytest.raises(ValueError):
        E.count_metrics([], [])
    with pytest.raises(ValueError):
        E.count_metrics([1, 2], [1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1e4), st.floats(0, 1e4)), min_size=1, max_size=30))
def test_report_identities(pairs):
    z, e = zip(*pairs)
    r = E.report_from_counts([f"s{i:03d}" for i in range(len(z))], z, e)
    assert r.mae >= 0
    assert r.mse >= r.mae * (1 - 1e-12) - 1e-150  # squares of subnormals underflow
    rows_mae = sum(row.abs_error for row in r.rows) / r.n
    rows_mse = math.sqrt(sum((row.gt_count - row.est_count) ** 2 for row in r.rows) / r.n)
    assert abs(rows_mae - r.mae) <= 1e-12 * max(1.0, r.mae)
    assert abs(rows_mse - r.mse) <= 1e-12 * max(1.0, r.mse)


def test_rows_sorted_by_id():
    r = E.report_from_counts(["b", "c", "a"], [1, 2, 3], [1, 2, 3])
    assert [row.id for row in r.rows] == ["a", "b", "c"]
    assert r.to_csv().splitlines()[0] == "id,gt_count,est_count,abs_error"


@pytest.fixture(scope="module")
def model():
    arch = ArchConfig()
    params = init_params(arch, 2)
    # lift the output so exports are non-trivial
    params["den.bias"].data[:] = 0.05
    params["fus.weight"].data[0, 0, 1, 1] = 1.0
    return params, arch


def test_evaluate_matches_forward(model):
    params, arch = model
    scenes, _ = make_dataset(SynthConfig(seed=4), 3)
    report = E.evaluate(scenes, params, arch)
    with no_grad():
        expected = [float(forward(s.image, params, arch).final_density.data.sum()) for s in scenes]
    assert [row.est_count for row in report.rows] == expected
    assert [row.gt_count for row in report.rows] == [s.count for s in scenes]
    with pytest.raises(ValueError):
        E.evaluate([], params, arch)


def test_predict_exports(tmp_path, model):
    params, arch = model
    scenes, _ = make_dataset(SynthConfig(seed=5), 1)
    save_scene(scenes[0], tmp_path / "img.pgm", tmp_path / "img.txt")
    ckpt.save(tmp_path / "m.ckpt", params, arch, compute_bins([1, 9]))
    count = E.predict(tmp_path / "img.pgm", tmp_path / "m.ckpt", tmp_path / "out")

    raw = E.read_density_csv(tmp_path / "out" / "density.csv")
    assert raw.shape == (16, 16)
    assert abs(raw.sum() - count) < 1e-9

    dens, maxval, comments = pnm.read_pnm(tmp_path / "out" / "density.pgm")
    peak = float(comments[0].split("=")[1])
    assert peak == raw.max()
    np.testing.assert_allclose(dens[0] / 65535 * peak, raw, atol=peak / 65535)

    image = pnm.read_image(tmp_path / "img.pgm")
    with no_grad():
        conf = forward(image, params, arch).confidence.data[0]
    craw, cmax, _ = pnm.read_pnm(tmp_path / "out" / "confidence.pgm")
    assert cmax == 65535 and craw.min() >= 0 and craw.max() <= 65535
    np.testing.assert_allclose(craw[0] / 65535, conf, atol=0.5 / 65535 + 1e-12)

    over, _, _ = pnm.read_pnm(tmp_path / "out" / "overlay.ppm")
    assert over.shape == (3, 64, 64)
    up = np.repeat(np.repeat(conf, 4, 0), 4, 1)
    expected = 0.3 * image[0] + 0.7 * up  # red channel of the ramp is c
    np.testing.assert_allclose(over[0] / 65535, expected, atol=1 / 65535)
    np.testing.assert_allclose(over[2] / 65535, 0.3 * image[0] + 0.7 * (1 - up), atol=1 / 65535)


def test_predict_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        E.predict(tmp_path / "nope.pgm", tmp_path / "nope.ckpt", tmp_path / "out")


def test_density_raster_zero_map():
    r, peak = E.density_raster(np.zeros((3, 3)))
    assert peak == 0.0 and np.all(r == 0)
