import csv

import numpy as np
import pytest

from ganprior import hmc, nets
from ganprior.active import candidate_grid, run_active, select_window, window_pixels
from ganprior.errors import ConfigError, ContractError
from ganprior.map_opt import MapConfig

FAST_HMC = hmc.HmcConfig(n_samples=60, n_leapfrog=3)
FAST_MAP = MapConfig(max_iters=30, n_restarts=2)


def test_candidate_grid_and_clipping():
    grid = candidate_grid((16, 16), 7)
    assert grid == [(0, 0), (0, 7), (0, 14), (7, 0), (7, 7), (7, 14), (14, 0), (14, 7), (14, 14)]
    sizes = [window_pixels(o, 7, (16, 16)).size for o in grid]
    assert sizes == [49, 49, 14, 49, 49, 14, 14, 14, 4]
    assert sum(sizes) == 256


def test_select_concentrated_variance():
    var = np.zeros((14, 14))
    var[8:10, 9:11] = 1.0
    assert select_window(var, 7) == (7, 7)


def test_select_uniform_variance_takes_first_row_major():
    assert select_window(np.full((16, 16), 0.37), 7) == (0, 0)
    assert select_window(np.full((16, 16), 0.37), 7, revealed=[(0, 0)]) == (0, 7)


def test_select_by_window_mean_not_single_pixel():
    var = np.zeros((7, 14))
    var[3, 3] = 10.0  # window A holds the single largest pixel
    var[:, 7:] = 0.5  # window B has the larger mean (0.5 > 10/49)
    assert select_window(var, 7) == (0, 7)


def test_select_with_no_candidates():
    with pytest.raises(ContractError):
        select_window(np.ones((7, 7)), 7, revealed=[(0, 0)])


def tiny_generator():
    return nets.init(nets.generator_spec(2, 64, hidden=(8,)), 0)


def truth_image():
    img = -np.ones((8, 8))
    img[2:6, 1:5] = 1.0
    return img.ravel()


def test_full_reveal_covers_image_and_masks_grow():
    state = run_active(truth_image(), tiny_generator(), strategy="variance", n_windows=4, window_size=4,
                       hmc_config=FAST_HMC, map_config=FAST_MAP, seed=1)
    assert state.mask.revealed.all()
    assert np.diff([0] + state.revealed_counts).tolist() == [16, 16, 16, 16]
    assert len(set(state.windows)) == 4
    assert not np.isnan(state.measurements).any()


def test_random_strategy_reproducible():
    kwargs = dict(strategy="random", n_windows=3, window_size=4, hmc_config=FAST_HMC, map_config=FAST_MAP, seed=7)
    a = run_active(truth_image(), tiny_generator(), **kwargs)
    b = run_active(truth_image(), tiny_generator(), **kwargs)
    assert a.windows == b.windows
    assert a.errors == b.errors


def test_inference_sees_only_revealed_pixels():
    # two truths that differ only outside the first revealed window give the same first posterior
    gen = tiny_generator()
    t1 = truth_image()
    t2 = t1.copy()
    t2[-1] = 5.0
    kwargs = dict(strategy="random", n_windows=1, window_size=4, hmc_config=FAST_HMC, map_config=FAST_MAP, seed=3)
    a = run_active(t1, gen, **kwargs)
    b = run_active(t2, gen, **kwargs)
    assert a.windows[0] != (4, 4)
    assert np.array_equal(a.history[0].mean, b.history[0].mean)
    assert a.errors[0] != b.errors[0]


def test_outputs_written(tmp_path):
    state = run_active(truth_image(), tiny_generator(), strategy="variance", n_windows=2, window_size=4,
                       hmc_config=FAST_HMC, map_config=FAST_MAP, seed=0, out_dir=tmp_path)
    names = {p.name for p in state.files}
    for it in (1, 2):
        for kind in ("map", "mean", "variance", "mask"):
            assert f"variance_{it:02d}_{kind}.pgm" in names
    rows = list(csv.reader((tmp_path / "variance_trace.csv").open()))
    assert rows[0] == ["iteration", "window_row", "window_col", "revealed", "error"]
    assert len(rows) == 3


def test_argument_validation():
    with pytest.raises(ConfigError):
        run_active(truth_image(), tiny_generator(), strategy="greedy")
    with pytest.raises(ConfigError):
        run_active(truth_image(), tiny_generator(), n_windows=10, window_size=4)
