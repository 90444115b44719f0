import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparselab.landscape import (
    LandscapeGrid,
    global_norm,
    lipschitz_estimates,
    model_loss_fn,
    percentile_curves,
    sample_direction,
    scan,
    write_curves_csv,
    write_grid_csv,
    write_svg,
)
from sparselab.model import ModelConfig, init_params
from sparselab.tasks import generate
from sparselab.training import evaluate

A = np.array([[2.0, 0.5], [0.5, 1.0]])
THETA = {"w": np.array([0.3, -0.2])}


def quad(theta):
    w = theta["w"]
    return 0.5 * float(w @ A @ w)


def quad_grid(step=0.25, radius=1.0, d1=None, d2=None):
    d1 = d1 or {"w": np.array([1.0, 0.0])}
    d2 = d2 or {"w": np.array([0.0, 2.0])}
    return scan(THETA, d1, d2, step, radius, loss_fn=quad), d1, d2


# ---------------------------------------------------------------- directions


def test_direction_norm_matching():
    theta = {"a": np.arange(6.0).reshape(2, 3), "b": np.ones(4), "z": np.zeros((3, 3))}
    d = sample_direction(theta, seed=1)
    assert abs(np.linalg.norm(d["a"]) - np.linalg.norm(theta["a"])) < 1e-12
    assert abs(np.linalg.norm(d["b"]) - 2.0) < 1e-12
    assert np.all(d["z"] == 0)
    assert set(d) == set(theta)


def test_direction_deterministic_and_seed_dependent():
    theta = {"a": np.ones((5, 5))}
    assert np.array_equal(sample_direction(theta, 3)["a"], sample_direction(theta, 3)["a"])
    assert not np.array_equal(sample_direction(theta, 3)["a"], sample_direction(theta, 4)["a"])


def test_model_direction_skips_fixed_arrays():
    p = init_params(ModelConfig(vocab_size=2, seq_len=5, n_classes=2, d=4, d_mlp=4, tau=1), 0)
    d = sample_direction(p, 0)
    assert "E" not in d and "omega" not in d
    for name, t in p.named():
        assert abs(np.linalg.norm(d[name]) - np.linalg.norm(t.data)) < 1e-12


def test_global_norm():
    assert global_norm({"a": np.array([3.0]), "b": np.array([[4.0]])}) == 5.0


# -------------------------------------------------------------------- scan


def test_quadratic_grid_exact():
    grid, d1, d2 = quad_grid(step=0.5)
    assert grid.loss.shape == (5, 5)
    for i, x in enumerate(grid.coords):
        for j, y in enumerate(grid.coords):
            w = THETA["w"] + x * d1["w"] + y * d2["w"]
            assert grid.loss[i, j] == pytest.approx(0.5 * w @ A @ w, abs=1e-15)
    assert grid.center == quad(THETA)
    assert grid.coords[2] == 0.0


def test_quadratic_lipschitz_matches_difference_quotients():
    grid, d1, d2 = quad_grid(step=0.1)
    est = lipschitz_estimates(grid)
    n1, n2 = global_norm(d1), global_norm(d2)
    c = grid.coords
    for i in range(len(c) - 1):
        for j in range(len(c)):
            a = THETA["w"] + c[i] * d1["w"] + c[j] * d2["w"]
            b = a + 0.1 * d1["w"]
            want = abs(0.5 * b @ A @ b - 0.5 * a @ A @ a) / (0.1 * n1)
            assert abs(est["horizontal"][i, j] - want) < 1e-10
    for i in range(len(c)):
        for j in range(len(c) - 1):
            a = THETA["w"] + c[i] * d1["w"] + c[j] * d2["w"]
            b = a + 0.1 * d2["w"]
            want = abs(0.5 * b @ A @ b - 0.5 * a @ A @ a) / (0.1 * n2)
            assert abs(est["vertical"][i, j] - want) < 1e-10


def test_quadratic_max_estimate_near_gradient_bound():
    grid, d1, d2 = quad_grid(step=0.01)
    est = lipschitz_estimates(grid)
    # largest directional derivative along d1 over the grid square
    u = d1["w"] / global_norm(d1)
    bound = max(
        abs(u @ A @ (THETA["w"] + x * d1["w"] + y * d2["w"])) for x in (-1, 1) for y in (-1, 1)
    )
    assert abs(est["horizontal"].max() - bound) / bound < 0.05


def test_constant_and_linear_surfaces():
    d1, d2 = {"w": np.array([3.0, 4.0])}, {"w": np.array([0.0, 1.0])}
    g = scan(THETA, d1, d2, 0.25, 1.0, loss_fn=lambda t: 7.0)
    e = lipschitz_estimates(g)
    assert np.all(e["horizontal"] == 0) and np.all(e["vertical"] == 0)
    c = 2.5
    g = scan(THETA, d1, d2, 0.25, 1.0, loss_fn=lambda t: c * float(t["w"][0] - THETA["w"][0]) / 3.0)
    h = lipschitz_estimates(g)["horizontal"]
    assert np.allclose(h, abs(c) / 5.0, rtol=1e-12)


def test_swap_directions_transposes():
    g12, d1, d2 = quad_grid()
    g21 = scan(THETA, d2, d1, 0.25, 1.0, loss_fn=quad)
    assert np.allclose(g12.loss, g21.loss.T, atol=1e-15)


def test_homogeneity_of_estimates():
    # doubling the direction and halving the step visits the same points
    g1, _, _ = quad_grid(step=0.25, radius=1.0)
    g2, _, _ = quad_grid(step=0.125, radius=0.5, d1={"w": np.array([2.0, 0.0])}, d2={"w": np.array([0.0, 4.0])})
    e1, e2 = lipschitz_estimates(g1), lipschitz_estimates(g2)
    assert np.allclose(e1["horizontal"], e2["horizontal"], rtol=1e-12)
    assert np.allclose(e1["vertical"], e2["vertical"], rtol=1e-12)


def test_non_finite_cells_flagged():
    def loss(t):
        if t["w"][0] > 0.55:
            raise FloatingPointError
        return math.inf if t["w"][1] > 1.5 else 1.0

    g = scan(THETA, {"w": np.array([1.0, 0.0])}, {"w": np.array([0.0, 2.0])}, 0.25, 1.0, loss_fn=loss)
    assert g.flagged.any()
    assert np.isfinite(g.center)
    for row in percentile_curves(g, [1.0]):
        assert math.isfinite(row["p99"])


def test_scan_arguments():
    with pytest.raises(ValueError):
        scan(THETA, THETA, THETA, 0.3, 1.0, loss_fn=quad)
    with pytest.raises(ValueError):
        scan(THETA, THETA, THETA, 0.5, 1.5, loss_fn=quad)
    with pytest.raises(ValueError):
        scan(THETA, THETA, THETA, 0.5, 1.0)


# ------------------------------------------------------------- percentiles


def test_equal_estimates_give_equal_percentiles():
    c = np.array([-0.5, 0.0, 0.5])
    g = LandscapeGrid(c, c[:, None] + c[None, :], 0.5, 0.5, 1.0, 1.0)
    row = percentile_curves(g, [0.5])[0]
    assert row["count"] == 12
    assert row["p50"] == row["p75"] == row["p95"] == row["p99"] == 1.0
    row0 = percentile_curves(g, [0.0])[0]
    assert row0["count"] == 0 and math.isnan(row0["p50"])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_percentiles_sort_oracle_and_monotone(seed):
    rng = np.random.default_rng(seed)
    n = 4
    coords = np.arange(-n, n + 1) * 0.25
    g = LandscapeGrid(coords, rng.random((2 * n + 1, 2 * n + 1)), 0.25, 1.0, 1.0, 1.0)
    est = lipschitz_estimates(g)
    rows = percentile_curves(g, [0.25, 0.5, 0.75, 1.0], est)
    p99 = [r["p99"] for r in rows]
    maxes = []
    for r, row in zip([0.25, 0.5, 0.75, 1.0], rows):
        inside = np.abs(coords) <= r + 1e-12
        vals = list(est["horizontal"][(inside[1:] & inside[:-1])[:, None] & inside[None, :]])
        vals += list(est["vertical"][inside[:, None] & (inside[1:] & inside[:-1])[None, :]])
        vals = np.sort(vals)
        assert row["count"] == len(vals)
        pos = 0.95 * (len(vals) - 1)
        lo = int(math.floor(pos))
        want = vals[lo] + (vals[min(lo + 1, len(vals) - 1)] - vals[lo]) * (pos - lo)
        assert row["p95"] == pytest.approx(want, abs=1e-12)
        maxes.append(vals.max())
    assert all(a <= b for a, b in zip(maxes, maxes[1:]))
    assert all(np.isfinite(p99))


# ---------------------------------------------------------------- model


def test_model_scan_center_is_training_loss(tmp_path):
    cfg = ModelConfig(vocab_size=2, seq_len=8, n_classes=2, d=8, d_mlp=8, tau=1, dropout=0.5)
    p = init_params(cfg, 0)
    ds = generate("parity", 30, 8, seed=0)
    d1, d2 = sample_direction(p, 1), sample_direction(p, 2)
    g = scan(p, d1, d2, 0.5, 1.0, dataset=ds, mask="topk:3")
    assert abs(g.center - evaluate(p, ds, "topk:3")[0]) < 1e-10
    assert np.all(lipschitz_estimates(g)["horizontal"] >= 0)
    # the scan works on a copy
    assert abs(model_loss_fn(p, ds, "topk:3")(p.state()) - g.center) < 1e-12
    write_grid_csv(g, tmp_path / "grid.csv")
    rows = list(csv.DictReader(open(tmp_path / "grid.csv")))
    assert len(rows) == 25 and set(rows[0]) == {"x", "y", "loss"}
    write_curves_csv(percentile_curves(g, [0.5, 1.0]), tmp_path / "curves.csv")
    head = open(tmp_path / "curves.csv").readline().strip()
    assert head == "radius,p50,p75,p95,p99"
    svg = write_svg(g, tmp_path / "g.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<rect") == 25
