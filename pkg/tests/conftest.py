import numpy as np
import pytest

from sparselab import tensor as tn


def fd_errors(loss_fn, tensors, n_coords=50, h=1e-5, seed=0):
    """Relative errors ``|g - g_fd| / max(1, |g_fd|)`` on sampled coordinates.

    ``loss_fn()`` must rebuild the graph from ``tensors`` and return a scalar
    Tensor. Coordinates are spread over all tensors.
    """
    for t in tensors:
        t.grad = None
    tn.backward(loss_fn())
    grads = [t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_coords):
        ti = int(rng.integers(len(tensors)))
        t = tensors[ti]
        idx = tuple(int(rng.integers(n)) for n in t.shape)
        old = t.data[idx]
        t.data[idx] = old + h
        up = loss_fn().item()
        t.data[idx] = old - h
        down = loss_fn().item()
        t.data[idx] = old
        fd = (up - down) / (2 * h)
        errs.append(abs(grads[ti][idx] - fd) / max(1.0, abs(fd)))
    return np.array(errs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Reference dispersion statistics and the corollary left-hand sides derived
# from them: per task, three percentile levels of (delta_s, delta_h,
# Delta_h, beta) and the expected (lhs_W, lhs_X).
BOUND_TABLE = {
    "listops": dict(ds=[8.61, 18.5, 29.4], dh=[3.51, 6.74, 9.67], sep=[0.016, 0.005, 0.002], beta=[1, 3, 15],
                    lhs_w=[0.97, 0.69, 0.56], lhs_x=[0.96, 0.72, 0.63]),
    "parity": dict(ds=[8.30, 10.1, 11.2], dh=[2.31, 3.13, 3.78], sep=[0.062, 0.022, 0.011], beta=[8, 13, 16],
                   lhs_w=[0.70, 0.76, 0.80], lhs_x=[0.87, 0.94, 0.99]),
    "even_pairs": dict(ds=[2.03, 4.73, 9.44], dh=[1.03, 2.84, 5.50], sep=[0.009, 0.003, 0.002], beta=[6, 17, 26],
                       lhs_w=[3.17, 1.98, 1.31], lhs_x=[3.59, 2.40, 1.58]),
    "missing_duplicates": dict(ds=[4.63, 9.25, 17.1], dh=[2.36, 4.25, 4.88], sep=[0.018, 0.006, 0.003], beta=[7, 15, 21],
                               lhs_w=[1.53, 1.09, 0.67], lhs_x=[1.79, 1.30, 0.80]),
}


def table_lhs(row: dict, i: int) -> tuple[float, float]:
    """Corollary LHS for percentile level ``i`` of a table row, taking
    ``delta_s = 2 Gamma Xi^2`` with ``Xi = 1``."""
    from sparselab.stability import corollary_lhs

    ds = row["ds"][i]
    return corollary_lhs(row["dh"][i] / ds, row["sep"][i] / ds, ds, ds / 2, 1.0, row["beta"][i])


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
