import numpy as np
import pytest

from saekit.tensor import Tensor, backward, rel_error


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param_grad_check(build, params, eps=1e-6):
    """Check d(loss)/d(param) for every array in ``params`` against central differences.

    ``build(tensors)`` takes a dict of leaf tensors and returns a scalar tensor.
    Returns the max relative error over all coordinates.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in params.items()}
    grads = backward(build(leaves))
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for d in (eps, -eps):
                flat[i] = orig + d
                vals.append(float(build({k: Tensor(v.copy()) for k, v in params.items()}).data))
            flat[i] = orig
            numeric[i] = (vals[0] - vals[1]) / (2 * eps)
        analytic = grads.get(leaves[name], np.zeros_like(arr)).reshape(-1)
        worst = max(worst, float(rel_error(analytic, numeric).max()))
    return worst


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
