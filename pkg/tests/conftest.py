import numpy as np
import pytest

from actloc.nn import forward_batch, init_params, model_backward
from actloc.training import LossConfig, masked_loss_and_grad


def random_model(rng, num_layers, input_dim, cells, num_classes, dropout_p=0.3, scale=0.5):
    """Small model with weights spread well beyond the init range."""
    params = init_params(num_layers, cells, num_classes, input_dim, seed=int(rng.integers(1 << 30)),
                         dropout_p=dropout_p)
    return params.map(lambda a: a + rng.normal(0.0, scale, a.shape))


def finite_difference_check(params, x, targets, mask, rho=0.3, seed=0, h=1e-4):
    """Max relative error between BPTT gradients and central differences."""

    def loss_and_grad(p):
        _, trace = forward_batch(p, x, train=True, rng=np.random.default_rng(seed))
        return masked_loss_and_grad(trace.logits, targets, mask, LossConfig(rho))

    _, trace = forward_batch(params, x, train=True, rng=np.random.default_rng(seed))
    analytic = model_backward(params, trace, loss_and_grad(params)[1])
    worst = 0.0
    for a, ga in zip(params.arrays(), analytic.arrays()):
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            up = loss_and_grad(params)[0]
            a[idx] = old - h
            down = loss_and_grad(params)[0]
            a[idx] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - ga[idx]) / max(abs(fd), abs(ga[idx]), 1e-8))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    item_marker = _pending.get(report.nodeid)
    if item_marker is None:
        return
    number, text = item_marker
    ok = report.passed if report.when == "call" else False
    prev = _criteria.get(number, (text, True))
    _criteria[number] = (text, prev[1] and ok)


_pending = {}


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            _pending[item.nodeid] = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        text, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {text}")
