import numpy as np
import pytest

from switchunet import ops
from switchunet.tensor import Parameter, Tape, Tensor, backward

FD_STEP = 1e-4
# Denominator floor: gradients that are exactly zero (e.g. a conv bias feeding a
# train-mode normalization) would otherwise compare rounding noise to noise.
FD_FLOOR = 1e-6


def fd_relative_error(fn, *arrays, seed=0, step=FD_STEP):
    """Worst relative error between tape gradients and central differences.

    ``fn`` maps Parameters to a Tensor; the scalar probed is a fixed random
    projection of its output so every output element contributes.
    """
    rng = np.random.default_rng(seed)
    params = [Parameter(np.array(a, dtype=np.float64), f"p{i}") for i, a in enumerate(arrays)]
    probe = rng.standard_normal(fn(*params).shape)
    with Tape() as tape:
        loss = ops.total(ops.mul(fn(*params), Tensor(probe)))
    backward(tape, loss)
    worst = 0.0
    for p in params:
        numeric = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            old = p.data[idx]
            p.data[idx] = old + step
            hi = float((fn(*params).data * probe).sum())
            p.data[idx] = old - step
            lo = float((fn(*params).data * probe).sum())
            p.data[idx] = old
            numeric[idx] = (hi - lo) / (2 * step)
        scale = max(np.abs(numeric).max(), np.abs(p.grad).max(), FD_FLOOR)
        worst = max(worst, float(np.abs(numeric - p.grad).max() / scale))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blob_manifest(tmp_path_factory):
    from switchunet.synthetic import make_blob_dataset

    return make_blob_dataset(tmp_path_factory.mktemp("blobs"))


def fd_param_error(fn, params, seed=0, step=FD_STEP):
    """Like :func:`fd_relative_error` but perturbs existing Parameters in place;
    ``fn`` takes no arguments and closes over them."""
    rng = np.random.default_rng(seed)
    probe = rng.standard_normal(fn().shape)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = ops.total(ops.mul(fn(), Tensor(probe)))
    backward(tape, loss)
    worst = 0.0
    for p in params:
        numeric = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            old = p.data[idx]
            p.data[idx] = old + step
            hi = float((fn().data * probe).sum())
            p.data[idx] = old - step
            lo = float((fn().data * probe).sum())
            p.data[idx] = old
            numeric[idx] = (hi - lo) / (2 * step)
        scale = max(np.abs(numeric).max(), np.abs(p.grad).max(), FD_FLOOR)
        worst = max(worst, float(np.abs(numeric - p.grad).max() / scale))
    return worst
