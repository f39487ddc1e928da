import numpy as np
import pytest

from sparsevis.model import ModelDims, init_params


def tiny_dims(layers=3, d=8, heads=2, vocab=11, cells=5, d_ff=16, rope_base=100.0):
    return ModelDims(vocab, cells, d=d, heads=heads, layers=layers, d_ff=d_ff, rope_base=rope_base)


def randomize(params, rng, scale=0.5):
    """Replace every weight (zero-initialised ones included) with noise."""
    for k, v in params.arrays.items():
        params.arrays[k] = rng.normal(0, scale, size=v.shape)
    return params


def random_inputs(rng, dims, n_v=6, n_t=4, batch=None):
    shape_v = (n_v,) if batch is None else (batch, n_v)
    shape_t = (n_t,) if batch is None else (batch, n_t)
    return rng.integers(dims.n_cells, size=shape_v), rng.integers(dims.vocab_size, size=shape_t)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_params():
    def make(schedule, seed=0, noisy=True, **kw):
        dims = tiny_dims(layers=schedule.total_layers, **kw)
        p = init_params(dims, schedule, seed)
        return randomize(p, np.random.default_rng(seed + 1)) if noisy else p
    return make
