import numpy as np
import pytest

from sonomap import _kernels as K
from sonomap.field import GridConfig, ImpedanceField


@pytest.fixture(autouse=True, scope="session")
def single_threaded_kernels():
    # acceptance timings and byte-determinism are specified single-threaded
    K.set_num_threads(1)


def tiny_config(**kw):
    defaults = dict(levels=4, feature_dim=2, table_size=1 << 12, res_min=4, res_max=16,
                    domain_min=np.zeros(3), domain_max=np.ones(3))
    defaults.update(kw)
    return GridConfig(**defaults)


def tiny_field(seed=1, dtype=np.float64, hidden=8, embed=5, **kw):
    return ImpedanceField(tiny_config(**kw), hidden_dim=hidden, embed_dim=embed,
                          dtype=dtype, seed=seed)


def unit_dirs(rng, n):
    d = rng.standard_normal((n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)
