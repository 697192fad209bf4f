import numpy as np
import pytest

from densevox.data import PatchBatch
from densevox.model import NetworkSpec


@pytest.fixture
def mini_spec():
    """Scaled-down two-stage spec: 14^3 input -> 4^3 output, cheap to run."""
    return NetworkSpec(variant="proposed", growth=3, init_kernels=4,
                       layers_per_block=2, output_extent=4)


@pytest.fixture
def mini_specs_all():
    common = dict(growth=3, init_kernels=4, layers_per_block=2, output_extent=4)
    return {v: NetworkSpec(variant=v, **common)
            for v in ("proposed", "non_dense", "non_hierarchical", "single_scale")}


def random_batch(spec, n=2, seed=0):
    """Synthetic patch batch with the right geometry for ``spec``."""
    rng = np.random.default_rng(seed)
    e = spec.input_extent
    o = spec.output_extent
    labels = rng.integers(0, spec.num_classes, size=(n, o, o, o))
    return PatchBatch(
        inputs_ft=rng.standard_normal((n, e, e, e, 2)).astype(np.float32),
        inputs_t1=rng.standard_normal((n, e, e, e, 2)).astype(np.float32),
        labels_full=labels,
        labels_binary=(labels != 0).astype(np.int64),
        provenance=[("synthetic", (0, 0, 0))] * n,
    )
