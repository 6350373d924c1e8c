import numpy as np
import pytest

from aggnet.data import ClassSpec
from aggnet.synth import synth_sample


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


FINE = ClassSpec("fine", (1.0, 0.0, 0.0, 0.0))
COARSE = ClassSpec("coarse", (0.0, 0.0, 0.0, 1.0))
MIXED = ClassSpec("mixed", (0.25, 0.25, 0.25, 0.25))


def tiny_samples(specs, per_class, gsd, extent_mm, seed, sample_set="S1",
                 tag="t"):
    """Small in-memory sample lists for training tests; extent is scalar."""
    gen = make_rng(seed)
    out = []
    for i in range(per_class):
        for ci, spec in enumerate(specs, start=1):
            out.append(synth_sample(
                spec, gsd, extent_mm, gen, class_index=ci,
                sample_set=sample_set, source_id=f"{tag}_{spec.name}_{i:03d}"))
    return out
