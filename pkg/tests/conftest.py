import numpy as np
import pytest

from linkscope.inject import AnomalyKind, AnomalySpec, Label, inject
from linkscope.traces import generate_synthetic


@pytest.fixture(scope="session")
def small_dataset():
    """80 lossless synthetic links; big enough for stratified machinery."""
    return generate_synthetic(80, seed=11)


@pytest.fixture(scope="session")
def injected_small(small_dataset):
    """One injected scenario per kind on the small dataset."""
    out = {}
    for kind in AnomalyKind:
        spec = AnomalySpec(kind=kind, seed=11)
        out[kind.token] = inject(small_dataset, spec)
    return out


def labels01(rows) -> np.ndarray:
    return np.asarray([1 if r.label is Label.ANOMALOUS else 0 for r in rows], dtype=np.int64)
