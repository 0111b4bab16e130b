import numpy as np
import pytest

from fedsurg.model import ArchConfig, Batch


SMALL_ARCH = ArchConfig(
    n_continuous=5,
    n_binary=3,
    high_card_specs=((7, 3), (4, 2)),
    branch_hidden=6,
    merge_hidden=8,
    n_outcomes=4,
)


@pytest.fixture
def small_arch() -> ArchConfig:
    return SMALL_ARCH


def random_batch(arch: ArchConfig, n: int, seed: int,
                 surgeon_vocab: int = 0) -> Batch:
    rng = np.random.default_rng(seed)
    return Batch(
        continuous=rng.uniform(0, 1, (n, arch.n_continuous)),
        binary=rng.integers(0, 2, (n, arch.n_binary)).astype(float),
        high_card=tuple(rng.integers(0, v, n) for v, _ in arch.high_card_specs),
        labels=rng.integers(0, 2, (n, arch.n_outcomes)).astype(float),
        surgeon=rng.integers(0, surgeon_vocab + 1, n) if surgeon_vocab else None,
        encounter_ids=[f"e{i}" for i in range(n)],
    )


@pytest.fixture
def batch_factory():
    return random_batch
