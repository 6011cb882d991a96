import numpy as np
import pytest
from scipy import stats

from ndpp_mcmc import build_kernel, synth_kernel


def random_kernel(n, d, seed, d1=None):
    """Kernel with independent Gaussian factors.

    d1 defaults to leave an even skew width d2, so W has full rank d.
    """
    rng = np.random.default_rng(seed)
    d1 = d - 2 * (d // 4) if d1 is None else d1
    d2 = d - d1
    return build_kernel(rng.normal(size=(n, d1)), rng.normal(size=(n, d2)), rng.normal(size=(d2, d2)))


def symmetric_kernel(n, d, seed):
    """D = 0, so L = V V^T with V of width d - 2 (B carries no mass)."""
    rng = np.random.default_rng(seed)
    return build_kernel(rng.normal(size=(n, d - 2)), rng.normal(size=(n, 2)), np.zeros((2, 2)))


def chi2_pvalue(counts, probs):
    counts = np.asarray(counts, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    keep = probs > 0
    assert counts[~keep].sum() == 0, "draws landed outside the support"
    expected = probs[keep] / probs[keep].sum() * counts.sum()
    return stats.chisquare(counts[keep], expected).pvalue


@pytest.fixture
def k84():
    return synth_kernel(8, 4, 0)


@pytest.fixture
def k108():
    return synth_kernel(10, 8, 1)
