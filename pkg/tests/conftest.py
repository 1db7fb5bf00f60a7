import numpy as np
import pytest

from midaslab.model import ModelConfig, MultimodalTransformer
from midaslab.synth import make_sample

SMALL = ModelConfig(d_model=8, n_heads=2, n_layers=2, vocab_size=16, region_dim=3, max_text=6, max_regions=4, d_ff=12)


def random_sample(rng, n_text=3, n_regions=2, region_dim=3, vocab=16, t=True, i=True, sid="x"):
    tokens = rng.integers(0, vocab, size=n_text)
    regions = rng.normal(size=(n_regions, region_dim))
    return make_sample(sid, tokens, regions, t, i)


@pytest.fixture
def small_model():
    return MultimodalTransformer.init(SMALL)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    results = mod.RESULTS
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        ok, detail = results.get(n, (False, "not run or errored before a verdict"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
