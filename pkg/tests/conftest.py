import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from pbt.aging import AgingCondition, EmbeddingCache, HashEmbedder, Stage  # noqa: E402
from pbt.battmoe import ExpertRegistry, RoutingTag, build_registry  # noqa: E402
from pbt.cycledata import SynthConfig, generate_synthetic, preprocess_cell  # noqa: E402
from pbt.model import PBTConfig, init_model, prepare_cells  # noqa: E402


def make_condition(**kw):
    base = dict(
        cathode="LFP",
        anode="graphite",
        format="18650 cylindrical battery",
        temperature=25.0,
        nominal_capacity=1.1,
        manufacturer="A123 system",
        charge_stages=(Stage(1.0, 80.0), Stage(0.5, 100.0, 3.6)),
        discharge_stages=(Stage(1.0, None, 2.0),),
    )
    base.update(kw)
    return AgingCondition(**base)


@pytest.fixture
def condition():
    return make_condition()


@pytest.fixture(scope="session")
def synth_cells():
    """Eight preprocessed synthetic cells (100 cycles each)."""
    recs = generate_synthetic(SynthConfig(n_cells=8, life_min=120, life_max=400), 11)
    return [preprocess_cell(r) for r in recs]


@pytest.fixture(scope="session")
def tiny_config():
    return PBTConfig(d=8, d_ff=16, L1=1, L2=1, heads=2, K_g=1, d_embed=16, dropout=0.0, dtype="float64", label_transform="log")


@pytest.fixture(scope="session")
def tiny_model(synth_cells, tiny_config):
    reg = build_registry([c.condition for c in synth_cells], tiny_config.K_g)
    return init_model(tiny_config, reg, 0)


@pytest.fixture(scope="session")
def embed_cache(tiny_config):
    return EmbeddingCache(HashEmbedder(tiny_config.d_embed))


@pytest.fixture(scope="session")
def prepared(synth_cells, tiny_model, embed_cache):
    return prepare_cells(synth_cells, tiny_model, embed_cache)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def two_expert_registry():
    return ExpertRegistry((RoutingTag("cathode", "LFP"), RoutingTag("cathode", "NCM")), 1)


# acceptance criteria register (number, title, passed) here; printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else ""))
