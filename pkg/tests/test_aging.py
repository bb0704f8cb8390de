import time

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_condition
from pbt.aging import (
    AgingCondition,
    EmbeddingCache,
    HashEmbedder,
    RemoteEmbedder,
    Stage,
    condition_key,
    embed_hash,
    embed_remote,
    fmt_num,
    last_valid_pool,
    make_embedder,
    parse_embed_response,
    render_prompt,
    tokenize,
)
from pbt.embed_server import running_stub, token_matrix
from pbt.errors import DimensionMismatch, EmbedderUnavailable, EmptyPrompt, InputError, NoValidToken, ProtocolError

A123 = dict(
    cathode="a lithium iron phosphate (LiFePO₄)",
    anode="graphite",
    format="18650 cylindrical battery",
    temperature=30.0,
    nominal_capacity=1.1,
    manufacturer="A123 system",
    charge_stages=(Stage(4.8, 20), Stage(5.2, 40), Stage(5.2, 60), Stage(4.16, 80, 3.6)),
    discharge_stages=(Stage(4.0, None, 2.0),),
)

EXPECTED_A123 = (
    "Task description: The target the number of cycles until the battery’s discharge capacity reaches 80% of its "
    "nominal capacity. The discharge capacity is calculated under the described operating condition. Please directly "
    "output the target of the battery based on the provided data.\n\n"
    "Battery specifications: The data comes from a lithium-ion battery in a format of 18650 cylindrical battery. "
    "Its positive electrode is a lithium iron phosphate (LiFePO₄). Its negative electrode is graphite. The electrolyte "
    "formula is unknown. The battery manufacturer is A123 system. The nominal capacity is 1.1 Ah.\n\n"
    "Operating condition: The working history of this battery is just after formation. The working ambient temperature "
    "of this battery is 30 degrees Celsius. The cycling consists of four charging stages. In the first stage, the battery "
    "was charged at a constant current of 4.8 C to 20% state-of-charge (SOC). In the second stage, the battery was charged "
    "at a constant current of 5.2 C to 40% SOC. In the third stage, the battery was charged at a constant current of 5.2 C "
    "to 60% SOC. In the fourth stage, the battery was charged at a constant current of 4.16 C to 80% SOC until reaching "
    "3.6 V. The battery was then discharged at a constant current of 4 C until reaching 2 V. The cycling state-of-charge "
    "of this battery ranges from 0% to 100%."
)


# ---------------------------------------------------------------- conditions

def test_render_reference_prompt():
    text = render_prompt(AgingCondition(**A123), 0.8)
    assert text == EXPECTED_A123
    assert "The nominal capacity is 1.1 Ah." in text
    assert "The working history of this battery is just after formation." in text
    assert "The electrolyte formula is unknown." in text


def test_render_deterministic_and_threshold():
    c = AgingCondition(**A123)
    assert render_prompt(c) == render_prompt(c)
    assert "reaches 90% of its nominal capacity" in render_prompt(c, 0.9)


def test_render_single_charge_and_multi_discharge():
    c = make_condition(
        charge_stages=(Stage(3.6, 80, 3.6),),
        discharge_stages=(Stage(2.0, 50), Stage(1.0, None, 2.0)),
        formation_protocol="Formed at 0.1 C for three cycles",
        electrolyte="1M LiPF6 in EC:EMC 3:7",
    )
    text = render_prompt(c)
    assert "In the cycling, the battery was charged at a constant current of 3.6 C to 80% state-of-charge (SOC) until reaching 3.6 V." in text
    assert "The discharging consists of two stages. In the first stage, the battery was discharged at a constant current of 2 C to 50% SOC." in text
    assert "Formed at 0.1 C for three cycles." in text
    assert "The electrolyte formula is 1M LiPF6 in EC:EMC 3:7." in text


def test_condition_validation():
    with pytest.raises(InputError):
        make_condition(cathode="")
    with pytest.raises(InputError):
        make_condition(temperature=float("nan"))
    with pytest.raises(InputError):
        make_condition(soc_range=(80, 20))
    with pytest.raises(InputError):
        AgingCondition.from_dict({**make_condition().to_dict(), "colour": "red"})


def test_condition_dict_roundtrip():
    c = make_condition(electrolyte="x")
    assert AgingCondition.from_dict(c.to_dict()) == c


def test_condition_keys():
    a = make_condition()
    assert condition_key(a) == condition_key(make_condition())
    assert condition_key(a) != condition_key(make_condition(temperature=35.0))
    other = make_condition(charge_stages=(Stage(1.5, 80.0), Stage(0.5, 100.0, 3.6)))
    assert condition_key(a) != condition_key(other)
    assert condition_key(make_condition(temperature=-0.0)) == condition_key(make_condition(temperature=0.0))


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_fmt_num_roundtrips(x):
    assert float(fmt_num(x)) == x + 0.0
    assert not fmt_num(x).endswith(".0")


# ---------------------------------------------------------------- pooling

def test_last_valid_pool_examples():
    rows = np.arange(12.0).reshape(3, 4)
    assert last_valid_pool(rows, [1, 1, 0]).tolist() == rows[1].tolist()
    assert last_valid_pool(rows, [1, 0, 0]).tolist() == rows[0].tolist()
    with pytest.raises(NoValidToken):
        last_valid_pool(rows, [0, 0, 0])
    with pytest.raises(DimensionMismatch):
        last_valid_pool(rows, [1, 1])


# ---------------------------------------------------------------- hashing embedder

def test_tokenize():
    assert tokenize("Charged at 0.5 C to 80% SOC.") == ["charged", "at", "0.5", "c", "to", "80", "soc"]


@given(st.text(min_size=1).filter(lambda s: tokenize(s)), st.sampled_from([8, 16, 256]))
def test_embed_hash_unit_norm_and_deterministic(text, d):
    v = embed_hash(text, d)
    assert v.shape == (d,)
    assert abs(np.linalg.norm(v) - 1.0) <= 1e-9
    assert np.array_equal(v, embed_hash(text, d))


def test_embed_hash_distinguishes_conditions():
    pouch = make_condition(
        cathode="Li(Ni0.33Co0.33Mn0.33)O2 (NCM111)", format="pouch battery", temperature=-5.0, nominal_capacity=5.0,
        manufacturer="LISHEN", charge_stages=(Stage(1.5, None, 4.2),), discharge_stages=(Stage(1.5, None, 3.0),),
    )
    cyl = make_condition(
        cathode="Li(Ni0.5Co0.2Mn0.3)O2 (NCM523)", temperature=20.0, nominal_capacity=2.0, manufacturer="LISHEN",
        charge_stages=(Stage(2.0, None, 4.2),), discharge_stages=(Stage(1.0, None, 2.5),),
    )
    a, b = embed_hash(render_prompt(pouch)), embed_hash(render_prompt(cyl))
    assert float(a @ b) < 1.0


def test_embed_hash_rejects_empty():
    with pytest.raises(EmptyPrompt):
        embed_hash("  ...  ")


def test_embedding_cache_memoizes():
    calls = []

    def embedder(prompt):
        calls.append(prompt)
        return embed_hash(prompt, 16)

    cache = EmbeddingCache(embedder)
    c = make_condition()
    v1, v2 = cache(c), cache(make_condition())
    assert np.array_equal(v1, v2) and len(calls) == 1 and len(cache) == 1
    cache(c, 0.9)
    assert len(calls) == 2


# ---------------------------------------------------------------- wire protocol

def test_parse_response_validation():
    good = {"dim": 2, "tokens": [[1.0, 2.0], [3.0, 4.0]], "mask": [1, 0]}
    assert parse_embed_response(good, 2).tolist() == [1.0, 2.0]
    for bad in (
        {"dim": 2, "tokens": [[1.0, 2.0]]},
        {"dim": 2, "tokens": [[1.0]], "mask": [1]},
        {"dim": 2, "tokens": [[1.0, 2.0]], "mask": [2]},
        {"dim": 2, "tokens": [[1.0, "x"]], "mask": [1]},
        {"dim": 2, "tokens": [], "mask": []},
        [1, 2],
    ):
        with pytest.raises(ProtocolError):
            parse_embed_response(bad, 2)
    with pytest.raises(DimensionMismatch):
        parse_embed_response(good, 3)


def test_token_matrix_rows():
    m = token_matrix("alpha beta gamma", 16, pad_to=8)
    assert len(m["tokens"]) == 8 and m["mask"] == [1, 1, 1, 0, 0, 0, 0, 0]
    assert np.allclose(m["tokens"][1], embed_hash("alpha beta", 16))


def test_remote_fixed_matrix():
    fixed = {"dim": 4, "tokens": [[1, 2, 3, 4], [5, 6, 7, 8], [9, 9, 9, 9]], "mask": [1, 1, 0]}
    with running_stub(d_embed=4, fixed_response=fixed) as url:
        assert embed_remote("hello", url, 4).tolist() == [5, 6, 7, 8]


def test_remote_dimension_mismatch():
    fixed = {"dim": 5, "tokens": [[0, 0, 0, 0, 1]], "mask": [1]}
    with running_stub(d_embed=5, fixed_response=fixed) as url:
        with pytest.raises(DimensionMismatch):
            embed_remote("hello", url, 4)


def test_remote_matches_hash_embedder(condition):
    prompt = render_prompt(condition)
    with running_stub(d_embed=32) as url:
        remote = RemoteEmbedder(url, 32)
        assert np.array_equal(remote(prompt), embed_hash(prompt, 32))
        assert remote.describe()["kind"] == "remote"


def test_remote_http_errors():
    with running_stub(d_embed=8) as url:
        r = httpx.post(url + "/embed", content=b"{not json")
        assert r.status_code == 400
        assert httpx.post(url + "/other", json={"prompt": "x"}).status_code == 404
        with pytest.raises(ProtocolError):
            embed_remote("x", url + "/nope/", 8)


def test_unreachable_endpoint_fails_fast():
    t0 = time.monotonic()
    with pytest.raises(EmbedderUnavailable):
        embed_remote("hello", "http://127.0.0.1:9", 8, timeout=1.0)
    assert time.monotonic() - t0 < 2.0


def test_make_embedder():
    assert isinstance(make_embedder(None, 16), HashEmbedder)
    assert isinstance(make_embedder({"kind": "remote", "endpoint": "http://x"}, 16), RemoteEmbedder)
    with pytest.raises(InputError):
        make_embedder({"kind": "magic"}, 16)
