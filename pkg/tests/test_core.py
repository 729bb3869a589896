import pytest
from hypothesis import given, strategies as st

from kvsim.core import (
    A100_80GB,
    ConfigError,
    GpuConfig,
    ModelConfig,
    PRESET_MODELS,
    Request,
    SequenceState,
    Status,
    check_sequence,
    kv_bytes_per_token,
    kv_cache_bytes,
)


def test_neox_per_token_bytes():
    assert kv_bytes_per_token(PRESET_MODELS["gpt-neox"]) == 1_081_344


def test_unit_model_is_four_bytes(tiny_model):
    assert kv_bytes_per_token(tiny_model) == 4


def test_gptj_per_token_bytes():
    # 2 (K,V) * 2 bytes * 28 layers * 5120
    assert kv_bytes_per_token(PRESET_MODELS["gpt-j"]) == 573_440


def test_bytes_per_number_scales():
    m = ModelConfig("fp32", 44, 6144, bytes_per_number=4)
    assert kv_bytes_per_token(m) == 2 * 1_081_344


@pytest.mark.parametrize("tokens, expected", [(0, 0), (2048, 2_214_592_512)])
def test_neox_cache_bytes(tokens, expected):
    assert kv_cache_bytes(PRESET_MODELS["gpt-neox"], tokens) == expected


def test_cache_bytes_small(tiny_model):
    assert kv_cache_bytes(tiny_model, 3) == 12


def test_negative_tokens_rejected(tiny_model):
    with pytest.raises(ValueError):
        kv_cache_bytes(tiny_model, -1)


@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(1, 128), st.integers(1, 8192))
def test_cache_bytes_linear(a, b, layers, dim):
    m = ModelConfig("h", layers, dim)
    assert kv_cache_bytes(m, a + b) == kv_cache_bytes(m, a) + kv_cache_bytes(m, b)


@given(st.integers(1, 200), st.integers(1, 20000), st.integers(1, 10))
def test_per_token_monotone(layers, dim, step):
    m = ModelConfig("h", layers, dim)
    assert kv_bytes_per_token(ModelConfig("h", layers + step, dim)) > kv_bytes_per_token(m)
    assert kv_bytes_per_token(ModelConfig("h", layers, dim + step)) > kv_bytes_per_token(m)


@pytest.mark.parametrize("field", ["num_layers", "hidden_dim", "max_seq_len", "bytes_per_number"])
def test_model_rejects_zero(field):
    kw = dict(name="x", num_layers=1, hidden_dim=1, max_seq_len=1, bytes_per_number=1)
    kw[field] = 0
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_model_must_fit_on_gpus():
    big = PRESET_MODELS["gpt3-175b"]
    with pytest.raises(ConfigError):
        A100_80GB.kv_capacity(big)
    six = GpuConfig(80 * 10**9, 2e12, 16e9, num_gpus=6)
    assert six.kv_capacity(big) == 6 * 80 * 10**9 - big.weight_bytes


def test_gpu_rejects_bad_bandwidth():
    with pytest.raises(ConfigError):
        GpuConfig(10, 0, 1)
    with pytest.raises(ConfigError):
        GpuConfig(10, 1, -1)


def test_request_validation(tiny_model):
    Request(0, 0.0, 10, 54).validate(tiny_model)
    for bad in (Request(0, 0.0, 0, 0), Request(0, 0.0, -1, 5), Request(0, 0.0, 10, 55)):
        with pytest.raises(ConfigError):
            bad.validate(tiny_model)


def test_sequence_state_checks(tiny_model):
    s = SequenceState(Request(1, 0.0, 4, 10), allocated_tokens=8)
    s.status = Status.RUNNING
    s.generated_tokens = 8
    check_sequence(s, tiny_model)
    s.generated_tokens = 9
    with pytest.raises(AssertionError):
        check_sequence(s, tiny_model)
    s.status = Status.FINISHED
    with pytest.raises(AssertionError):
        check_sequence(s, tiny_model)
    assert s.reserved_tokens == 12 and s.initial_allocated_tokens == 8
