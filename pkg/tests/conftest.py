import pytest

from kvsim.core import GpuConfig, ModelConfig, Request, kv_bytes_per_token
from kvsim.engine import CostModel, EngineConfig
from kvsim.predictor import PredictorSpec

ACCEPTANCE_LINES = []


@pytest.fixture
def tiny_model():
    # 4 bytes of KV per token keeps hand arithmetic readable
    return ModelConfig("unit", num_layers=1, hidden_dim=1, max_seq_len=64, weight_bytes=0)


@pytest.fixture
def desk_model():
    return ModelConfig("desk", num_layers=4, hidden_dim=64, max_seq_len=512, weight_bytes=0)


def unit_cost(**kw):
    base = dict(t_fixed=1.0, t_ff_per_seq=0.0, t_attn_per_token=0.0, t_prefill_per_token=0.0,
                predictor_latency=0.0, retrain_latency=0.0)
    base.update(kw)
    return CostModel(**base)


def make_config(model, capacity_tokens, mode="oracle", **kw):
    kvpt = kv_bytes_per_token(model)
    gpu = kw.pop("gpu", None) or GpuConfig(hbm_capacity=model.weight_bytes + capacity_tokens * kvpt,
                                           bw_hbm=kw.pop("bw_hbm", 1e9), bw_h2d=kw.pop("bw_h2d", 1e8))
    cost = kw.pop("cost", None) or unit_cost()
    policy = kw.pop("policy", None) or PredictorSpec(mode=mode, rng_seed=kw.get("rng_seed", 0))
    return EngineConfig(model=model, gpu=gpu, cost=cost, policy=policy, **kw)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
