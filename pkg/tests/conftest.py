import pytest
import torch

from telesee.corpus import synth_generate
from telesee.model import TINY_CONFIG, init_params
from telesee.pipeline import TeleSEE, model_config_for, vocab_for
from telesee.schema import default_schema


@pytest.fixture(scope="session")
def schema():
    return default_schema()


@pytest.fixture(scope="session")
def synth_docs(schema):
    return synth_generate(schema, 20, seed=3)


@pytest.fixture(scope="session")
def vocab(schema, synth_docs):
    return vocab_for(synth_docs, schema)


@pytest.fixture()
def untrained(schema, vocab):
    cfg = model_config_for(vocab, d_model=32, n_heads=4, n_layers=1, ffn_dim=64, max_tgt_len=24)
    return TeleSEE(init_params(cfg), schema, vocab)


@pytest.fixture()
def tiny_cfg():
    return TINY_CONFIG


@pytest.fixture()
def tiny_model(tiny_cfg):
    return init_params(tiny_cfg, torch.float64)
