import numpy as np
import pytest

from mole.config import toy_config
from mole.model import init_params


def tiny_mole(L=2, d=32, n_heads=4, D_s=48, D_r=24, N=4, vocab=61, max_seq=16, seed=1):
    cfg = toy_config("mole", L=L, d=d, n_heads=n_heads, D_s=D_s, D_r=D_r,
                     N=N, vocab=vocab, max_seq=max_seq)
    return init_params(cfg, seed=seed)


def tiny_moe(L=2, d=32, n_heads=4, D_r=24, N=4, k=2, vocab=61, max_seq=16, seed=1):
    cfg = toy_config("moe", L=L, d=d, n_heads=n_heads, D_r=D_r, N=N, k=k,
                     vocab=vocab, max_seq=max_seq)
    return init_params(cfg, seed=seed)


def tiny_dense(L=2, d=32, n_heads=4, D_s=48, vocab=61, max_seq=16, seed=1):
    cfg = toy_config("dense", L=L, d=d, n_heads=n_heads, D_s=D_s,
                     vocab=vocab, max_seq=max_seq)
    return init_params(cfg, seed=seed)


def random_prompts(rng, vocab, count, max_len, min_len=1):
    return [rng.integers(0, vocab, size=int(rng.integers(min_len, max_len + 1)))
            for _ in range(count)]


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
