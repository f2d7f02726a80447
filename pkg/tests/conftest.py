import json
from pathlib import Path

import pytest
import torch

from conceptinject.corpus import (WorldConfig, export_star_graphs,
                                  generate_toy_world, render_stage1,
                                  render_stage2, split_by_subject)
from conceptinject.lm import LMConfig, pretrain_base_lm
from conceptinject.tokenizer import build_tokenizer

FIXTURES = Path(__file__).parent / "fixtures"

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_cf_fixture():
    with open(FIXTURES / "tiny_cf.json", encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def small_world():
    cfg = WorldConfig(n_subjects=24, value_pool_size=20, n_predicates=8,
                      min_deg=2, max_deg=5)
    return generate_toy_world(cfg, seed=11)


@pytest.fixture(scope="session")
def small_data(small_world):
    stage1 = render_stage1(small_world)
    stage2 = render_stage2(small_world, seed=12)
    s1_train, s1_val, s1_test, manifest = split_by_subject(
        stage1, (0.7, 0.15, 0.15), seed=13)
    by_split = {"train": [], "val": [], "test": []}
    for b in stage2:
        by_split[manifest[b.subject.qid]].append(b)
    return {
        "stage1": {"train": s1_train, "val": s1_val, "test": s1_test},
        "stage2": by_split,
        "manifest": manifest,
        "all": stage1 + stage2,
    }


@pytest.fixture(scope="session")
def small_tok(small_data):
    return build_tokenizer([b.text for b in small_data["all"]], 384)


@pytest.fixture(scope="session")
def small_lm(small_tok, small_data):
    cfg = LMConfig(vocab_size=small_tok.vocab_size, dim=32, n_layers=2,
                   n_heads=4, context=128, ffn_dim=64)
    train = small_data["stage1"]["train"] + small_data["stage2"]["train"]
    model, _ = pretrain_base_lm(cfg, small_tok, train, seed=21, epochs=3,
                                lr=3e-3)
    return model.freeze()


@pytest.fixture(scope="session")
def small_stars(small_world):
    return export_star_graphs(small_world)
