import hashlib
import json

import pytest
import torch

from conceptinject.concept import ConceptEncoder, embed_subgraph
from conceptinject.evaluation import evaluate
from conceptinject.lookup import (ConceptTable, TableIntegrityError,
                                  build_table, load_table)


@pytest.fixture(scope="module")
def encoder(small_lm):
    return ConceptEncoder(dim_i=small_lm.cfg.dim, dim_o=small_lm.cfg.dim,
                          n_vectors=3, hidden=16, seed=13)


@pytest.fixture(scope="module")
def built(small_stars, encoder, small_lm, small_tok, tmp_path_factory):
    path = tmp_path_factory.mktemp("table") / "cf.cflt"
    table, sidecar = build_table(small_stars, encoder, small_lm, small_tok,
                                 path)
    return path, table, sidecar


class TestBuild:
    def test_entries_match_live_encoder(self, built, small_stars, encoder,
                                        small_lm, small_tok):
        _, table, _ = built
        for qid in list(table.entries)[:10]:
            with torch.no_grad():
                live = encoder(embed_subgraph(small_stars[qid], small_lm,
                                              small_tok))
            assert torch.equal(table.lookup(qid), live.to(torch.float32))

    def test_isolated_entities_excluded(self, built, small_stars):
        _, table, sidecar = built
        isolated = {q for q, g in small_stars.items() if g.degree == 0}
        assert set(sidecar["excluded_qids"]) == isolated
        assert all(table.lookup(q) is None for q in isolated)
        assert len(table.entries) + len(isolated) == len(small_stars)

    def test_double_build_is_byte_identical(self, small_stars, encoder,
                                            small_lm, small_tok, tmp_path):
        p1, p2 = tmp_path / "a.cflt", tmp_path / "b.cflt"
        build_table(small_stars, encoder, small_lm, small_tok, p1)
        build_table(small_stars, encoder, small_lm, small_tok, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_sidecar_hash_matches_file(self, built):
        path, _, sidecar = built
        assert sidecar["table_sha256"] == \
            hashlib.sha256(path.read_bytes()).hexdigest()

    def test_width_mismatch_rejected(self, small_stars, small_lm, small_tok,
                                     tmp_path):
        bad = ConceptEncoder(dim_i=small_lm.cfg.dim, dim_o=small_lm.cfg.dim + 8,
                             n_vectors=2, hidden=8, seed=1)
        with pytest.raises(ValueError, match="width"):
            build_table(small_stars, bad, small_lm, small_tok,
                        tmp_path / "x.cflt")


class TestLoad:
    def test_round_trip(self, built):
        path, table, _ = built
        loaded = load_table(path)
        assert loaded.dim_o == table.dim_o
        assert loaded.n_vectors == table.n_vectors
        assert loaded.cf_fingerprint == table.cf_fingerprint
        assert loaded.lm_fingerprint == table.lm_fingerprint
        assert set(loaded.entries) == set(table.entries)
        for qid in table.entries:
            assert torch.equal(loaded.lookup(qid), table.lookup(qid))

    def test_lookup_returns_clone(self, built):
        _, table, _ = built
        qid = next(iter(table.entries))
        a = table.lookup(qid)
        a.fill_(0.0)
        assert not torch.equal(a, table.lookup(qid))

    def test_fingerprint_validation(self, built, encoder, small_lm):
        path, _, _ = built
        loaded = load_table(path)
        loaded.validate_against(encoder=encoder, model=small_lm)
        other = ConceptEncoder(dim_i=small_lm.cfg.dim, dim_o=small_lm.cfg.dim,
                               n_vectors=3, hidden=16, seed=14)
        with pytest.raises(TableIntegrityError, match="encoder"):
            loaded.validate_against(encoder=other)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.cflt"
        path.write_bytes(b"XXXX" + b"\0" * 100)
        with pytest.raises(TableIntegrityError, match="CFLT"):
            load_table(path)

    def test_truncated_entry_rejected(self, built, tmp_path):
        src, _, _ = built
        path = tmp_path / "trunc.cflt"
        path.write_bytes(src.read_bytes()[:-7])
        with pytest.raises(TableIntegrityError):
            load_table(path, verify_sidecar=False)

    def test_trailing_bytes_rejected(self, built, tmp_path):
        src, _, _ = built
        path = tmp_path / "trail.cflt"
        path.write_bytes(src.read_bytes() + b"\0\0\0")
        with pytest.raises(TableIntegrityError, match="trailing"):
            load_table(path, verify_sidecar=False)

    def test_sidecar_mismatch_detected(self, built, tmp_path):
        src, _, sidecar = built
        path = tmp_path / "tampered.cflt"
        blob = bytearray(src.read_bytes())
        blob[-1] ^= 0xFF  # flip one payload byte
        path.write_bytes(bytes(blob))
        with open(str(path) + ".json", "w") as fh:
            json.dump(sidecar, fh)
        with pytest.raises(TableIntegrityError, match="hash"):
            load_table(path)


class TestEvalEquivalence:
    def test_table_and_live_eval_agree(self, built, small_stars, encoder,
                                       small_lm, small_tok, small_data):
        path, _, _ = built
        table = load_table(path)
        bites = small_data["stage2"]["test"]
        live = evaluate("cf", bites, small_stars, small_lm, small_tok,
                        encoder=encoder)
        pre = evaluate("cf", bites, small_stars, small_lm, small_tok,
                       table=table)
        assert live.hits == pre.hits
        assert live.n_evaluated == pre.n_evaluated
