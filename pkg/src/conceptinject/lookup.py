"""Precomputed concept-vector lookup table.

Binary format (`CFLT`): magic, version u16, dim_o u32, n u32, entry count
u64, encoder fingerprint (32 raw bytes), LM fingerprint (32 raw bytes); then
per entry: qid byte-length u16, qid UTF-8 bytes, n*dim_o float32
little-endian. A JSON sidecar records excluded (isolated) entities and the
SHA-256 of the table file; the loader verifies it on open.
"""

import hashlib
import json
import struct

import numpy as np
import torch

from conceptinject.training import build_subgraph_cache

MAGIC = b"CFLT"
VERSION = 1


class TableIntegrityError(RuntimeError):
    pass


class ConceptTable:
    def __init__(self, dim_o, n_vectors, cf_fingerprint, lm_fingerprint,
                 entries):
        self.dim_o = dim_o
        self.n_vectors = n_vectors
        self.cf_fingerprint = cf_fingerprint
        self.lm_fingerprint = lm_fingerprint
        self.entries = entries  # qid -> (n, dim_o) float32 tensor

    def lookup(self, qid):
        """Stored matrix, or None for unknown/excluded qids."""
        mat = self.entries.get(qid)
        return None if mat is None else mat.clone()

    def validate_against(self, encoder=None, model=None):
        if encoder is not None and encoder.fingerprint() != self.cf_fingerprint:
            raise TableIntegrityError(
                "table was built with different encoder parameters")
        if model is not None and model.fingerprint() != self.lm_fingerprint:
            raise TableIntegrityError("table was built with a different LM")


def build_table(stars, encoder, model, tok, path, top_m=None):
    """Precompute concept vectors for every center with at least one neighbor
    and write them to `path`; isolated entities go to the sidecar exclusion
    manifest. Returns (ConceptTable, sidecar dict)."""
    if encoder.dim_o != model.cfg.dim:
        raise ValueError(
            f"encoder output width {encoder.dim_o} != LM dim {model.cfg.dim}")
    cache = build_subgraph_cache(stars, model, tok, top_m=top_m)
    entries = {}
    excluded = []
    for qid in sorted(stars):
        if qid not in cache:
            excluded.append(qid)
            continue
        with torch.no_grad():
            cv = encoder(cache[qid])
        entries[qid] = cv.to(torch.float32)

    cf_fp = encoder.fingerprint()
    lm_fp = model.fingerprint()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<II", encoder.dim_o, encoder.n_vectors))
        fh.write(struct.pack("<Q", len(entries)))
        fh.write(bytes.fromhex(cf_fp))
        fh.write(bytes.fromhex(lm_fp))
        for qid in sorted(entries):
            qb = qid.encode("utf-8")
            fh.write(struct.pack("<H", len(qb)))
            fh.write(qb)
            fh.write(entries[qid].numpy().astype("<f4").tobytes())
    with open(path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    sidecar = {
        "table_sha256": digest,
        "excluded_qids": excluded,
        "entry_count": len(entries),
        "cf_fingerprint": cf_fp,
        "lm_fingerprint": lm_fp,
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    table = ConceptTable(encoder.dim_o, encoder.n_vectors, cf_fp, lm_fp, entries)
    return table, sidecar


def load_table(path, verify_sidecar=True):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise TableIntegrityError(f"{path}: not a {MAGIC.decode()} table")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise TableIntegrityError(f"{path}: unsupported version {version}")
    dim_o, n = struct.unpack_from("<II", blob, 6)
    (count,) = struct.unpack_from("<Q", blob, 14)
    off = 22
    cf_fp = blob[off:off + 32].hex()
    lm_fp = blob[off + 32:off + 64].hex()
    off += 64
    entries = {}
    for _ in range(count):
        (qlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        qid = blob[off:off + qlen].decode("utf-8")
        off += qlen
        nfloats = n * dim_o
        end = off + 4 * nfloats
        if end > len(blob):
            raise TableIntegrityError(
                f"corrupted entry for qid {qid}: truncated matrix")
        arr = np.frombuffer(blob, dtype="<f4", count=nfloats, offset=off)
        entries[qid] = torch.from_numpy(arr.copy().reshape(n, dim_o))
        off = end
    if off != len(blob):
        raise TableIntegrityError(f"{path}: trailing bytes after last entry")
    if verify_sidecar:
        try:
            with open(str(path) + ".json", encoding="utf-8") as fh:
                sidecar = json.load(fh)
        except FileNotFoundError:
            sidecar = None
        if sidecar is not None:
            digest = hashlib.sha256(blob).hexdigest()
            if sidecar.get("table_sha256") != digest:
                raise TableIntegrityError(
                    f"{path}: file hash does not match sidecar record")
    return ConceptTable(dim_o, n, cf_fp, lm_fp, entries)
