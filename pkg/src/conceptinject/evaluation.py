"""Hit@k factual-recall evaluation with multi-token max-rank semantics.

The rank of a multi-token target is the maximum per-token rank under teacher
forcing; an example counts as a hit at k when that rank is <= k. Per-token
rank is 1 + the number of logits strictly greater than the target's logit,
so ties resolve in the target's favor.
"""

import json
from dataclasses import dataclass, field, asdict

import torch

from conceptinject.graph_store import degree_bucket
from conceptinject.prompting import (build_baseline, build_injected, build_rag,
                                     SkippedExample)
from conceptinject.training import build_subgraph_cache

DEFAULT_KS = (1, 5, 10)
BUCKETS = ("niche", "moderate", "famous")


@dataclass
class RankResult:
    token_ranks: list
    center_qid: str

    @property
    def rank(self):
        return max(self.token_ranks)

    @property
    def n_tokens(self):
        return len(self.token_ranks)

    def hit(self, k):
        return self.rank <= k


@dataclass
class EvalReport:
    mode: str
    ks: list
    hits: dict = field(default_factory=dict)           # k -> percentage
    buckets: dict = field(default_factory=dict)        # bucket -> {count, hits}
    mean_hard_tokens: float = 0.0
    mean_soft_vectors: float = 0.0
    n_evaluated: int = 0
    skips: dict = field(default_factory=dict)          # reason -> count
    provenance: dict = field(default_factory=dict)
    dataset_size: int = 0

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def token_rank(logits, target_id):
    """1 + number of logits strictly greater than the target's logit."""
    logits = torch.as_tensor(logits)
    if not (0 <= target_id < logits.shape[-1]):
        raise ValueError("target id outside vocabulary")
    return int((logits > logits[target_id]).sum().item()) + 1


def sequence_rank(model, prompt):
    """Per-token ranks of the target under teacher forcing; sequence rank is
    their maximum."""
    target_rows = model.embedding_rows(prompt.target_ids)
    if prompt.embeddings is not None:
        seq = torch.cat([prompt.embeddings.detach(), target_rows], dim=0)
    else:
        seq = torch.cat([model.embedding_rows(prompt.token_ids), target_rows], dim=0)
    if seq.shape[0] > model.cfg.context:
        raise SkippedExample(
            f"prompt+targets length {seq.shape[0]} exceeds context {model.cfg.context}")
    with torch.no_grad():
        logits, _ = model.forward_embeddings(seq)
    start = prompt.length - 1
    ranks = [token_rank(logits[start + t], tid)
             for t, tid in enumerate(prompt.target_ids)]
    return RankResult(token_ranks=ranks, center_qid=prompt.center_qid)


def _build_prompt(mode, bite, star, model, tok, encoder, table, top_m):
    if mode == "baseline":
        return build_baseline(bite, tok)
    if star is None:
        raise SkippedExample(f"no star graph for subject {bite.subject.qid}")
    if mode == "rag":
        return build_rag(bite, star, tok, top_m=top_m, context=model.cfg.context)
    if mode == "cf":
        cv = None
        if table is not None:
            cv = table.lookup(bite.subject.qid)
            if cv is None and star.degree >= 1:
                raise SkippedExample(
                    f"subject {bite.subject.qid} missing from lookup table")
        return build_injected(bite, star, encoder, tok, model, top_m=top_m,
                              concept_matrix=cv)
    raise ValueError(f"unknown mode {mode!r}")


def evaluate(mode, bites, stars, model, tok, encoder=None, table=None,
             ks=DEFAULT_KS, top_m=None, audit_path=None, cache=None):
    """Aggregate Hit@k over a dataset in one prompt mode, with degree-bucket
    breakdown and token/soft-vector ledgers. Skipped examples are excluded
    from the denominator but reported by reason."""
    if mode == "cf" and encoder is None and table is None:
        raise ValueError("cf mode requires an encoder or a lookup table")
    report = EvalReport(mode=mode, ks=list(ks), dataset_size=len(bites))
    results = []          # (RankResult, bucket, ledger)
    skips = {}
    audit = []
    if mode == "cf" and encoder is not None and table is None and cache is None:
        cache = build_subgraph_cache(stars, model, tok, top_m=top_m)
    for bite in bites:
        star = stars.get(bite.subject.qid)
        try:
            if mode == "cf" and table is None and cache is not None \
                    and bite.subject.qid in cache:
                with torch.no_grad():
                    cv = encoder(cache[bite.subject.qid])
                prompt = build_injected(bite, star, encoder, tok, model,
                                        concept_matrix=cv)
            else:
                prompt = _build_prompt(mode, bite, star, model, tok, encoder,
                                       table, top_m)
            rank = sequence_rank(model, prompt)
        except SkippedExample as exc:
            skips[exc.reason] = skips.get(exc.reason, 0) + 1
            continue
        bucket = degree_bucket(star) if star is not None else "isolated"
        results.append((rank, bucket, prompt.ledger()))
        if audit_path:
            audit.append({
                "center_qid": rank.center_qid,
                "token_ranks": rank.token_ranks,
                "sequence_rank": rank.rank,
                "bucket": bucket,
                "ledger": prompt.ledger(),
            })

    n = len(results)
    report.n_evaluated = n
    report.skips = dict(sorted(skips.items()))
    if n:
        report.mean_hard_tokens = sum(l["hard_tokens"] for _, _, l in results) / n
        report.mean_soft_vectors = sum(l["soft_vectors"] for _, _, l in results) / n
    report.hits = {
        str(k): 100.0 * sum(r.hit(k) for r, _, _ in results) / n if n else 0.0
        for k in ks
    }
    for bucket in BUCKETS:
        sub = [r for r, b, _ in results if b == bucket]
        if not sub:
            continue
        report.buckets[bucket] = {
            "count": len(sub),
            "hits": {str(k): 100.0 * sum(r.hit(k) for r in sub) / len(sub)
                     for k in ks},
        }
    if audit_path:
        with open(audit_path, "w", encoding="utf-8") as fh:
            for rec in audit:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return report


def compare_report(reports):
    """Relative percentage change per metric between the first report (the
    reference) and each other, plus a token-efficiency ratio when both a rag
    and a cf report are present."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    sizes = {r.dataset_size for r in reports}
    if len(sizes) != 1:
        raise ValueError("reports cover different datasets")
    base = reports[0]
    comparison = {"reference_mode": base.mode, "changes": {}}
    for rep in reports[1:]:
        changes = {}
        for k, new in rep.hits.items():
            old = base.hits.get(k, 0.0)
            changes[k] = None if old == 0 else (new - old) / old * 100.0
        comparison["changes"][rep.mode] = changes
    rag = next((r for r in reports if r.mode == "rag"), None)
    cf = next((r for r in reports if r.mode == "cf"), None)
    if rag and cf and cf.mean_soft_vectors > 0:
        comparison["token_efficiency_ratio"] = (
            rag.mean_hard_tokens / cf.mean_soft_vectors)
        comparison["ledgers"] = {
            "rag_mean_hard_tokens": rag.mean_hard_tokens,
            "cf_mean_soft_vectors": cf.mean_soft_vectors,
            "cf_mean_hard_tokens": cf.mean_hard_tokens,
        }
    return comparison


def format_table(reports):
    """Aligned text table: one row per mode, Hit@k columns plus ledgers."""
    ks = reports[0].ks
    header = f"{'mode':<10}" + "".join(f"{'H@' + str(k):>8}" for k in ks)
    header += f"{'hard':>10}{'soft':>8}{'n':>7}"
    lines = [header]
    for r in reports:
        row = f"{r.mode:<10}"
        row += "".join(f"{r.hits[str(k)]:>7.1f}%" for k in ks)
        row += f"{r.mean_hard_tokens:>10.1f}{r.mean_soft_vectors:>8.1f}{r.n_evaluated:>7}"
        lines.append(row)
    return "\n".join(lines)
