"""Prompt assembly in three modes.

baseline: token ids of the sentence truncated right before the object.
injected: token embeddings of the same prefix with n concept vectors spliced
          in immediately after the subject's last token (augmentation; the
          subject tokens are kept).
rag:      textified neighbor facts prepended as short sentences before the
          record's own text, then tokenized.

The target ids are identical across modes for the same bite: the object label
as it appears in context, leading space included.
"""

from dataclasses import dataclass, field

import torch

from conceptinject.concept import EmptyNeighborhoodError, embed_subgraph
from conceptinject.graph_store import top_neighbors


class SkippedExample(Exception):
    """A record that cannot be assembled in the requested mode; carries the
    reason so evaluation can report skip counts."""

    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


@dataclass
class AssembledPrompt:
    mode: str                      # baseline | rag | cf
    target_ids: list
    center_qid: str
    token_ids: list = None         # baseline / rag
    embeddings: torch.Tensor = None  # cf: (len, dim_o)
    insertion_index: int = 0
    hard_tokens: int = 0
    soft_vectors: int = 0

    def __post_init__(self):
        if not self.target_ids:
            raise ValueError("target ids must be non-empty")
        if self.mode in ("baseline", "rag") and self.soft_vectors != 0:
            raise ValueError(f"{self.mode} mode cannot carry soft vectors")

    @property
    def length(self):
        return self.hard_tokens + self.soft_vectors

    def ledger(self):
        return {"hard_tokens": self.hard_tokens, "soft_vectors": self.soft_vectors}

    def debug_record(self):
        return {
            "mode": self.mode,
            "center_qid": self.center_qid,
            "insertion_index": self.insertion_index,
            "ledger": self.ledger(),
            "target_ids": list(self.target_ids),
        }


def _truncate(bite):
    """Prefix/target strings: cut right before the object, trailing whitespace
    trimmed into the target so the leading space is part of what the LM must
    emit."""
    prefix = bite.text[:bite.object_span.start].rstrip()
    target = bite.text[len(prefix):bite.object_span.end]
    return prefix, target


def build_baseline(bite, tok):
    prefix, target = _truncate(bite)
    if not prefix:
        raise SkippedExample("empty prefix after truncation")
    ids = tok.tokenize(prefix)
    return AssembledPrompt(
        mode="baseline", token_ids=ids, target_ids=tok.tokenize(target),
        center_qid=bite.subject.qid, hard_tokens=len(ids),
    )


def _subject_end_token(tok_offsets, subject_span):
    """Index (exclusive) of the last prefix token overlapping the subject."""
    last = None
    for i, (_tid, start, end) in enumerate(tok_offsets):
        if start < subject_span.end and end > subject_span.start:
            last = i
    if last is None:
        raise SkippedExample("subject span not found in tokenized prefix")
    return last + 1


def build_injected(bite, star, encoder, tok, model, top_m=None,
                   concept_matrix=None):
    """Embedding-sequence prompt with concept vectors spliced in after the
    subject tokens. `concept_matrix` short-circuits live generation (lookup
    table path); isolated entities fall back to the baseline."""
    if star.center.qid != bite.subject.qid:
        raise ValueError("star graph center does not match bite subject")
    if star.degree == 0 and concept_matrix is None:
        prompt = build_baseline(bite, tok)
        prompt.mode = "cf"
        return prompt

    prefix, target = _truncate(bite)
    if not prefix:
        raise SkippedExample("empty prefix after truncation")
    offsets = tok.tokenize_with_offsets(prefix)
    ids = [tid for tid, _, _ in offsets]
    insert_at = _subject_end_token(offsets, bite.subject_span)

    if concept_matrix is None:
        with torch.no_grad():
            g = embed_subgraph(star, model, tok, top_m=top_m)
        concept_matrix = encoder(g)
    cv = concept_matrix.to(model.wte.weight.dtype)
    rows = model.embedding_rows(ids)
    seq = torch.cat([rows[:insert_at], cv, rows[insert_at:]], dim=0)
    return AssembledPrompt(
        mode="cf", embeddings=seq, target_ids=tok.tokenize(target),
        center_qid=bite.subject.qid, insertion_index=insert_at,
        hard_tokens=len(ids), soft_vectors=cv.shape[0],
    )


def textify(star, top_m=None):
    """Best-performing textification template: one short sentence per
    pagerank-ranked neighbor, "{subject} {p1} {o1}. {subject} {p2} {o2}.".

    Sentence-style context matches the register the LM reads best; a
    comma-separated list under the same token budget is consistently worse
    (see textify_parenthetical for the worst-case variant).
    """
    pairs = top_neighbors(star, top_m) if top_m else list(star.neighbors)
    return " ".join(f"{star.center.label} {pred.label} {ent.label}."
                    for pred, ent in pairs)


def textify_parenthetical(star, top_m=None):
    """The paper-reported worst-case variant, kept only as a documented
    fixture: "Subject ({p1}: {o1}, ...)"."""
    pairs = top_neighbors(star, top_m) if top_m else list(star.neighbors)
    inner = ", ".join(f"{pred.label}: {ent.label}" for pred, ent in pairs)
    return f"{star.center.label} ({inner})"


def build_rag(bite, star, tok, top_m=None, context=None):
    """Token prompt with the textified neighbor facts prepended before the
    record's text; greedily drops the lowest-ranked neighbors if the context
    would overflow."""
    if star.center.qid != bite.subject.qid:
        raise ValueError("star graph center does not match bite subject")
    if star.degree == 0:
        raise SkippedExample("no neighbors to textify")
    prefix, target = _truncate(bite)
    if not prefix:
        raise SkippedExample("empty prefix after truncation")
    target_ids = tok.tokenize(target)
    m = min(top_m, star.degree) if top_m else star.degree
    while m >= 1:
        ids = tok.tokenize(f"{textify(star, top_m=m)} {prefix}")
        if context is None or len(ids) + len(target_ids) <= context:
            return AssembledPrompt(
                mode="rag", token_ids=ids, target_ids=target_ids,
                center_qid=bite.subject.qid, hard_tokens=len(ids),
            )
        m -= 1
    raise SkippedExample("rag expansion exceeds context even with one neighbor")
