"""Two-stage optimization of the concept encoder against a frozen LM.

Stage 1 fits on bare triple sentences, stage 2 refines on contextual
sentences, both with teacher-forced cross-entropy on the object tokens.
Only encoder parameters receive updates; the LM fingerprint is audited
before and after every stage.
"""

import copy
import json
import random
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from conceptinject.concept import embed_subgraph, EmptyNeighborhoodError
from conceptinject.lm import fit_label_codes
from conceptinject.prompting import build_injected, SkippedExample


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 6e-5
    weight_decay: float = 0.01
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 1          # epochs without validation improvement
    seed: int = 0
    # Adam moment coefficients are unstated upstream; recorded in the report
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least one epoch")


@dataclass
class TrainReport:
    stage: str
    config: dict
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = -1
    lm_fingerprint_before: str = ""
    lm_fingerprint_after: str = ""
    cf_fingerprints: list = field(default_factory=list)
    skipped: int = 0

    def to_dict(self):
        return asdict(self)


def object_loss(model, prompt):
    """Teacher-forced mean cross-entropy over the target tokens.

    The ground-truth prefix is supplied at every step (a single causal pass
    is exactly teacher forcing). Gradients flow only to whatever produced the
    injected vectors; LM weights are frozen by the caller.
    """
    if not prompt.target_ids:
        raise ValueError("prompt has no target ids")
    target_rows = model.embedding_rows(prompt.target_ids)
    if prompt.embeddings is not None:
        seq = torch.cat([prompt.embeddings, target_rows], dim=0)
    else:
        seq = torch.cat([model.embedding_rows(prompt.token_ids), target_rows], dim=0)
    if seq.shape[0] > model.cfg.context:
        raise SkippedExample(
            f"prompt+targets length {seq.shape[0]} exceeds context {model.cfg.context}")
    logits, _ = model.forward_embeddings(seq)
    start = prompt.length - 1  # logits index predicting target_ids[0]
    tgt = torch.as_tensor(prompt.target_ids, dtype=torch.long)
    steps = logits[start:start + len(prompt.target_ids)]
    return F.cross_entropy(steps, tgt)


def chunk_code_targets(stars, model, tok, n_vectors, qids, seed=0):
    """Reference concept matrices: each neighbor edge lands in group
    crc32(predicate id) % n_vectors and each group becomes the mean of its
    object labels' codes (see fit_label_codes; empty groups fall back to
    the mean over all neighbors).

    These mixture codes use the same space and the same predicate-keyed
    grouping rule as the soft-slot sequences the LM's pretraining read, so
    they are directly decodable by the frozen model: the sentence states
    the predicate, which selects the one group holding its object. Keying
    groups on a stable hash of the predicate — never on the subject —
    keeps the rule transferable to subjects unseen in training. Fitting
    the encoder to these codes first gives LM-loss training a working
    starting point instead of a random one.
    """
    labels = set()
    for qid in qids:
        star = stars.get(qid)
        if star is not None:
            labels.update(e.label for _, e in star.neighbors)
    if not labels:
        return {}
    codes = fit_label_codes(model, tok, labels)
    targets = {}
    with torch.no_grad():
        for qid in sorted(qids):
            star = stars.get(qid)
            if star is None or star.degree == 0:
                continue
            groups = [[] for _ in range(n_vectors)]
            rows = []
            for pred, ent in star.neighbors:
                row = codes[ent.label]
                groups[zlib.crc32(pred.pid.encode("utf-8")) % n_vectors].append(row)
                rows.append(row)
            overall = torch.stack(rows).mean(dim=0)
            vecs = [torch.stack(g).mean(dim=0) if g else overall
                    for g in groups]
            targets[qid] = torch.stack(vecs)
    return targets


def warm_start_codes(encoder, model, tok, stars, cache, qids,
                     epochs=200, lr=1e-2, seed=0, log_every=0):
    """Fit the encoder's outputs to the reference mixture codes by mean
    squared error before any LM-loss training. Returns a small report dict."""
    targets = chunk_code_targets(stars, model, tok, encoder.n_vectors, qids,
                                 seed=seed)
    usable = [q for q in sorted(targets) if q in cache]
    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    losses = []
    for epoch in range(epochs):
        opt.zero_grad()
        loss = torch.stack([
            F.mse_loss(encoder(cache[q]), targets[q]) for q in usable
        ]).mean()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and (epoch + 1) % log_every == 0:
            print(f"warm start epoch {epoch + 1}: mse {losses[-1]:.5f}")
    return {"epochs": epochs, "learning_rate": lr, "seed": seed,
            "n_subjects": len(usable),
            "first_loss": losses[0] if losses else None,
            "final_loss": losses[-1] if losses else None}


def build_subgraph_cache(stars, model, tok, top_m=None):
    """Embed every star graph once; embeddings depend only on the frozen LM."""
    cache = {}
    for qid, graph in stars.items():
        if graph.degree == 0:
            continue
        with torch.no_grad():
            cache[qid] = embed_subgraph(graph, model, tok, top_m=top_m)
    return cache


def _example_loss(encoder, model, tok, bite, stars, cache):
    star = stars.get(bite.subject.qid)
    if star is None:
        raise SkippedExample(f"no star graph for subject {bite.subject.qid}")
    g = cache.get(bite.subject.qid)
    cv = encoder(g) if g is not None else None
    prompt = build_injected(bite, star, encoder, tok, model,
                            concept_matrix=cv)
    return object_loss(model, prompt)


def _dataset_loss(encoder, model, tok, bites, stars, cache):
    total, count = 0.0, 0
    with torch.no_grad():
        for bite in bites:
            try:
                total += _example_loss(encoder, model, tok, bite, stars, cache).item()
                count += 1
            except SkippedExample:
                continue
    return total / max(count, 1)


def train_stage(encoder, model, tok, bites, stars, val_bites, config,
                stage="1", cache=None, log_every=0):
    """Mini-batch AdamW over the encoder parameters with early stopping on
    validation loss. Returns (encoder, TrainReport); the best-validation
    checkpoint is the one left in the encoder."""
    config.validate()
    report = TrainReport(stage=stage, config=asdict(config))
    report.lm_fingerprint_before = model.fingerprint()
    if cache is None:
        cache = build_subgraph_cache(stars, model, tok)
    opt = torch.optim.AdamW(
        encoder.parameters(), lr=config.learning_rate,
        weight_decay=config.weight_decay,
        betas=(config.beta1, config.beta2), eps=config.eps,
    )
    rng = random.Random(config.seed)
    order = list(range(len(bites)))
    best_val = float("inf")
    best_state = copy.deepcopy(encoder.state_dict())
    bad_epochs = 0
    report.stop_reason = "max epochs reached"

    for epoch in range(config.max_epochs):
        rng.shuffle(order)
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            losses = []
            for i in batch:  # index-ascending within the shuffled batch order
                try:
                    losses.append(_example_loss(encoder, model, tok, bites[i],
                                                stars, cache))
                except SkippedExample:
                    report.skipped += 1
            if not losses:
                continue
            loss = torch.stack(losses).mean()
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss in stage {stage}; batch bite indices {batch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(losses)
            count += len(losses)
        train_loss = total / max(count, 1)
        val_loss = _dataset_loss(encoder, model, tok, val_bites, stars, cache)
        report.train_losses.append(train_loss)
        report.val_losses.append(val_loss)
        report.cf_fingerprints.append(encoder.fingerprint())
        if log_every and (epoch + 1) % log_every == 0:
            print(f"stage {stage} epoch {epoch + 1}: train {train_loss:.4f} "
                  f"val {val_loss:.4f}")
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(encoder.state_dict())
            report.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                report.stop_reason = "validation loss stopped improving"
                break

    encoder.load_state_dict(best_state)
    report.lm_fingerprint_after = model.fingerprint()
    if report.lm_fingerprint_after != report.lm_fingerprint_before:
        raise RuntimeError("frozen-LM audit failed: fingerprint changed")
    return encoder, report


def run_two_stage(encoder, model, tok, stage1_data, stage2_data, stars,
                  config_stage1, config_stage2, skip_stage1=False,
                  cache=None, log_every=0, warm_start=True):
    """Stage-1 output initializes stage 2. `stage*_data` are (train, val)
    bite-list pairs sharing the same subject splits."""
    if cache is None:
        cache = build_subgraph_cache(stars, model, tok)
    reports = {"skip_stage1": skip_stage1}
    if warm_start:
        qids = {b.subject.qid for b in stage1_data[0] + stage2_data[0]}
        reports["warm_start"] = warm_start_codes(
            encoder, model, tok, stars, cache, qids, log_every=log_every)
    if not skip_stage1:
        encoder, rep1 = train_stage(encoder, model, tok, stage1_data[0], stars,
                                    stage1_data[1], config_stage1, stage="1",
                                    cache=cache, log_every=log_every)
        reports["stage1"] = rep1.to_dict()
    encoder, rep2 = train_stage(encoder, model, tok, stage2_data[0], stars,
                                stage2_data[1], config_stage2, stage="2",
                                cache=cache, log_every=log_every)
    reports["stage2"] = rep2.to_dict()
    fps = [reports[k]["lm_fingerprint_before"] for k in ("stage1", "stage2")
           if k in reports]
    fps += [reports[k]["lm_fingerprint_after"] for k in ("stage1", "stage2")
            if k in reports]
    if len(set(fps)) != 1:
        raise RuntimeError("frozen-LM audit failed across stages")
    return encoder, reports


def save_report(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
