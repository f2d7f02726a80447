"""sklearn-style wrapper around the concept encoder.

ConceptVectorizer exposes the two-stage training as fit() and concept-vector
generation as transform(), so the mechanism composes with pipelines and
get_params/set_params-based tooling. fit() expects the pipeline artifacts
(bites, star graphs, frozen LM, tokenizer) bundled in a dict, since the
algorithm consumes structured records rather than feature matrices.
"""

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from conceptinject.concept import ConceptEncoder
from conceptinject.training import TrainConfig, build_subgraph_cache, run_two_stage


def check_fit_inputs(X):
    """Validate the artifact bundle passed to ConceptVectorizer.fit."""
    required = {"stage1", "stage2", "stars", "model", "tokenizer"}
    if not isinstance(X, dict) or not required.issubset(X):
        missing = required - set(X) if isinstance(X, dict) else required
        raise ValueError(f"fit expects a dict with keys {sorted(required)}; "
                         f"missing {sorted(missing)}")
    for key in ("stage1", "stage2"):
        if len(X[key]) != 2:
            raise ValueError(f"{key} must be a (train, val) bite-list pair")
    if any(p.requires_grad for p in X["model"].parameters()):
        raise ValueError("the LM must be frozen before fitting")
    return X


class ConceptVectorizer(BaseEstimator, TransformerMixin):
    """Compress star neighborhoods into LM-input-space soft vectors."""

    def __init__(self, n_vectors=5, hidden=128, slope=0.01,
                 lr_stage1=3e-3, lr_stage2=1e-3, weight_decay=0.01,
                 batch_size=32, max_epochs_stage1=12, max_epochs_stage2=8,
                 patience=1, seed=0, skip_stage1=False):
        self.n_vectors = n_vectors
        self.hidden = hidden
        self.slope = slope
        self.lr_stage1 = lr_stage1
        self.lr_stage2 = lr_stage2
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs_stage1 = max_epochs_stage1
        self.max_epochs_stage2 = max_epochs_stage2
        self.patience = patience
        self.seed = seed
        self.skip_stage1 = skip_stage1

    def fit(self, X, y=None):
        X = check_fit_inputs(X)
        model, tok = X["model"], X["tokenizer"]
        encoder = ConceptEncoder(
            dim_i=model.cfg.dim, dim_o=model.cfg.dim,
            n_vectors=self.n_vectors, hidden=self.hidden, slope=self.slope,
            seed=self.seed)

        def stage_config(lr, epochs):
            return TrainConfig(
                learning_rate=lr, weight_decay=self.weight_decay,
                batch_size=self.batch_size, max_epochs=epochs,
                patience=self.patience, seed=self.seed)

        encoder, reports = run_two_stage(
            encoder, model, tok, X["stage1"], X["stage2"], X["stars"],
            stage_config(self.lr_stage1, self.max_epochs_stage1),
            stage_config(self.lr_stage2, self.max_epochs_stage2),
            skip_stage1=self.skip_stage1)
        self.encoder_ = encoder
        self.reports_ = reports
        self.model_ = model
        self.tokenizer_ = tok
        return self

    def transform(self, stars):
        """Map a dict of star graphs to {qid: (n_vectors, dim) ndarray};
        isolated entities are omitted."""
        if not hasattr(self, "encoder_"):
            raise NotFittedError("ConceptVectorizer is not fitted yet")
        cache = build_subgraph_cache(stars, self.model_, self.tokenizer_)
        out = {}
        for qid, g in cache.items():
            with torch.no_grad():
                out[qid] = self.encoder_(g).numpy().astype(np.float32)
        return out
