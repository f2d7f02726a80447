"""Soft-prompt knowledge injection for a frozen toy decoder LM.

Pipeline: generate a closed toy world (entities, predicates, facts), pretrain
and freeze a small decoder-only LM, train a concept-vector generator that
compresses each entity's 1-hop star neighborhood into a few vectors injected
into the LM's input-embedding sequence, and evaluate factual recall (Hit@k)
against token-only and graph-textification baselines.
"""

from conceptinject.graph_store import EntityRef, PredicateRef, StarGraph
from conceptinject.corpus import Bite, Span, ToyWorld, WorldConfig
from conceptinject.concept import ConceptEncoder

__all__ = [
    "EntityRef",
    "PredicateRef",
    "StarGraph",
    "Bite",
    "Span",
    "ToyWorld",
    "WorldConfig",
    "ConceptEncoder",
]
