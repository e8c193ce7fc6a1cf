"""Hierarchical PCFGs with metadata, exact oracles, and a small transformer
to study metadata conditioning.

Heavy modules (``model``, ``eval``, ``probe``, ``experiment``) pull in torch
and are imported on demand.
"""

from .grammar import (
    ConcreteGrammar,
    GrammarError,
    HierarchicalGrammar,
    all_metadata,
    instantiate,
    load_grammar,
    load_preset,
    mixture,
    parse_grammar,
    random_grammar,
)
from .sampler import SplitMix64, sample_arrays, sample_batch
from .verifier import accepts, accepts_many

__version__ = "0.1.0"

__all__ = [
    "ConcreteGrammar",
    "GrammarError",
    "HierarchicalGrammar",
    "SplitMix64",
    "accepts",
    "accepts_many",
    "all_metadata",
    "instantiate",
    "load_grammar",
    "load_preset",
    "mixture",
    "parse_grammar",
    "random_grammar",
    "sample_arrays",
    "sample_batch",
]
