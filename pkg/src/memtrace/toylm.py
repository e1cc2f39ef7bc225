"""Deterministic trie language model used as a desk-scale generation backend.

The model stores successor counts for every context suffix shorter than
`max_order` seen in training. Greedy generation backs off to the longest
stored suffix (ultimately the unigram root), which makes it memorize unique
training sentences verbatim - exactly the behavior the analysis pipeline
needs reproducible fixtures for.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import corpus as corpus_io
from .dynamics import shannon_entropy
from .errors import EmptyCorpus, ParseError, SequenceTooShort
from .fileio import atomic_writer
from .traces import GenerationTrace, ModelMeta, TraceSet

DEFAULT_MAX_ORDER = 8
DEFAULT_EMBEDDING_DIM = 16


@dataclass
class TrieModel:
    """Suffix-to-successor-count tables; immutable after fitting."""

    max_order: int
    vocab_size: int
    embedding_dim: int = DEFAULT_EMBEDDING_DIM
    nodes: dict[tuple[int, ...], dict[int, int]] = field(default_factory=dict)
    total_tokens: int = 0


def fit_trie(
    documents: Iterable[Sequence[int]] | str,
    max_order: int = DEFAULT_MAX_ORDER,
    vocab_size: int | None = None,
    embedding_dim: int = DEFAULT_EMBEDDING_DIM,
) -> TrieModel:
    """Count successors of every context suffix of length < max_order."""

    if max_order < 2:
        raise EmptyCorpus(f"max_order must be >= 2, got {max_order}")
    if isinstance(documents, str):
        if vocab_size is None:
            vocab_size = corpus_io.read_corpus_meta(documents)
        documents = corpus_io.iter_corpus(documents, vocab_size)
    nodes: dict[tuple[int, ...], dict[int, int]] = {}
    total = 0
    max_token = -1
    for doc in documents:
        toks = [int(t) for t in doc]
        for i, successor in enumerate(toks):
            max_token = max(max_token, successor)
            for width in range(min(i, max_order - 1) + 1):
                ctx = tuple(toks[i - width:i])
                succ = nodes.get(ctx)
                if succ is None:
                    succ = nodes[ctx] = {}
                succ[successor] = succ.get(successor, 0) + 1
        total += len(toks)
    if total == 0:
        raise EmptyCorpus("corpus contains no tokens")
    if vocab_size is None:
        vocab_size = max_token + 1
    return TrieModel(max_order=max_order, vocab_size=max(2, vocab_size),
                     embedding_dim=embedding_dim, nodes=nodes, total_tokens=total)


@dataclass(frozen=True)
class GreedyGeneration:
    """One greedy rollout: tokens plus the sparse distribution and state per step."""

    tokens: tuple[int, ...]
    distributions: tuple[tuple[tuple[int, float], ...], ...]
    states: tuple[tuple[float, ...], ...]


def _successor_distribution(model: TrieModel, context: Sequence[int]) -> tuple[tuple[int, float], ...]:
    """Normalized successor counts at the longest stored suffix of the context."""

    longest = min(len(context), model.max_order - 1)
    for width in range(longest, -1, -1):
        ctx = tuple(context[len(context) - width:])
        succ = model.nodes.get(ctx)
        if succ:
            total = sum(succ.values())
            return tuple((tok, succ[tok] / total) for tok in sorted(succ))
    raise EmptyCorpus("model has no root distribution")  # unreachable after fit


def _state_vector(dist: tuple[tuple[int, float], ...], dim: int) -> tuple[float, ...]:
    # synthetic stand-in for a hidden state: the top-`dim` probability mass,
    # sorted descending (token id breaks ties), zero-padded
    probs = sorted((p for _, p in dist), reverse=True)
    vec = probs[:dim]
    vec.extend(0.0 for _ in range(dim - len(vec)))
    return tuple(vec)


def generate_greedy(model: TrieModel, context: Sequence[int], n: int) -> GreedyGeneration:
    """Greedy rollout of n tokens; argmax ties break to the smallest token id."""

    if not context:
        raise SequenceTooShort("context must be non-empty")
    running = list(context)
    tokens: list[int] = []
    dists = []
    states = []
    for _ in range(n):
        dist = _successor_distribution(model, running)
        best_tok, best_p = dist[0]
        for tok, p in dist[1:]:
            if p > best_p:
                best_tok, best_p = tok, p
        tokens.append(best_tok)
        dists.append(dist)
        states.append(_state_vector(dist, model.embedding_dim))
        running.append(best_tok)
    return GreedyGeneration(tokens=tuple(tokens), distributions=tuple(dists),
                            states=tuple(states))


def make_traces(
    model: TrieModel,
    eval_sequences: Iterable[Sequence[int]],
    context_len: int,
    continuation_len: int,
    label: str = "toy",
    start_corpus_index: int = 0,
) -> TraceSet:
    """Slice each sequence into context/truth, decode greedily, package traces."""

    meta = ModelMeta(label=label, vocab_size=model.vocab_size,
                     hidden_size=model.embedding_dim)
    need = context_len + continuation_len
    traces: list[GenerationTrace] = []
    for offset, seq in enumerate(eval_sequences):
        toks = [int(t) for t in seq]
        if len(toks) < need:
            raise SequenceTooShort(
                f"sequence {offset} has {len(toks)} tokens, need {need}")
        context = toks[:context_len]
        truth = toks[context_len:need]
        gen = generate_greedy(model, context, continuation_len)
        entropies = tuple(
            shannon_entropy(np.array([p for _, p in dist])) for dist in gen.distributions)
        # id derives from the corpus position, not the label, so the same eval
        # corpus traced under two models aligns sequence-by-sequence
        index = start_corpus_index + offset
        traces.append(GenerationTrace(
            sequence_id=f"seq-{index:06d}",
            corpus_index=index,
            model=meta,
            context=tuple(context),
            true_continuation=tuple(truth),
            generated_continuation=gen.tokens,
            step_entropy=entropies,
            step_embedding=gen.states,
        ))
    return TraceSet(tuple(traces))


# --- persistence ---------------------------------------------------------------

def save_trie(model: TrieModel, path: str) -> None:
    doc = {
        "format": "memtrace-trie",
        "version": 1,
        "max_order": model.max_order,
        "vocab_size": model.vocab_size,
        "embedding_dim": model.embedding_dim,
        "total_tokens": model.total_tokens,
        "nodes": {
            ",".join(map(str, ctx)): {str(t): c for t, c in succ.items()}
            for ctx, succ in model.nodes.items()
        },
    }
    with atomic_writer(path, text=True) as fp:
        json.dump(doc, fp, sort_keys=True, separators=(",", ":"))
        fp.write("\n")


def load_trie(path: str) -> TrieModel:
    with open(path, "r", encoding="utf-8") as fp:
        doc = json.load(fp)
    if doc.get("format") != "memtrace-trie" or doc.get("version") != 1:
        raise ParseError(f"{path}: not a trie model file")
    nodes: dict[tuple[int, ...], dict[int, int]] = {}
    for ctx_key, succ in doc["nodes"].items():
        ctx = tuple(int(t) for t in ctx_key.split(",")) if ctx_key else ()
        nodes[ctx] = {int(t): int(c) for t, c in succ.items()}
    return TrieModel(
        max_order=int(doc["max_order"]),
        vocab_size=int(doc["vocab_size"]),
        embedding_dim=int(doc["embedding_dim"]),
        nodes=nodes,
        total_tokens=int(doc["total_tokens"]),
    )
