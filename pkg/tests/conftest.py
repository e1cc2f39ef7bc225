import math

import pytest

from memtrace.traces import GenerationTrace, ModelMeta


DEFAULT_META = ModelMeta(label="70m", vocab_size=1000, hidden_size=4)


def build_trace(
    sequence_id="s0",
    corpus_index=0,
    meta=DEFAULT_META,
    context=None,
    truth=None,
    generated=None,
    entropy=None,
    embedding=None,
    context_entropy=None,
):
    """Small valid trace with overridable pieces; defaults score 0.5 on length 4."""

    context = [1, 2, 3] if context is None else context
    truth = [4, 5, 6, 7] if truth is None else truth
    if generated is None:
        generated = list(truth[: len(truth) // 2]) + [8] * (len(truth) - len(truth) // 2)
    entropy = [0.5] * len(truth) if entropy is None else entropy
    return GenerationTrace(
        sequence_id=sequence_id,
        corpus_index=corpus_index,
        model=meta,
        context=tuple(context),
        true_continuation=tuple(truth),
        generated_continuation=tuple(generated),
        step_entropy=tuple(entropy),
        step_embedding=embedding,
        context_entropy=context_entropy,
    )


def scored_trace(matches, length, sequence_id="s0", corpus_index=0, ctx_len=3,
                 meta=DEFAULT_META, embedding=None, entropy=None):
    """Trace engineered to have an exact memorization score matches/length."""

    assert 0 <= matches <= length
    truth = [10] * length
    generated = [10] * matches + [11] * (length - matches)
    return build_trace(
        sequence_id=sequence_id,
        corpus_index=corpus_index,
        meta=meta,
        context=[1] * ctx_len,
        truth=truth,
        generated=generated,
        entropy=entropy if entropy is not None else [0.25] * length,
        embedding=embedding,
    )


@pytest.fixture
def minimal_trace():
    return build_trace()


def entropy_cap(meta=DEFAULT_META):
    return math.log(meta.vocab_size)
