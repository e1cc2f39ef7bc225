"""Acceptance criteria, one test per criterion with a pass/fail summary line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines; tolerances and budgets are pinned in the asserts.
"""

import contextlib
import filecmp
import math
import os
import random
import time

import numpy as np
import pytest

from conftest import build_trace, scored_trace
from memtrace import corpus as corpus_io
from memtrace import dynamics, ngrams, predictor, scoring, toylm
from memtrace.cli import main as cli_main
from memtrace.scoring import MemorizationBinning, MemorizationScore
from memtrace.traces import ModelMeta, TraceSet


@contextlib.contextmanager
def criterion(name):
    start = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"[ACCEPTANCE] {name}: FAIL")
        raise
    print(f"[ACCEPTANCE] {name}: PASS ({time.monotonic() - start:.2f}s)")


def test_scoring_oracle():
    with criterion("scoring-oracle"):
        rng = random.Random(1)
        start = time.monotonic()
        for _ in range(10_000):
            n = rng.randint(1, 64)
            truth = [rng.randrange(50) for _ in range(n)]
            generated = [t if rng.random() < 0.5 else rng.randrange(50)
                         for t in truth]
            expected = sum(1 for i in range(n) if generated[i] == truth[i])
            got = scoring.memorization_score(generated, truth)
            assert (got.matches, got.length) == (expected, n)
        assert time.monotonic() - start < 5.0


def test_binning_totals():
    with criterion("binning-totals"):
        rng = random.Random(2)
        schemes = (MemorizationBinning.from_width(0.1),
                   MemorizationBinning.from_width(0.2))
        for trial in range(1_000):
            length = rng.randint(1, 64)
            n = rng.randint(1, 30)
            traces = TraceSet(tuple(
                scored_trace(rng.randint(0, length), length, f"t{trial}-{i}")
                for i in range(n)))
            for scheme in schemes:
                counts = scoring.histogram_by_bin(traces, scheme)
                assert sum(counts) == n
        for scheme in schemes:
            assert scheme.bin_index(MemorizationScore(7, 7)) == scheme.n_bins - 1


def test_transition_sanity():
    with criterion("transition-sanity"):
        rng = random.Random(3)
        scheme = MemorizationBinning.from_width(0.2)
        identical = {f"s{i}": MemorizationScore(rng.randint(0, 8), 8)
                     for i in range(200)}
        matrix = scoring.transition_matrix(identical, identical, scheme)
        off_diagonal = matrix.counts - np.diag(np.diag(matrix.counts))
        assert not off_diagonal.any()
        for _ in range(100):
            n = rng.randint(1, 60)
            length = rng.randint(1, 16)
            keys = [f"k{i}" for i in range(n)]
            a = {k: MemorizationScore(rng.randint(0, length), length) for k in keys}
            b = {k: MemorizationScore(rng.randint(0, length), length) for k in keys}
            m = scoring.transition_matrix(a, b, scheme)
            sums = m.row_normalized.sum(axis=1)
            for row in range(scheme.n_bins):
                if row in m.empty_rows:
                    assert sums[row] == 0.0
                else:
                    assert abs(sums[row] - 1.0) <= 1e-9


def naive_ngram_count(docs, order):
    counts = {}
    for doc in docs:
        for i in range(len(doc) - order + 1):
            gram = tuple(doc[i:i + order])
            counts[gram] = counts.get(gram, 0) + 1
    return counts


def test_ngram_exactness():
    with criterion("ngram-exactness"):
        start = time.monotonic()
        rng = random.Random(4)
        sizes = [rng.randint(200, 20_000) for _ in range(48)] + [100_000, 60_000]
        for corpus_no, size in enumerate(sizes):
            n_docs = rng.randint(1, 12)
            cuts = sorted(rng.randint(0, size) for _ in range(n_docs - 1))
            bounds = [0] + cuts + [size]
            vocab = rng.randint(10, 2000)
            tokens = [rng.randrange(vocab) for _ in range(size)]
            docs = [tokens[a:b] for a, b in zip(bounds, bounds[1:])]
            for order in (1, 2, 3):
                counter = ngrams.count_ngrams(docs, order)
                got = {ngrams.unpack_gram(k, order): v
                       for k, v in counter.counts.items()}
                assert got == naive_ngram_count(docs, order), \
                    f"corpus {corpus_no} order {order}"
                shards = [docs[i::3] for i in range(3)]
                merged = ngrams.count_ngrams(shards[0], order)
                for shard in shards[1:]:
                    merged = ngrams.merge_counters(
                        merged, ngrams.count_ngrams(shard, order))
                assert merged.counts == counter.counts
        assert time.monotonic() - start < 30.0


def test_boundary_effect_reconstruction():
    with criterion("boundary-effect-reconstruction"):
        start = time.monotonic()
        # token t occurs (t + 1) * 4 times: top decile 90..99, bottom 0..9
        docs = [[t] * ((t + 1) * 4) for t in range(100)]
        counter = ngrams.count_ngrams(docs, 1)
        meta = ModelMeta(label="synthetic", vocab_size=100, hidden_size=1)
        rng = random.Random(5)

        def cohort(ctx_end_pool, cont_start_pool, memorized):
            traces = []
            for i in range(100):
                ctx = [rng.randrange(40, 60) for _ in range(7)]
                ctx.append(rng.choice(ctx_end_pool))
                truth = [rng.choice(cont_start_pool)] + \
                    [rng.randrange(40, 60) for _ in range(7)]
                generated = list(truth) if memorized else \
                    [(t + 1) % 100 for t in truth]
                traces.append(build_trace(
                    sequence_id=f"{memorized}-{i}", corpus_index=i, meta=meta,
                    context=ctx, truth=truth, generated=generated,
                    entropy=[0.0] * 8))
            return TraceSet(tuple(traces))

        top = list(range(90, 100))
        bottom = list(range(0, 10))
        memorized = cohort(ctx_end_pool=bottom, cont_start_pool=top, memorized=True)
        unmemorized = cohort(ctx_end_pool=top, cont_start_pool=bottom,
                             memorized=False)
        assert ngrams.sequence_gram_stats(memorized, counter).boundary_diff > 0
        assert ngrams.sequence_gram_stats(unmemorized, counter).boundary_diff < 0
        assert time.monotonic() - start < 10.0


def test_entropy_criterion():
    with criterion("entropy"):
        for v in (2, 10, 1024):
            assert abs(dynamics.shannon_entropy([1.0 / v] * v) - math.log(v)) <= 1e-9
        one_hot = [0.0] * 16
        one_hot[3] = 1.0
        assert dynamics.shannon_entropy(one_hot) == 0.0

        # trie with a deterministic block and a genuinely ambiguous block
        unique = [list(range(4 + i * 8, 4 + (i + 1) * 8)) for i in range(30)]
        binary = [[0, 0, 1, 0, 1, 1] * 20]
        model = toylm.fit_trie(unique + binary, max_order=2, vocab_size=400)

        memorized = toylm.make_traces(model, unique, context_len=4,
                                      continuation_len=4, label="toy")
        ambiguous = toylm.make_traces(model, [[0, 1] * 4, [1, 0] * 4],
                                      context_len=4, continuation_len=4,
                                      label="toy")
        memorized_profile = dynamics.entropy_profile(list(memorized), "memorized")
        ambiguous_profile = dynamics.entropy_profile(list(ambiguous), "ambiguous")
        assert memorized_profile.per_index_mean == (0.0, 0.0, 0.0, 0.0)
        for zero, positive in zip(memorized_profile.per_index_mean,
                                  ambiguous_profile.per_index_mean):
            assert zero < positive


def dense_eigh_oracle(x, k):
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    comps = []
    for i in order:
        v = vecs[:, i]
        j = int(np.argmax(np.abs(v)))
        comps.append(-v if v[j] < 0 else v)
    return centered @ np.vstack(comps).T, np.vstack(comps)


def test_pca_criterion():
    with criterion("pca"):
        rng = np.random.default_rng(6)
        for _ in range(100):
            d = int(rng.integers(2, 17))
            n = int(rng.integers(d + 2, 50))
            x = rng.normal(size=(n, d)) @ rng.normal(size=(d, d))
            result = dynamics.pca_project(x, k=2)
            coords, comps = dense_eigh_oracle(x, 2)
            np.testing.assert_allclose(result.coords, coords, atol=1e-6)
            np.testing.assert_allclose(result.components, comps, atol=1e-6)

        x = rng.normal(size=(40, 12)) @ rng.normal(size=(12, 12))
        centered = x - x.mean(axis=0)
        result = dynamics.pca_project(x, k=2)
        best = ((centered - result.coords @ result.components) ** 2).sum()
        for _ in range(100):
            q, _ = np.linalg.qr(rng.normal(size=(12, 2)))
            random_err = ((centered - (centered @ q) @ q.T) ** 2).sum()
            assert best <= random_err + 1e-9

        shift = rng.normal(size=12) * 250
        shifted = dynamics.pca_project(x + shift, k=2)
        np.testing.assert_allclose(result.coords, shifted.coords, atol=1e-9)


def test_geometry_criterion():
    with criterion("geometry"):
        rng = np.random.default_rng(7)
        groups = {k: rng.normal(size=(5, 10)) for k in range(6)}
        report = dynamics.pairwise_geometry(
            dynamics.GroupCentroids(groups=groups, members={k: 1 for k in groups}))
        for s in range(5):
            cos, euc = report.cosine[s], report.euclidean[s]
            assert np.all(cos >= -1.0) and np.all(cos <= 1.0)
            np.testing.assert_allclose(cos, cos.T)
            np.testing.assert_allclose(np.diag(cos), 1.0)
        n = len(report.group_keys)
        for _ in range(1_000):
            s = int(rng.integers(0, 5))
            a, b, c = rng.integers(0, n, size=3)
            euc = report.euclidean[s]
            assert euc[a, c] <= euc[a, b] + euc[b, c] + 1e-9

        # singleton groups: centroid is exactly the member's embedding
        meta = ModelMeta(label="m", vocab_size=50, hidden_size=3)
        vectors = [[0.25, -1.5, 3.0], [1e-9, 2.0, -7.125]]
        trace = build_trace(sequence_id="solo", meta=meta, context=[1],
                            truth=[2, 3], generated=[2, 4],
                            entropy=[0.0, 0.0], embedding=vectors)
        cents = dynamics.group_centroids([trace])
        assert np.array_equal(cents.groups[1], np.array(vectors))


def test_toy_memorization_end_to_end():
    with criterion("toy-memorization-end-to-end"):
        start = time.monotonic()
        n_sentences, ctx, cont = 200, 32, 16
        length = ctx + cont
        sentences = [list(range(i * length, (i + 1) * length))
                     for i in range(n_sentences)]
        vocab = 2 * n_sentences * length
        model = toylm.fit_trie(sentences, max_order=8, vocab_size=vocab)
        traces = toylm.make_traces(model, sentences, ctx, cont)
        scores = [scoring.score_trace(t) for t in traces]
        assert all(s.value == 1.0 for s in scores)

        base = n_sentences * length
        foreign = [list(range(base + i * length, base + (i + 1) * length))
                   for i in range(n_sentences)]
        foreign_traces = toylm.make_traces(model, foreign, ctx, cont)
        assert all(scoring.score_trace(t).value == 0.0 for t in foreign_traces)

        counts = scoring.histogram_by_bin(traces, MemorizationBinning.from_width(0.1))
        assert counts[-1] == n_sentences and sum(counts) == n_sentences
        assert time.monotonic() - start < 10.0


def test_predictor_gradients():
    with criterion("predictor-gradients"):
        rng = np.random.default_rng(8)
        config = predictor.PredictorConfig(d_in=6, d_model=16, n_heads=4, d_ff=32)
        batch = [
            predictor.FeatureSequence(
                f"g{i}", rng.normal(size=(8, 6)),
                rng.integers(0, 2, size=8).astype(np.int8))
            for i in range(4)
        ]
        model = predictor.init_model(config, seed=9)
        assert predictor.grad_check(model, batch, epsilon=1e-5, seed=10) <= 1e-4

        dataset = [
            predictor.FeatureSequence(
                f"d{i}", rng.normal(size=(8, 6)),
                rng.integers(0, 2, size=8).astype(np.int8))
            for i in range(20)
        ]
        stepped, _ = predictor.train(
            dataset, config,
            predictor.TrainConfig(epochs=5, batch_size=10, seed=11))  # 10 updates
        assert predictor.grad_check(stepped, batch, epsilon=1e-5, seed=10) <= 1e-4


def entropy_threshold_dataset(rng, n_sequences, steps=16, noise_dims=4):
    # labels depend only on the entropy feature; layout mirrors featurize()
    data = []
    for i in range(n_sequences):
        entropy = rng.uniform(0.0, 2.0, size=steps)
        emb = rng.normal(size=(steps, noise_dims))
        freq = rng.uniform(0.0, 5.0, size=steps)
        pos = np.arange(steps) / (steps - 1)
        features = np.concatenate(
            [emb, entropy[:, None], freq[:, None], pos[:, None]], axis=1)
        labels = (entropy < 1.0).astype(np.int8)
        data.append(predictor.FeatureSequence(f"syn-{i}", features, labels))
    return data


def test_predictor_learnability():
    with criterion("predictor-learnability"):
        start = time.monotonic()
        rng = np.random.default_rng(12)
        train_set = entropy_threshold_dataset(rng, 500)
        held_out = entropy_threshold_dataset(rng, 100)
        config = predictor.PredictorConfig(d_in=7)
        model, losses = predictor.train(
            train_set, config,
            predictor.TrainConfig(epochs=6, learning_rate=1e-3,
                                  batch_size=32, seed=13))
        report = predictor.evaluate(model, held_out,
                                    MemorizationBinning.from_width(0.2))
        elapsed = time.monotonic() - start
        assert report.token_accuracy >= 0.95, report
        assert report.full_accuracy <= report.token_accuracy
        assert elapsed < 60.0


def test_metric_identities():
    with criterion("metric-identities"):
        assert predictor.token_accuracy([1, 1, 0, 0], [1, 1, 0, 0]) == 1.0
        # appendix-style pattern: gold M M U U, predicted M U U U
        assert predictor.token_accuracy([1, 0, 0, 0], [1, 1, 0, 0]) == 0.75

        config = predictor.PredictorConfig(d_in=2, bypass_encoder=True)
        forced = predictor.init_model(config, seed=0)
        forced.params["w_head"][:] = 0.0
        forced.params["w_head"][0] = 50.0
        feats = np.zeros((4, 2))
        feats[:, 0] = [1, -1, -1, -1]
        fs = predictor.FeatureSequence(
            "case", feats, np.array([1, 1, 0, 0], dtype=np.int8))
        report = predictor.evaluate(forced, [fs],
                                    MemorizationBinning.from_width(0.2))
        assert report.token_accuracy == 0.75 and report.full_accuracy == 0.0

        all_ones = predictor.init_model(config, seed=0)
        all_ones.params["w_head"][:] = 0.0
        all_ones.params["b_head"] = np.asarray(40.0)
        rng = np.random.default_rng(14)
        for _ in range(100):
            dataset = []
            for i in range(int(rng.integers(1, 12))):
                steps = int(rng.integers(1, 10))
                dataset.append(predictor.FeatureSequence(
                    f"r{i}", rng.normal(size=(steps, 2)),
                    rng.integers(0, 2, size=steps).astype(np.int8)))
            report = predictor.evaluate(all_ones, dataset,
                                        MemorizationBinning.from_width(0.1))
            positives = sum(int(fs.labels.sum()) for fs in dataset)
            total = sum(fs.labels.size for fs in dataset)
            assert report.token_accuracy == positives / total


def _build_determinism_fixtures(base):
    sentences = [list(range(i * 12, (i + 1) * 12)) for i in range(30)]
    vocab = 600
    rng = np.random.default_rng(15)
    train_path = os.path.join(base, "train.tokens")
    corpus_io.write_corpus(train_path, sentences, vocab_size=vocab)
    eval_docs = []
    for i, s in enumerate(sentences[:20]):
        doc = list(s)
        if i % 2 == 1:
            doc[6:] = [int(rng.integers(400, vocab)) for _ in range(6)]
        eval_docs.append(doc)
    eval_path = os.path.join(base, "eval.tokens")
    corpus_io.write_corpus(eval_path, eval_docs, vocab_size=vocab)

    def cli(argv):
        assert cli_main([str(a) for a in argv]) == 0

    fit_small = os.path.join(base, "fit_small")
    fit_large = os.path.join(base, "fit_large")
    cli(["toy-fit", "--corpus", train_path, "--max-order", 2, "--out", fit_small])
    cli(["toy-fit", "--corpus", train_path, "--max-order", 6, "--out", fit_large])
    traces_small = os.path.join(base, "tr_small")
    traces_large = os.path.join(base, "tr_large")
    cli(["toy-trace", "--model", os.path.join(fit_small, "toy_model.json"),
         "--corpus", eval_path, "--context-len", 6, "--continuation-len", 6,
         "--label", "1m", "--out", traces_small])
    cli(["toy-trace", "--model", os.path.join(fit_large, "toy_model.json"),
         "--corpus", eval_path, "--context-len", 6, "--continuation-len", 6,
         "--label", "4m", "--out", traces_large])
    counter_dir = os.path.join(base, "counter")
    cli(["ngram-count", "--corpus", train_path, "--order", 1, "--out", counter_dir])
    predictor_dir = os.path.join(base, "predictor")
    cli(["predict-train", "--traces", os.path.join(traces_large, "traces.jsonl"),
         "--counter", os.path.join(counter_dir, "ngrams_order1.ngct"),
         "--epochs", 1, "--out", predictor_dir])
    return {
        "train": train_path,
        "eval": eval_path,
        "model": os.path.join(fit_large, "toy_model.json"),
        "small": os.path.join(traces_small, "traces.jsonl"),
        "large": os.path.join(traces_large, "traces.jsonl"),
        "counter": os.path.join(counter_dir, "ngrams_order1.ngct"),
        "predictor": os.path.join(predictor_dir, "predictor.mprd"),
    }


def test_cli_determinism(tmp_path):
    with criterion("cli-determinism"):
        base = str(tmp_path)
        fx = _build_determinism_fixtures(base)
        commands = {
            "score": ["score", "--traces", fx["large"]],
            "transition": ["transition", "--traces", fx["small"], fx["large"]],
            "position-hist": ["position-hist", "--traces", fx["large"],
                              "--parts", 5, "--predicate", "any"],
            "ngram-count": ["ngram-count", "--corpus", fx["train"], "--order", 2],
            "ngram-profile": ["ngram-profile", "--traces", fx["large"],
                              "--counter", fx["counter"],
                              "--cohorts", "memorized,unmemorized"],
            "gram-stats": ["gram-stats", "--traces", fx["large"],
                           "--counter", fx["counter"],
                           "--cohorts", "memorized,unmemorized"],
            "entropy-profile": ["entropy-profile", "--traces", fx["large"],
                                "--cohorts", "memorized,unmemorized"],
            "embed-geometry": ["embed-geometry", "--traces", fx["large"]],
            "toy-fit": ["toy-fit", "--corpus", fx["train"]],
            "toy-trace": ["toy-trace", "--model", fx["model"],
                          "--corpus", fx["eval"], "--context-len", 6,
                          "--continuation-len", 6],
            "predict-train": ["predict-train", "--traces", fx["large"],
                              "--counter", fx["counter"], "--epochs", 1],
            "predict-eval": ["predict-eval", "--predictor", fx["predictor"],
                             "--traces", fx["large"], "--counter", fx["counter"]],
            "grad-check": ["grad-check"],
            "report": ["report", "--traces", fx["small"], fx["large"],
                       "--counter", fx["counter"],
                       "--predictor", fx["predictor"], "--parts", 5],
        }
        for name, argv in commands.items():
            outs = []
            for threads in (1, 8):
                out = os.path.join(base, f"det-{name}-t{threads}")
                code = cli_main([str(a) for a in argv] +
                                ["--seed", "42", "--threads", str(threads),
                                 "--out", out])
                assert code == 0, name
                outs.append(out)
            files_a = sorted(os.listdir(outs[0]))
            files_b = sorted(os.listdir(outs[1]))
            assert files_a == files_b, name
            for fname in files_a:
                match = filecmp.cmp(os.path.join(outs[0], fname),
                                    os.path.join(outs[1], fname), shallow=False)
                assert match, f"{name}: {fname} differs between thread counts"
