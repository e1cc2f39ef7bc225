"""Command-line front end: one subcommand per pipeline stage.

All outputs are written atomically (temp file + rename) into --out, one
summary line is printed per file, and every subcommand is byte-reproducible
for a fixed seed regardless of --threads. Exit codes: 0 success, 1 data
error (message names file and line), 2 configuration error (message names
the flag).
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from typing import Sequence

import numpy as np

from . import dynamics, figures, ngrams, predictor, scoring, toylm
from .errors import ConfigError, DegenerateInput, EmptyInput, MemtraceError
from .fileio import parallel_map, write_csv
from .scoring import MemorizationBinning
from .traces import GenerationTrace, TraceSet, read_trace_stream, write_traces
from .fileio import atomic_writer

DEFAULT_COHORTS = "memorized,half,unmemorized"
_ALL_COHORTS = ("memorized", "half", "quarter", "unmemorized", "all")


def _require_files(paths: Sequence[str], flag: str) -> list[str]:
    if not paths:
        raise ConfigError(f"{flag}: at least one path required")
    for p in paths:
        if not os.path.isfile(p):
            raise ConfigError(f"{flag}: file not found: {p}")
    return list(paths)


def _read_traces(paths: Sequence[str]) -> list[GenerationTrace]:
    out: list[GenerationTrace] = []
    for path in paths:
        try:
            out.extend(read_trace_stream(path))
        except MemtraceError as err:
            raise type(err)(f"{path}: {err}") from None
    return out


def _trace_set(paths: Sequence[str]) -> TraceSet:
    return TraceSet(tuple(_read_traces(paths)))


def _binning(args) -> MemorizationBinning:
    return MemorizationBinning.from_width(args.bin_width)


def _parse_cohorts(text: str) -> list[str]:
    names = [c.strip() for c in text.split(",") if c.strip()]
    for name in names:
        if name not in _ALL_COHORTS:
            raise ConfigError(f"--cohorts: unknown cohort {name!r}")
    if not names:
        raise ConfigError("--cohorts: empty list")
    return names


def _cohort_sets(traces: Sequence[GenerationTrace], cohorts: Sequence[str]) -> dict[str, list[GenerationTrace]]:
    groups: dict[str, list[GenerationTrace]] = {}
    wanted = [c for c in cohorts if c != "all"]
    if wanted:
        groups.update(scoring.split_cohorts(traces, wanted))
    if "all" in cohorts:
        groups["all"] = list(traces)
    return groups


def _sanitize(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name)


def _model_size_key(label: str):
    m = re.fullmatch(r"(\d+(?:\.\d+)?)([kmbt]?)", label.lower())
    if not m:
        return (float("inf"), label)
    scale = {"": 1, "k": 1e3, "m": 1e6, "b": 1e9, "t": 1e12}[m.group(2)]
    return (float(m.group(1)) * scale, label)


# --- subcommand handlers -------------------------------------------------------

def cmd_score(args) -> list[str]:
    paths = _require_files(args.traces, "--traces")
    traces = _trace_set(paths)
    if len(traces) == 0:
        raise EmptyInput("no traces in input")
    scheme = _binning(args)
    scores = list(parallel_map(scoring.score_trace, traces, args.threads))
    out_scores = os.path.join(args.out, "scores.csv")
    write_csv(out_scores, ["sequence_id", "model", "matches", "length", "score"],
              ((t.sequence_id, t.model.label, s.matches, s.length, s.value)
               for t, s in zip(traces, scores)))
    counts = [0] * scheme.n_bins
    for s in scores:
        counts[scheme.bin_index(s)] += 1
    out_hist = os.path.join(args.out, "histogram.csv")
    write_csv(out_hist, ["bin_index", "label", "lo", "hi", "count", "normalized"],
              ((i, scheme.labels[i], *scheme.edges(i), c, c / len(traces))
               for i, c in enumerate(counts)))
    return [out_scores, out_hist]


def cmd_transition(args) -> list[str]:
    paths = _require_files(args.traces, "--traces")
    if len(paths) != 2:
        raise ConfigError("--traces: transition needs exactly two files (small, large)")
    small = _trace_set([paths[0]])
    large = _trace_set([paths[1]])
    scheme = _binning(args)
    matrix = scoring.transition_matrix(
        scoring.score_map(small), scoring.score_map(large), scheme)
    out = os.path.join(args.out, "transition.csv")
    write_csv(out, ["row_bin", "col_bin", "row_label", "col_label", "count", "normalized"],
              ((a, b, scheme.labels[a], scheme.labels[b],
                int(matrix.counts[a, b]), float(matrix.row_normalized[a, b]))
               for a in range(scheme.n_bins) for b in range(scheme.n_bins)))
    return [out]


def cmd_position_hist(args) -> list[str]:
    paths = _require_files(args.traces, "--traces")
    traces = _trace_set(paths)
    predicate = scoring.parse_predicate(args.predicate)
    counts = scoring.corpus_position_histogram(
        traces, parts=args.parts, predicate=predicate, max_index=args.max_index)
    max_index = args.max_index if args.max_index is not None else max(
        t.corpus_index for t in traces)
    width = max(1, (max_index + 1) // args.parts)
    out = os.path.join(args.out, "position_hist.csv")
    write_csv(out, ["part", "index_lo", "index_hi", "count"],
              ((i, i * width,
                max_index if i == args.parts - 1 else (i + 1) * width - 1, c)
               for i, c in enumerate(counts)))
    return [out]


def cmd_ngram_count(args) -> list[str]:
    _require_files([args.corpus], "--corpus")
    counter = ngrams.count_ngrams(
        args.corpus, args.order,
        max_memory_entries=args.memory_entries, threads=args.threads)
    out = os.path.join(args.out, f"ngrams_order{args.order}.ngct")
    ngrams.save_counter(counter, out)
    return [out, ngrams.meta_path(out)]


def _load_counters(paths: Sequence[str]) -> list[ngrams.NgramCounter]:
    return [ngrams.load_counter(p) for p in _require_files(paths, "--counter")]


def cmd_ngram_profile(args) -> list[str]:
    traces = _read_traces(_require_files(args.traces, "--traces"))
    counter = _load_counters(args.counter)[0]
    cohorts = _cohort_sets(traces, _parse_cohorts(args.cohorts))
    rows = []
    for name in sorted(cohorts):
        members = cohorts[name]
        if not members:
            print(f"note: cohort {name!r} is empty, skipped", file=sys.stderr)
            continue
        profile = ngrams.index_profile(TraceSet(tuple(members)), counter, group=name,
                                       use_generated=args.generated, threads=args.threads)
        rows.extend((name, i, mean) for i, mean in enumerate(profile.per_index_mean))
    out = os.path.join(args.out, "index_profile.csv")
    write_csv(out, ["group", "index", "mean_frequency"], rows)
    return [out]


def cmd_gram_stats(args) -> list[str]:
    traces = _read_traces(_require_files(args.traces, "--traces"))
    counters = _load_counters(args.counter)
    cohorts = _cohort_sets(traces, _parse_cohorts(args.cohorts))
    rows = []
    for counter in counters:
        for name in sorted(cohorts):
            members = cohorts[name]
            if not members:
                print(f"note: cohort {name!r} is empty, skipped", file=sys.stderr)
                continue
            stats = ngrams.sequence_gram_stats(
                TraceSet(tuple(members)), counter, group=name,
                use_generated=args.generated, threads=args.threads)
            rows.append((name, stats.order, stats.avg_context_freq,
                         stats.avg_continuation_freq, stats.boundary_diff,
                         stats.n_traces))
    out = os.path.join(args.out, "gram_stats.csv")
    write_csv(out, ["group", "order", "avg_context_freq", "avg_continuation_freq",
                    "boundary_diff", "traces"], rows)
    return [out]


def cmd_entropy_profile(args) -> list[str]:
    traces = _read_traces(_require_files(args.traces, "--traces"))
    cohorts = _cohort_sets(traces, _parse_cohorts(args.cohorts))
    rows = []
    for name in sorted(cohorts):
        members = cohorts[name]
        if not members:
            print(f"note: cohort {name!r} is empty, skipped", file=sys.stderr)
            continue
        profile = dynamics.entropy_profile(members, group=name)
        rows.extend((name, i, v) for i, v in enumerate(profile.per_index_mean))
    out = os.path.join(args.out, "entropy_profile.csv")
    write_csv(out, ["group", "index", "mean_entropy_nats"], rows)
    return [out]


def cmd_embed_geometry(args) -> list[str]:
    traces = _read_traces(_require_files(args.traces, "--traces"))
    centroids = dynamics.group_centroids(traces)
    report = dynamics.pairwise_geometry(centroids)
    keys = report.group_keys
    out_geo = os.path.join(args.out, "geometry.csv")
    write_csv(out_geo, ["step", "group_a", "group_b", "cosine", "euclidean"],
              ((s, keys[a], keys[b],
                None if np.isnan(report.cosine[s, a, b]) else float(report.cosine[s, a, b]),
                float(report.euclidean[s, a, b]))
               for s in range(report.cosine.shape[0])
               for a in range(len(keys)) for b in range(len(keys))))
    written = [out_geo]
    try:
        coords, result = dynamics.centroid_pca(centroids)
    except DegenerateInput:
        print("note: centroids are identical, PCA skipped", file=sys.stderr)
        return written
    out_pca = os.path.join(args.out, "pca.csv")
    write_csv(out_pca, ["step", "group", "pc1", "pc2"],
              ((s, keys[g], float(coords[s, g, 0]), float(coords[s, g, 1]))
               for s in range(coords.shape[0]) for g in range(len(keys))))
    written.append(out_pca)
    return written


def cmd_toy_fit(args) -> list[str]:
    _require_files([args.corpus], "--corpus")
    model = toylm.fit_trie(args.corpus, max_order=args.max_order,
                           embedding_dim=args.embedding_dim)
    out = os.path.join(args.out, "toy_model.json")
    toylm.save_trie(model, out)
    return [out]


def cmd_toy_trace(args) -> list[str]:
    _require_files([args.model], "--model")
    _require_files([args.corpus], "--corpus")
    model = toylm.load_trie(args.model)
    from . import corpus as corpus_io

    docs = corpus_io.iter_corpus(args.corpus)
    if args.limit is not None:
        import itertools
        docs = itertools.islice(docs, args.limit)
    traces = toylm.make_traces(model, docs, args.context_len, args.continuation_len,
                               label=args.label)
    out = os.path.join(args.out, "traces.jsonl")
    with atomic_writer(out, text=True) as fp:
        write_traces(fp, traces)
    return [out]


def cmd_predict_train(args) -> list[str]:
    traces = _read_traces(_require_files(args.traces, "--traces"))
    counter = _load_counters(args.counter)[0]
    features = list(parallel_map(lambda t: predictor.featurize(t, counter),
                                 traces, args.threads))
    if not features:
        raise EmptyInput("no traces to train on")
    train, val = _split_by_id_hash(features, args.seed)
    config = predictor.PredictorConfig(d_in=features[0].features.shape[1],
                                       d_model=args.d_model)
    train_config = predictor.TrainConfig(
        epochs=args.epochs, learning_rate=args.lr,
        batch_size=args.batch_size, seed=args.seed)
    model, losses = predictor.train(train, config, train_config)
    out_model = os.path.join(args.out, "predictor.mprd")
    predictor.save_model(model, out_model)
    out_log = os.path.join(args.out, "train_log.csv")
    write_csv(out_log, ["epoch", "mean_loss"],
              ((i, loss) for i, loss in enumerate(losses)))
    written = [out_model, out_log]
    if val:
        report = predictor.evaluate(model, val, MemorizationBinning.from_width(0.2))
        out_val = os.path.join(args.out, "val_metrics.csv")
        write_csv(out_val, ["sequences", "tokens", "token_accuracy", "full_accuracy"],
                  [(report.n_sequences, report.n_tokens,
                    report.token_accuracy, report.full_accuracy)])
        written.append(out_val)
    return written


def _split_by_id_hash(features: list[predictor.FeatureSequence], seed: int):
    """Deterministic 90/10 split keyed on a salted digest of the sequence id."""

    import hashlib

    train, val = [], []
    for fs in features:
        digest = hashlib.sha256(f"{seed}:{fs.sequence_id}".encode()).digest()
        (val if digest[0] % 10 == 0 else train).append(fs)
    if not train:
        train, val = val, []
    return train, val


def cmd_predict_eval(args) -> list[str]:
    _require_files([args.predictor], "--predictor")
    traces = _read_traces(_require_files(args.traces, "--traces"))
    counter = _load_counters(args.counter)[0]
    model = predictor.load_model(args.predictor)
    features = list(parallel_map(lambda t: predictor.featurize(t, counter),
                                 traces, args.threads))
    scheme = _binning(args)
    report = predictor.evaluate(model, features, scheme)
    lengths = {fs.labels.size for fs in features}
    out_eval = os.path.join(args.out, "eval.csv")
    write_csv(out_eval, ["length", "sequences", "tokens", "token_accuracy", "full_accuracy"],
              [("/".join(map(str, sorted(lengths))), report.n_sequences,
                report.n_tokens, report.token_accuracy, report.full_accuracy)])
    out_bins = os.path.join(args.out, "eval_bins.csv")
    write_csv(out_bins, ["bin_index", "label", "full_correct"],
              ((i, scheme.labels[i], c)
               for i, c in enumerate(report.full_correct_by_bin)))
    return [out_eval, out_bins]


def cmd_grad_check(args) -> list[str]:
    rng = np.random.default_rng(args.seed)
    d_in = 8
    config = predictor.PredictorConfig(d_in=d_in, d_model=16, n_heads=4, d_ff=32)
    model = predictor.init_model(config, seed=args.seed)
    batch = [
        predictor.FeatureSequence(
            sequence_id=f"gc-{i}",
            features=rng.normal(size=(6, d_in)),
            labels=rng.integers(0, 2, size=6).astype(np.int8),
        )
        for i in range(2)
    ]
    err = predictor.grad_check(model, batch, epsilon=args.epsilon, seed=args.seed)
    out = os.path.join(args.out, "grad_check.csv")
    write_csv(out, ["max_relative_error", "epsilon", "seed"],
              [(err, args.epsilon, args.seed)])
    return [out]


# --- the report bundle ----------------------------------------------------------

def cmd_report(args) -> list[str]:
    traces = _read_traces(_require_files(args.traces, "--traces"))
    if not traces:
        raise EmptyInput("no traces in input")
    scheme = _binning(args)
    written: list[str] = []
    groups: dict[tuple[str, int, int], list[GenerationTrace]] = {}
    for t in traces:
        groups.setdefault((t.model.label, t.context_len, t.continuation_len), []).append(t)
    keyed = {k: TraceSet(tuple(v)) for k, v in groups.items()}
    shapes = sorted({(c, n) for (_, c, n) in keyed})
    labels_by_shape = {
        shape: sorted({lbl for (lbl, c, n) in keyed if (c, n) == shape},
                      key=_model_size_key)
        for shape in shapes
    }

    written += _report_histograms(args, keyed, shapes, labels_by_shape, scheme)
    written += _report_aggregate(args, keyed)
    written += _report_transitions(args, keyed, shapes, labels_by_shape)
    written += _report_position_hist(args, keyed)
    written += _report_entropy(args, keyed)
    if args.counter:
        counters = _load_counters(args.counter)
        written += _report_gram_analyses(args, keyed, counters)
        if args.predictor:
            order1 = [c for c in counters if c.order == 1]
            if order1:
                written += _report_predictor(args, keyed, order1[0], scheme)
            else:
                print("note: --predictor needs an order-1 --counter, skipped",
                      file=sys.stderr)
    elif args.predictor:
        print("note: --predictor needs --counter for features, skipped", file=sys.stderr)
    written += _report_geometry(args, keyed)
    return written


def _report_histograms(args, keyed, shapes, labels_by_shape, scheme) -> list[str]:
    rows = []
    for key in sorted(keyed):
        label, ctx, cont = key
        counts = scoring.histogram_by_bin(keyed[key], scheme)
        total = len(keyed[key])
        rows.extend((label, ctx, cont, i, scheme.labels[i], c, c / total)
                    for i, c in enumerate(counts))
    out = os.path.join(args.out, "score_histogram.csv")
    write_csv(out, ["model", "context_len", "continuation_len",
                    "bin_index", "bin_label", "count", "normalized"], rows)
    written = [out]
    for ctx, cont in shapes:
        series = {
            label: scoring.histogram_by_bin(keyed[(label, ctx, cont)], scheme)
            for label in labels_by_shape[(ctx, cont)]
        }
        fig = os.path.join(args.out, f"fig_histogram_c{ctx}_n{cont}.png")
        figures.save_grouped_bars(
            fig, scheme.labels, series,
            f"Sequences per memorization bin (context {ctx}, continuation {cont})")
        written.append(fig)
    return written


def _report_aggregate(args, keyed) -> list[str]:
    rows = scoring.aggregate_counts(keyed, scoring.is_fully_memorized)
    out = os.path.join(args.out, "fully_memorized_counts.csv")
    write_csv(out, ["model", "context_len", "continuation_len", "fully_memorized"],
              ((label, ctx, cont, count) for (label, ctx, cont), count in rows))
    return [out]


def _report_transitions(args, keyed, shapes, labels_by_shape) -> list[str]:
    scheme = MemorizationBinning.from_width(0.2)  # labeled five-bin transitions
    written: list[str] = []
    for shape in shapes:
        labels = labels_by_shape[shape]
        for small, large in zip(labels, labels[1:]):
            a = scoring.score_map(keyed[(small, *shape)])
            b = scoring.score_map(keyed[(large, *shape)])
            if set(a) != set(b):
                print(f"note: {small}->{large}: different sequences, "
                      "transition skipped", file=sys.stderr)
                continue
            matrix = scoring.transition_matrix(a, b, scheme)
            stem = f"transition_{_sanitize(small)}_to_{_sanitize(large)}"
            out = os.path.join(args.out, stem + ".csv")
            write_csv(out, ["row_bin", "col_bin", "row_label", "col_label",
                            "count", "normalized"],
                      ((i, j, scheme.labels[i], scheme.labels[j],
                        int(matrix.counts[i, j]), float(matrix.row_normalized[i, j]))
                       for i in range(scheme.n_bins) for j in range(scheme.n_bins)))
            fig = os.path.join(args.out, stem + ".png")
            figures.save_heatmap(fig, matrix.row_normalized.tolist(),
                                 list(scheme.labels), f"{small} → {large}")
            written += [out, fig]
    return written


def _report_position_hist(args, keyed) -> list[str]:
    rows = []
    series: dict[str, list[tuple[float, float]]] = {}
    for key in sorted(keyed):
        label, ctx, cont = key
        counts = scoring.corpus_position_histogram(
            keyed[key], parts=args.parts, predicate=scoring.is_fully_memorized)
        rows.extend((label, ctx, cont, i, c) for i, c in enumerate(counts))
        series[f"{label} c{ctx} n{cont}"] = [(float(i), float(c))
                                             for i, c in enumerate(counts)]
    out = os.path.join(args.out, "position_hist.csv")
    write_csv(out, ["model", "context_len", "continuation_len", "part", "count"], rows)
    fig = os.path.join(args.out, "fig_position_hist.png")
    figures.save_lines(fig, series, "Fully memorized sequences per corpus slice",
                       "corpus slice", "sequences")
    return [out, fig]


def _report_entropy(args, keyed) -> list[str]:
    rows = []
    written: list[str] = []
    for key in sorted(keyed):
        label, ctx, cont = key
        cohorts = _cohort_sets(list(keyed[key]), ("memorized", "half", "unmemorized"))
        series: dict[str, list[tuple[float, float]]] = {}
        for name in sorted(cohorts):
            members = cohorts[name]
            if not members:
                continue
            profile = dynamics.entropy_profile(members, group=name)
            rows.extend((label, ctx, cont, name, i, v)
                        for i, v in enumerate(profile.per_index_mean))
            series[name] = [(float(i), v) for i, v in enumerate(profile.per_index_mean)]
        if series:
            fig = os.path.join(
                args.out, f"fig_entropy_{_sanitize(label)}_c{ctx}_n{cont}.png")
            figures.save_lines(fig, series, f"Mean decoding entropy ({label})",
                               "continuation index", "entropy (nats)")
            written.append(fig)
    out = os.path.join(args.out, "entropy_profile.csv")
    write_csv(out, ["model", "context_len", "continuation_len", "group",
                    "index", "mean_entropy_nats"], rows)
    return [out] + written


def _report_gram_analyses(args, keyed, counters) -> list[str]:
    profile_rows = []
    stats_rows = []
    written: list[str] = []
    for key in sorted(keyed):
        label, ctx, cont = key
        cohorts = _cohort_sets(list(keyed[key]),
                               ("memorized", "half", "quarter", "unmemorized"))
        for counter in counters:
            series: dict[str, list[tuple[float, float]]] = {}
            for name in sorted(cohorts):
                members = cohorts[name]
                if not members:
                    continue
                tset = TraceSet(tuple(members))
                profile = ngrams.index_profile(tset, counter, group=name,
                                               threads=args.threads)
                profile_rows.extend(
                    (label, ctx, cont, counter.order, name, i, mean)
                    for i, mean in enumerate(profile.per_index_mean))
                series[name] = [(float(i), m)
                                for i, m in enumerate(profile.per_index_mean)
                                if m is not None]
                stats = ngrams.sequence_gram_stats(tset, counter, group=name,
                                                   threads=args.threads)
                stats_rows.append((label, ctx, cont, counter.order, name,
                                   stats.avg_context_freq,
                                   stats.avg_continuation_freq,
                                   stats.boundary_diff, stats.n_traces))
            if series:
                fig = os.path.join(
                    args.out,
                    f"fig_index_profile_o{counter.order}_{_sanitize(label)}"
                    f"_c{ctx}_n{cont}.png")
                figures.save_lines(
                    fig, series, f"Mean {counter.order}-gram frequency ({label})",
                    "index", "mean frequency", boundary=float(ctx))
                written.append(fig)
    out_profile = os.path.join(args.out, "index_profile.csv")
    write_csv(out_profile, ["model", "context_len", "continuation_len", "order",
                            "group", "index", "mean_frequency"], profile_rows)
    out_stats = os.path.join(args.out, "gram_stats.csv")
    write_csv(out_stats, ["model", "context_len", "continuation_len", "order",
                          "group", "avg_context_freq", "avg_continuation_freq",
                          "boundary_diff", "traces"], stats_rows)
    return [out_profile, out_stats] + written


def _report_geometry(args, keyed) -> list[str]:
    written: list[str] = []
    for key in sorted(keyed):
        label, ctx, cont = key
        members = list(keyed[key])
        if any(t.step_embedding is None for t in members):
            continue
        centroids = dynamics.group_centroids(members)
        if len(centroids.keys) < 2:
            continue
        report = dynamics.pairwise_geometry(centroids)
        keys = report.group_keys
        stem = f"{_sanitize(label)}_c{ctx}_n{cont}"
        out_geo = os.path.join(args.out, f"geometry_{stem}.csv")
        write_csv(out_geo, ["step", "group_a", "group_b", "cosine", "euclidean"],
                  ((s, keys[a], keys[b],
                    None if np.isnan(report.cosine[s, a, b])
                    else float(report.cosine[s, a, b]),
                    float(report.euclidean[s, a, b]))
                   for s in range(report.cosine.shape[0])
                   for a in range(len(keys)) for b in range(len(keys))))
        written.append(out_geo)
        try:
            coords, _ = dynamics.centroid_pca(centroids)
        except DegenerateInput:
            print(f"note: {label}: identical centroids, PCA skipped", file=sys.stderr)
            continue
        out_pca = os.path.join(args.out, f"pca_{stem}.csv")
        write_csv(out_pca, ["step", "group", "pc1", "pc2"],
                  ((s, keys[g], float(coords[s, g, 0]), float(coords[s, g, 1]))
                   for s in range(coords.shape[0]) for g in range(len(keys))))
        fig = os.path.join(args.out, f"fig_pca_{stem}.png")
        figures.save_scatter_paths(
            fig,
            {keys[g]: [(float(coords[s, g, 0]), float(coords[s, g, 1]))
                       for s in range(coords.shape[0])] for g in range(len(keys))},
            f"Centroid drift in shared projection ({label})")
        written += [out_pca, fig]
    return written


def _report_predictor(args, keyed, counter, scheme) -> list[str]:
    model = predictor.load_model(args.predictor)
    eval_rows = []
    bin_rows = []
    for key in sorted(keyed):
        label, ctx, cont = key
        members = list(keyed[key])
        if any(t.step_embedding is None for t in members):
            continue
        features = list(parallel_map(lambda t: predictor.featurize(t, counter),
                                     members, args.threads))
        report = predictor.evaluate(model, features, scheme)
        eval_rows.append((label, ctx, cont, report.n_sequences, report.n_tokens,
                          report.token_accuracy, report.full_accuracy))
        bin_rows.extend((label, ctx, cont, i, scheme.labels[i], c)
                        for i, c in enumerate(report.full_correct_by_bin))
    if not eval_rows:
        return []
    out_eval = os.path.join(args.out, "predictor_eval.csv")
    write_csv(out_eval, ["model", "context_len", "continuation_len", "sequences",
                         "tokens", "token_accuracy", "full_accuracy"], eval_rows)
    out_bins = os.path.join(args.out, "predictor_full_by_bin.csv")
    write_csv(out_bins, ["model", "context_len", "continuation_len", "bin_index",
                         "bin_label", "full_correct"], bin_rows)
    series = {}
    for (label, ctx, cont, *_rest) in eval_rows:
        counts = [c for (l2, c2, n2, _i, _lbl, c) in bin_rows
                  if (l2, c2, n2) == (label, ctx, cont)]
        series[f"{label} c{ctx} n{cont}"] = counts
    fig = os.path.join(args.out, "fig_predictor_full_by_bin.png")
    figures.save_grouped_bars(fig, scheme.labels, series,
                              "Fully correct predictions by memorization bin")
    return [out_eval, out_bins, fig]


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memtrace",
        description="Memorization measurement over portable generation traces.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, traces=False, corpus=False, counter=False, bins=False):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=42)
        p.add_argument("--threads", type=int, default=1)
        if traces:
            p.add_argument("--traces", nargs="+", default=[], metavar="PATH")
        if corpus:
            p.add_argument("--corpus", required=True, metavar="PATH")
        if counter:
            p.add_argument("--counter", nargs="+", default=[], metavar="PATH")
        if bins:
            p.add_argument("--bin-width", type=float, default=0.1,
                           choices=[0.1, 0.2])

    p = sub.add_parser("score", help="per-trace scores and a bin histogram")
    common(p, traces=True, bins=True)
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("transition", help="bin transition matrix between two scorings")
    common(p, traces=True, bins=True)
    p.set_defaults(handler=cmd_transition, bin_width=0.2)

    p = sub.add_parser("position-hist", help="counts over corpus-position slices")
    common(p, traces=True)
    p.add_argument("--parts", type=int, default=50)
    p.add_argument("--predicate", default="full",
                   help="any | full | zero | ge:/gt:/le:/lt:/eq:<fraction>")
    p.add_argument("--max-index", type=int, default=None)
    p.set_defaults(handler=cmd_position_hist)

    p = sub.add_parser("ngram-count", help="count corpus n-grams into a snapshot")
    common(p, corpus=True)
    p.add_argument("--order", type=int, required=True, choices=[1, 2, 3])
    p.add_argument("--memory-entries", type=int, default=None,
                   help="spill partial counts to disk above this many entries")
    p.set_defaults(handler=cmd_ngram_count)

    p = sub.add_parser("ngram-profile", help="mean gram frequency at each index")
    common(p, traces=True, counter=True)
    p.add_argument("--cohorts", default=DEFAULT_COHORTS)
    p.add_argument("--generated", action="store_true",
                   help="profile decoded tokens instead of the true continuation")
    p.set_defaults(handler=cmd_ngram_profile)

    p = sub.add_parser("gram-stats", help="cohort frequency averages and boundary diff")
    common(p, traces=True, counter=True)
    p.add_argument("--cohorts", default="memorized,half,quarter,unmemorized")
    p.add_argument("--generated", action="store_true")
    p.set_defaults(handler=cmd_gram_stats)

    p = sub.add_parser("entropy-profile", help="mean decoding entropy per index")
    common(p, traces=True)
    p.add_argument("--cohorts", default=DEFAULT_COHORTS)
    p.set_defaults(handler=cmd_entropy_profile)

    p = sub.add_parser("embed-geometry", help="centroid cosine/Euclidean/PCA")
    common(p, traces=True)
    p.set_defaults(handler=cmd_embed_geometry)

    p = sub.add_parser("toy-fit", help="fit the trie backend on a corpus")
    common(p, corpus=True)
    p.add_argument("--max-order", type=int, default=toylm.DEFAULT_MAX_ORDER)
    p.add_argument("--embedding-dim", type=int, default=toylm.DEFAULT_EMBEDDING_DIM)
    p.set_defaults(handler=cmd_toy_fit)

    p = sub.add_parser("toy-trace", help="decode eval sequences into a trace file")
    common(p, corpus=True)
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--context-len", type=int, default=32)
    p.add_argument("--continuation-len", type=int, default=16)
    p.add_argument("--label", default="toy")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(handler=cmd_toy_trace)

    p = sub.add_parser("predict-train", help="train the per-token predictor")
    common(p, traces=True, counter=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--d-model", type=int, default=64)
    p.set_defaults(handler=cmd_predict_train)

    p = sub.add_parser("predict-eval", help="evaluate a saved predictor")
    common(p, traces=True, counter=True, bins=True)
    p.add_argument("--predictor", required=True, metavar="PATH")
    p.set_defaults(handler=cmd_predict_eval, bin_width=0.2)

    p = sub.add_parser("grad-check", help="finite-difference check of the predictor")
    common(p)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.set_defaults(handler=cmd_grad_check)

    p = sub.add_parser("report", help="bundle of analysis CSVs and figures")
    common(p, traces=True, counter=True, bins=True)
    p.add_argument("--predictor", default=None, metavar="PATH")
    p.add_argument("--parts", type=int, default=50)
    p.set_defaults(handler=cmd_report)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        os.makedirs(args.out, exist_ok=True)
        written = args.handler(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except MemtraceError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    for path in written:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
