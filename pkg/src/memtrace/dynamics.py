"""Output-side decoding dynamics: entropy profiles and embedding geometry.

Entropy is measured in nats throughout. Embedding analyses group traces by the
exact number of matched continuation tokens, average per-step embeddings into
group centroids, and compare centroids by cosine, Euclidean distance and a
shared 2-D principal-component projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateInput,
    DimensionTooSmall,
    EmptyGroup,
    EmptyInput,
    EmptyTraceSet,
    LengthMismatch,
    MissingEmbeddings,
    NegativeMass,
    NotNormalized,
)
from .traces import GenerationTrace

NORMALIZATION_TOL = 1e-9
PCA_TOL = 1e-10
PCA_MAX_ITER = 10_000


def shannon_entropy(dist: Sequence[float] | np.ndarray) -> float:
    """-sum p ln p over a probability vector, with 0 ln 0 taken as 0."""

    p = np.asarray(dist, dtype=np.float64)
    if p.size == 0:
        raise NotNormalized("empty distribution")
    if np.any(p < 0):
        raise NegativeMass(f"negative probability {float(p.min())}")
    total = float(p.sum())
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise NotNormalized(f"probabilities sum to {total}, not 1")
    nz = p[p > 0]
    return max(0.0, float(-(nz * np.log(nz)).sum()))


@dataclass(frozen=True)
class EntropyProfile:
    """Per-index mean entropy for one memorization cohort."""

    group: str
    per_index_mean: tuple[float, ...]
    context_prefix_len: int = 0


def entropy_profile(traces: Sequence[GenerationTrace], group: str) -> EntropyProfile:
    """Arithmetic mean of stored step entropies at each index of a cohort.

    When every trace also carries context entropies, the profile is prefixed
    with the per-index context means and `context_prefix_len` marks the split.
    """

    traces = list(traces)
    if not traces:
        raise EmptyGroup(f"cohort {group!r} has no traces")
    cont_len = traces[0].continuation_len
    for t in traces:
        if t.continuation_len != cont_len:
            raise LengthMismatch("cohort traces disagree on continuation length")
    steps = np.array([t.step_entropy for t in traces], dtype=np.float64)
    means = steps.mean(axis=0)
    prefix = 0
    if all(t.context_entropy is not None for t in traces):
        ctx_len = traces[0].context_len
        for t in traces:
            if t.context_len != ctx_len:
                raise LengthMismatch("cohort traces disagree on context length")
        ctx = np.array([t.context_entropy for t in traces], dtype=np.float64)
        means = np.concatenate([ctx.mean(axis=0), means])
        prefix = ctx_len
    return EntropyProfile(group=group,
                          per_index_mean=tuple(float(v) for v in means),
                          context_prefix_len=prefix)


@dataclass(frozen=True)
class GroupCentroids:
    """Per-step mean embeddings keyed by exact matched-token count."""

    groups: dict[int, np.ndarray]  # key -> (steps, hidden)
    members: dict[int, int]

    @property
    def keys(self) -> tuple[int, ...]:
        return tuple(sorted(self.groups))


def group_centroids(traces: Iterable[GenerationTrace]) -> GroupCentroids:
    """Group traces by matched-token count and average their step embeddings."""

    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    n_seen = 0
    for trace in traces:
        n_seen += 1
        if trace.step_embedding is None:
            raise MissingEmbeddings(
                f"trace {trace.sequence_id!r} carries no step embeddings")
        matched = sum(1 for g, t in zip(trace.generated_continuation,
                                        trace.true_continuation) if g == t)
        emb = np.asarray(trace.step_embedding, dtype=np.float64)
        if matched in sums:
            sums[matched] += emb
            counts[matched] += 1
        else:
            sums[matched] = emb.copy()
            counts[matched] = 1
    if n_seen == 0:
        raise EmptyTraceSet("no traces to group")
    groups = {k: sums[k] / counts[k] for k in sums}
    return GroupCentroids(groups=groups, members=counts)


@dataclass(frozen=True)
class GeometryReport:
    """Pairwise centroid geometry per decoding step.

    Matrices are indexed by `group_keys` in ascending order. Cosine entries for
    zero-norm centroids are NaN and the offending (step, group) pairs appear in
    `zero_norm_groups` instead of aborting the analysis.
    """

    group_keys: tuple[int, ...]
    cosine: np.ndarray        # (steps, groups, groups)
    euclidean: np.ndarray     # (steps, groups, groups)
    zero_norm_groups: tuple[tuple[int, int], ...]


def pairwise_geometry(centroids: GroupCentroids) -> GeometryReport:
    """Cosine and Euclidean matrices between group centroids at every step."""

    keys = centroids.keys
    if len(keys) < 2:
        raise EmptyInput(f"need at least 2 groups, got {len(keys)}")
    stacked = np.stack([centroids.groups[k] for k in keys], axis=1)  # (S, G, H)
    n_steps, n_groups, _ = stacked.shape
    cosine = np.full((n_steps, n_groups, n_groups), np.nan)
    euclid = np.zeros((n_steps, n_groups, n_groups))
    zero_pairs: list[tuple[int, int]] = []
    for s in range(n_steps):
        vecs = stacked[s]
        norms = np.linalg.norm(vecs, axis=1)
        diffs = vecs[:, None, :] - vecs[None, :, :]
        d = np.sqrt((diffs ** 2).sum(axis=2))
        euclid[s] = (d + d.T) / 2.0
        np.fill_diagonal(euclid[s], 0.0)
        ok = norms > 0
        for g in np.flatnonzero(~ok):
            zero_pairs.append((s, keys[int(g)]))
        if ok.any():
            unit = np.zeros_like(vecs)
            unit[ok] = vecs[ok] / norms[ok, None]
            cos = unit @ unit.T
            cos = np.clip((cos + cos.T) / 2.0, -1.0, 1.0)
            cos[~ok, :] = np.nan
            cos[:, ~ok] = np.nan
            for g in np.flatnonzero(ok):
                cos[g, g] = 1.0
            cosine[s] = cos
    return GeometryReport(group_keys=keys, cosine=cosine, euclidean=euclid,
                          zero_norm_groups=tuple(zero_pairs))


@dataclass(frozen=True)
class PcaResult:
    coords: np.ndarray             # (n, k)
    explained: tuple[float, ...]   # eigenvalues, descending
    components: np.ndarray         # (k, d), sign-fixed
    mean: np.ndarray               # (d,)
    total_variance: float

    @property
    def explained_ratio(self) -> tuple[float, ...]:
        if self.total_variance <= 0:
            return tuple(0.0 for _ in self.explained)
        return tuple(v / self.total_variance for v in self.explained)


def _fix_sign(v: np.ndarray) -> np.ndarray:
    idx = int(np.argmax(np.abs(v)))
    return -v if v[idx] < 0 else v


def _dominant_eigenvector(cov: np.ndarray, prior: list[np.ndarray]) -> tuple[float, np.ndarray]:
    """Power iteration for the largest eigenpair of a PSD matrix.

    Starts are deterministic; the iterate is re-orthogonalized against already
    extracted components so rounding cannot reintroduce them.
    """

    d = cov.shape[0]
    starts = [np.full(d, 1.0 / math.sqrt(d))]
    starts.extend(np.eye(d)[i] for i in np.argsort(-np.diag(cov), kind="stable"))
    for v in starts:
        v = v.copy()
        for p in prior:
            v -= (v @ p) * p
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            continue
        v /= norm
        for _ in range(PCA_MAX_ITER):
            w = cov @ v
            for p in prior:
                w -= (w @ p) * p
            norm = np.linalg.norm(w)
            if norm < 1e-300:
                # v lies in the nullspace: eigenvalue 0, any unit vector works
                return 0.0, v
            w /= norm
            if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < PCA_TOL:
                v = w
                break
            v = w
        lam = float(v @ cov @ v)
        return max(lam, 0.0), v
    # cov is (numerically) zero on the residual subspace
    raise DegenerateInput("no principal direction found")


def pca_project(vectors: Sequence[Sequence[float]] | np.ndarray, k: int = 2) -> PcaResult:
    """Mean-center, extract the top-k principal axes, and project.

    Components come from power iteration with deflation (tolerance 1e-10, at
    most 10,000 iterations each) and are sign-fixed so the largest-magnitude
    entry of each axis is positive; eigenvalues are reported descending.
    """

    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionTooSmall("expected a 2-D array of vectors")
    n, d = x.shape
    if n < 2:
        raise DimensionTooSmall(f"need at least 2 vectors, got {n}")
    if d < k:
        raise DimensionTooSmall(f"dimension {d} smaller than k={k}")
    mean = x.mean(axis=0)
    centered = x - mean
    if not np.any(np.abs(centered) > 0):
        raise DegenerateInput("all vectors are identical")
    cov = (centered.T @ centered) / (n - 1)
    total_variance = float(np.trace(cov))
    components: list[np.ndarray] = []
    eigenvalues: list[float] = []
    residual = cov.copy()
    for _ in range(k):
        try:
            lam, v = _dominant_eigenvector(residual, components)
        except DegenerateInput:
            # remaining spectrum is zero; complete the basis deterministically
            lam, v = 0.0, _orthonormal_completion(components, d)
        eigenvalues.append(lam)
        components.append(v)
        residual = residual - lam * np.outer(v, v)
    comp = np.vstack([_fix_sign(v) for v in components])
    coords = centered @ comp.T
    return PcaResult(coords=coords, explained=tuple(eigenvalues), components=comp,
                     mean=mean, total_variance=total_variance)


def _orthonormal_completion(prior: list[np.ndarray], d: int) -> np.ndarray:
    for i in range(d):
        v = np.eye(d)[i]
        for p in prior:
            v -= (v @ p) * p
        norm = np.linalg.norm(v)
        if norm > 1e-9:
            return v / norm
    raise DegenerateInput("no orthogonal direction left")


def centroid_pca(centroids: GroupCentroids, k: int = 2) -> tuple[np.ndarray, PcaResult]:
    """Project all group centroids across all steps onto one shared basis.

    Returns coordinates shaped (steps, groups, k), with groups ordered by
    ascending key, so step-to-step drift is visible in a single plane.
    """

    keys = centroids.keys
    stacked = np.stack([centroids.groups[g] for g in keys], axis=1)  # (S, G, H)
    n_steps, n_groups, hidden = stacked.shape
    flat = stacked.reshape(n_steps * n_groups, hidden)
    result = pca_project(flat, k=k)
    return result.coords.reshape(n_steps, n_groups, k), result
