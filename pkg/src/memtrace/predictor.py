"""Per-token memorization predictor: a small transformer encoder in numpy.

Each generated token becomes one feature vector (last-layer embedding, step
entropy, log one-gram frequency of the emitted token, normalized position) and
one binary label (emitted token equals the true token). A single bidirectional
self-attention block plus a per-step linear head is trained with hand-derived
gradients and Adam, so the whole path stays deterministic for a given seed and
can be verified against central finite differences.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyDataset,
    MissingEmbeddings,
    NonFiniteGradient,
    NonFiniteLoss,
    OrderMismatch,
    ParseError,
)
from .ngrams import NgramCounter
from .scoring import MemorizationBinning, MemorizationScore
from .traces import GenerationTrace

LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"MPRD"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHIIII")  # magic, version, d_in, d_model, heads, ffn

# no key bias: softmax is invariant to a per-row score shift, so a key bias
# would be an unidentifiable parameter with an identically-zero gradient
PARAM_ORDER = (
    "w_in", "b_in",
    "wq", "bq", "wk", "wv", "bv", "wo", "bo",
    "ln1_g", "ln1_b",
    "w1", "b1", "w2", "b2",
    "ln2_g", "ln2_b",
    "w_head", "b_head",
)
BYPASS_PARAM_ORDER = ("w_head", "b_head")


@dataclass(frozen=True)
class PredictorConfig:
    d_in: int
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    bypass_encoder: bool = False  # degenerate logistic-regression mode, test hook

    def __post_init__(self):
        if self.d_in < 1:
            raise DimensionMismatch(f"d_in must be >= 1, got {self.d_in}")
        if not self.bypass_encoder and self.d_model % self.n_heads != 0:
            raise DimensionMismatch(
                f"d_model {self.d_model} not divisible by {self.n_heads} heads")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    seed: int = 42


@dataclass(frozen=True)
class FeatureSequence:
    """Per-step features and binary memorization labels for one trace."""

    sequence_id: str
    features: np.ndarray  # (steps, d_in) float64
    labels: np.ndarray    # (steps,) int8

    @property
    def score(self) -> MemorizationScore:
        return MemorizationScore(int(self.labels.sum()), int(self.labels.size))


def featurize(trace: GenerationTrace, counter: NgramCounter) -> FeatureSequence:
    """Feature layout: embedding, entropy, ln(1 + one-gram count), position."""

    if trace.step_embedding is None:
        raise MissingEmbeddings(f"trace {trace.sequence_id!r} has no step embeddings")
    if counter.order != 1:
        raise OrderMismatch("featurization needs an order-1 counter")
    emb = np.asarray(trace.step_embedding, dtype=np.float64)
    steps = emb.shape[0]
    entropy = np.asarray(trace.step_entropy, dtype=np.float64)
    freq = np.array(
        [math.log1p(counter.frequency((tok,))) for tok in trace.generated_continuation])
    pos = (np.arange(steps) / (steps - 1)) if steps > 1 else np.zeros(1)
    features = np.concatenate([emb, entropy[:, None], freq[:, None], pos[:, None]], axis=1)
    labels = np.fromiter(
        (int(g == t) for g, t in zip(trace.generated_continuation, trace.true_continuation)),
        dtype=np.int8, count=steps)
    return FeatureSequence(trace.sequence_id, features, labels)


def featurize_all(traces: Iterable[GenerationTrace], counter: NgramCounter) -> list[FeatureSequence]:
    return [featurize(t, counter) for t in traces]


@dataclass
class PredictorModel:
    config: PredictorConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def param_order(self) -> tuple[str, ...]:
        return BYPASS_PARAM_ORDER if self.config.bypass_encoder else PARAM_ORDER


def init_model(config: PredictorConfig, seed: int = 42) -> PredictorModel:
    """Seeded Glorot-normal linear weights, unit layer-norm gains, zero biases."""

    rng = np.random.default_rng(seed)

    def glorot(fan_in: int, fan_out: int, shape) -> np.ndarray:
        return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=shape)

    d_in, d, f = config.d_in, config.d_model, config.d_ff
    if config.bypass_encoder:
        params = {
            "w_head": glorot(d_in, 1, (d_in,)),
            "b_head": np.zeros(()),
        }
        return PredictorModel(config, params)
    params = {
        "w_in": glorot(d_in, d, (d_in, d)),
        "b_in": np.zeros(d),
        "wq": glorot(d, d, (d, d)), "bq": np.zeros(d),
        "wk": glorot(d, d, (d, d)),
        "wv": glorot(d, d, (d, d)), "bv": np.zeros(d),
        "wo": glorot(d, d, (d, d)), "bo": np.zeros(d),
        "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
        "w1": glorot(d, f, (d, f)), "b1": np.zeros(f),
        "w2": glorot(f, d, (f, d)), "b2": np.zeros(d),
        "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
        "w_head": glorot(d, 1, (d,)),
        "b_head": np.zeros(()),
    }
    return PredictorModel(config, params)


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv_sigma
    return g * xhat + b, (xhat, inv_sigma)


def _layer_norm_backward(dy: np.ndarray, g: np.ndarray, cache):
    xhat, inv_sigma = cache
    dxhat = dy * g
    dx = inv_sigma * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def _forward(model: PredictorModel, x: np.ndarray):
    """Logits for one sequence plus every intermediate needed for backprop."""

    p = model.params
    cfg = model.config
    if x.shape[1] != cfg.d_in:
        raise DimensionMismatch(f"features have dim {x.shape[1]}, model wants {cfg.d_in}")
    if cfg.bypass_encoder:
        z = x @ p["w_head"] + p["b_head"]
        return z, {"x": x}
    h0 = x @ p["w_in"] + p["b_in"]
    t = x.shape[0]
    nh, dh = cfg.n_heads, cfg.d_head
    q = (h0 @ p["wq"] + p["bq"]).reshape(t, nh, dh).transpose(1, 0, 2)
    k = (h0 @ p["wk"]).reshape(t, nh, dh).transpose(1, 0, 2)
    v = (h0 @ p["wv"] + p["bv"]).reshape(t, nh, dh).transpose(1, 0, 2)
    scale = 1.0 / math.sqrt(dh)
    scores = (q @ k.transpose(0, 2, 1)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    heads = attn @ v                              # (nh, t, dh)
    concat = heads.transpose(1, 0, 2).reshape(t, cfg.d_model)
    attn_out = concat @ p["wo"] + p["bo"]
    r1 = h0 + attn_out
    h1, ln1 = _layer_norm(r1, p["ln1_g"], p["ln1_b"])
    f_pre = h1 @ p["w1"] + p["b1"]
    f_act = np.maximum(f_pre, 0.0)
    f_out = f_act @ p["w2"] + p["b2"]
    r2 = h1 + f_out
    h2, ln2 = _layer_norm(r2, p["ln2_g"], p["ln2_b"])
    z = h2 @ p["w_head"] + p["b_head"]
    cache = {
        "x": x, "h0": h0, "q": q, "k": k, "v": v, "attn": attn, "concat": concat,
        "ln1": ln1, "h1": h1, "f_pre": f_pre, "f_act": f_act, "ln2": ln2, "h2": h2,
        "scale": scale,
    }
    return z, cache


def _backward(model: PredictorModel, cache, dz: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    cfg = model.config
    if cfg.bypass_encoder:
        x = cache["x"]
        return {"w_head": x.T @ dz, "b_head": np.asarray(dz.sum())}
    grads: dict[str, np.ndarray] = {}
    grads["w_head"] = cache["h2"].T @ dz
    grads["b_head"] = np.asarray(dz.sum())
    dh2 = dz[:, None] * p["w_head"]
    dr2, grads["ln2_g"], grads["ln2_b"] = _layer_norm_backward(dh2, p["ln2_g"], cache["ln2"])
    # feed-forward branch
    df_out = dr2
    grads["w2"] = cache["f_act"].T @ df_out
    grads["b2"] = df_out.sum(axis=0)
    df_act = df_out @ p["w2"].T
    df_pre = df_act * (cache["f_pre"] > 0)
    grads["w1"] = cache["h1"].T @ df_pre
    grads["b1"] = df_pre.sum(axis=0)
    dh1 = dr2 + df_pre @ p["w1"].T
    dr1, grads["ln1_g"], grads["ln1_b"] = _layer_norm_backward(dh1, p["ln1_g"], cache["ln1"])
    # attention branch
    dattn_out = dr1
    grads["wo"] = cache["concat"].T @ dattn_out
    grads["bo"] = dattn_out.sum(axis=0)
    t = dattn_out.shape[0]
    nh, dh = cfg.n_heads, cfg.d_head
    dheads = (dattn_out @ p["wo"].T).reshape(t, nh, dh).transpose(1, 0, 2)
    attn, q, k, v = cache["attn"], cache["q"], cache["k"], cache["v"]
    dattn = dheads @ v.transpose(0, 2, 1)
    dv = attn.transpose(0, 2, 1) @ dheads
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores *= cache["scale"]
    dq = dscores @ k
    dk = dscores.transpose(0, 2, 1) @ q
    dh0 = dr1
    h0 = cache["h0"]
    for name, dmat in (("q", dq), ("k", dk), ("v", dv)):
        flat = dmat.transpose(1, 0, 2).reshape(t, cfg.d_model)
        grads["w" + name] = h0.T @ flat
        if name != "k":
            grads["b" + name] = flat.sum(axis=0)
        dh0 = dh0 + flat @ p["w" + name].T
    grads["w_in"] = cache["x"].T @ dh0
    grads["b_in"] = dh0.sum(axis=0)
    return grads


def _bce(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    # numerically stable logistic cross-entropy from logits
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss_and_grads(model: PredictorModel, batch: Sequence[FeatureSequence]):
    """Mean per-token cross-entropy over the batch and its parameter gradients."""

    if not batch:
        raise EmptyDataset("empty batch")
    total_tokens = sum(fs.labels.size for fs in batch)
    loss = 0.0
    grads = {name: np.zeros_like(model.params[name]) for name in model.param_order()}
    for fs in batch:
        y = fs.labels.astype(np.float64)
        z, cache = _forward(model, fs.features)
        loss += float(_bce(z, y).sum())
        dz = (_sigmoid(z) - y) / total_tokens
        for name, g in _backward(model, cache, dz).items():
            grads[name] += g
    return loss / total_tokens, grads


def train(dataset: Sequence[FeatureSequence], config: PredictorConfig,
          train_config: TrainConfig):
    """Adam on mean token cross-entropy; bitwise deterministic for a seed.

    Returns (model, per-epoch mean batch losses). Zero epochs returns the
    freshly initialized model.
    """

    if not dataset:
        raise EmptyDataset("no training sequences")
    d_in = dataset[0].features.shape[1]
    for fs in dataset:
        if fs.features.shape[1] != d_in:
            raise DimensionMismatch("training sequences disagree on feature dim")
    if d_in != config.d_in:
        raise DimensionMismatch(f"dataset dim {d_in} != config d_in {config.d_in}")
    model = init_model(config, seed=train_config.seed)
    rng = np.random.default_rng(train_config.seed + 1)
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(p) for k, p in model.params.items()}
    step = 0
    epoch_losses: list[float] = []
    for _ in range(train_config.epochs):
        order = rng.permutation(len(dataset))
        batch_losses = []
        for start in range(0, len(dataset), train_config.batch_size):
            batch = [dataset[i] for i in order[start:start + train_config.batch_size]]
            loss, grads = loss_and_grads(model, batch)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} at step {step}")
            batch_losses.append(loss)
            step += 1
            bc1 = 1.0 - train_config.beta1 ** step
            bc2 = 1.0 - train_config.beta2 ** step
            for name, g in grads.items():
                m[name] = train_config.beta1 * m[name] + (1 - train_config.beta1) * g
                v[name] = train_config.beta2 * v[name] + (1 - train_config.beta2) * g * g
                update = (m[name] / bc1) / (np.sqrt(v[name] / bc2) + train_config.adam_eps)
                model.params[name] -= train_config.learning_rate * update
                if not np.all(np.isfinite(model.params[name])):
                    raise NonFiniteLoss(f"parameter {name} became non-finite at step {step}")
        epoch_losses.append(sum(batch_losses) / len(batch_losses))
    return model, epoch_losses


@dataclass(frozen=True)
class Prediction:
    probabilities: np.ndarray
    labels: np.ndarray  # 1 where probability >= 0.5


def predict(model: PredictorModel, features: FeatureSequence | np.ndarray) -> Prediction:
    x = features.features if isinstance(features, FeatureSequence) else np.asarray(features)
    z, _ = _forward(model, x)
    probs = _sigmoid(z)
    return Prediction(probabilities=probs, labels=(probs >= 0.5).astype(np.int8))


@dataclass(frozen=True)
class EvalReport:
    token_accuracy: float
    full_accuracy: float
    full_correct_by_bin: tuple[int, ...]
    n_sequences: int
    n_tokens: int


def evaluate(model: PredictorModel, dataset: Sequence[FeatureSequence],
             scheme: MemorizationBinning) -> EvalReport:
    """Token accuracy over all tokens, full accuracy over whole sequences.

    Fully correct sequences are additionally histogrammed by their
    memorization score, mirroring the per-bin breakdown of prediction quality.
    """

    if not dataset:
        raise EmptyDataset("no evaluation sequences")
    correct_tokens = 0
    total_tokens = 0
    fully_correct = 0
    by_bin = [0] * scheme.n_bins
    for fs in dataset:
        pred = predict(model, fs)
        hits = int((pred.labels == fs.labels).sum())
        correct_tokens += hits
        total_tokens += fs.labels.size
        if hits == fs.labels.size:
            fully_correct += 1
            by_bin[scheme.bin_index(fs.score)] += 1
    return EvalReport(
        token_accuracy=correct_tokens / total_tokens,
        full_accuracy=fully_correct / len(dataset),
        full_correct_by_bin=tuple(by_bin),
        n_sequences=len(dataset),
        n_tokens=total_tokens,
    )


def token_accuracy(predicted: Sequence[int], gold: Sequence[int]) -> float:
    """Share of positions where the predicted binary label matches the gold one."""

    if len(predicted) != len(gold) or not gold:
        raise DimensionMismatch("label sequences must share a positive length")
    return sum(1 for a, b in zip(predicted, gold) if a == b) / len(gold)


def grad_check(model: PredictorModel, batch: Sequence[FeatureSequence],
               epsilon: float = 1e-5, n_samples: int = 60, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients."""

    loss, grads = loss_and_grads(model, batch)
    if not math.isfinite(loss):
        raise NonFiniteGradient("loss is non-finite")
    rng = np.random.default_rng(seed)
    names = list(model.param_order())
    sizes = np.array([model.params[n].size for n in names])
    offsets = np.cumsum(sizes)
    total = int(offsets[-1])
    worst = 0.0
    for flat_idx in rng.choice(total, size=min(n_samples, total), replace=False):
        which = int(np.searchsorted(offsets, flat_idx, side="right"))
        inner = int(flat_idx - (offsets[which - 1] if which else 0))
        name = names[which]
        param = model.params[name]
        flat = param.reshape(-1)
        orig = flat[inner]
        flat[inner] = orig + epsilon
        up, _ = loss_and_grads(model, batch)
        flat[inner] = orig - epsilon
        down, _ = loss_and_grads(model, batch)
        flat[inner] = orig
        numeric = (up - down) / (2 * epsilon)
        analytic = grads[name].reshape(-1)[inner]
        if not (math.isfinite(numeric) and math.isfinite(analytic)):
            raise NonFiniteGradient(f"non-finite gradient for {name}[{inner}]")
        err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        worst = max(worst, err)
    return worst


# --- checkpoints ----------------------------------------------------------------

def save_model(model: PredictorModel, path: str) -> None:
    from .fileio import atomic_writer

    if model.config.bypass_encoder:
        raise ValueError("bypass-encoder models are a test fixture, not serializable")
    cfg = model.config
    with atomic_writer(path) as fp:
        fp.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                                   cfg.d_in, cfg.d_model, cfg.n_heads, cfg.d_ff))
        for name in PARAM_ORDER:
            fp.write(model.params[name].astype("<f8").tobytes())


def load_model(path: str) -> PredictorModel:
    with open(path, "rb") as fp:
        head = fp.read(_CKPT_HEADER.size)
        if len(head) != _CKPT_HEADER.size:
            raise ParseError(f"{path}: truncated checkpoint header")
        magic, version, d_in, d_model, heads, ffn = _CKPT_HEADER.unpack(head)
        if magic != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: bad checkpoint magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        config = PredictorConfig(d_in=d_in, d_model=d_model, n_heads=heads, d_ff=ffn)
        reference = init_model(config, seed=0)
        params = {}
        for name in PARAM_ORDER:
            shape = reference.params[name].shape
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fp.read(8 * count), dtype="<f8")
            if data.size != count:
                raise ParseError(f"{path}: checkpoint shorter than header claims")
            params[name] = data.reshape(shape).copy() if shape else np.asarray(data[0])
        if fp.read(1):
            raise ParseError(f"{path}: trailing bytes after parameters")
    return PredictorModel(config, params)
