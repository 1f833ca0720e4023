"""Two-layer attention LSTM that explains a fixed feature map in words.

At step t the top-layer state h1(t-1) scores each region of the feature
map, the attention-weighted glimpse feeds LSTM0, LSTM0's output feeds
LSTM1, and a deep output layer combines h1(t), the embedded previous word
and the glimpse into next-word logits.

Attention scores depend only on region content and the query state. The
glimpse passed on is the attended feature sum concatenated with the
attention weights themselves: without the weights the sum carries no
information about *where* the model looked, and location is part of what
it has to say.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .grammar import EOT_ID, PAD_ID, SOT_ID
from .tensor import RngStream, Tensor

INIT_SCALE = 0.08
FORGET_BIAS = 1.0
DEFAULT_MAX_LEN = 20


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    regions: int = 64
    feature_dim: int = 412
    hidden: int = 512
    embed: int = 256
    attention: int = 256

    @classmethod
    def reduced(cls, vocab_size: int = 32) -> "ModelConfig":
        """Small geometry used for finite-difference gradient checks."""
        return cls(vocab_size=vocab_size, regions=4, feature_dim=12, hidden=16, embed=8, attention=8)

    @property
    def grid(self) -> int:
        side = int(round(self.regions ** 0.5))
        if side * side != self.regions:
            raise ValueError(f"regions={self.regions} is not a square grid")
        return side

    @property
    def glimpse_dim(self) -> int:
        return self.feature_dim + self.regions

    def shapes(self) -> dict[str, tuple[int, ...]]:
        K, C, D, H, E, A = (self.vocab_size, self.regions, self.feature_dim,
                            self.hidden, self.embed, self.attention)
        Z = self.glimpse_dim
        return {
            "embed.weight": (K, E),
            "attn.w_feature": (D, A),
            "attn.w_hidden": (H, A),
            "attn.bias": (A,),
            "attn.score": (A,),
            "lstm0.w_input": (Z, 4 * H),
            "lstm0.w_hidden": (H, 4 * H),
            "lstm0.bias": (4 * H,),
            "lstm1.w_input": (H, 4 * H),
            "lstm1.w_hidden": (H, 4 * H),
            "lstm1.bias": (4 * H,),
            "out.w_hidden": (H, E),
            "out.w_embed": (E, E),
            "out.w_context": (Z, E),
            "out.bias": (E,),
            "out.w_logits": (E, K),
            "out.b_logits": (K,),
        }

    @classmethod
    def from_shapes(cls, shapes: Mapping[str, tuple[int, ...]]) -> "ModelConfig":
        K, E = shapes["embed.weight"]
        D, A = shapes["attn.w_feature"]
        H = shapes["attn.w_hidden"][0]
        C = shapes["lstm0.w_input"][0] - D
        return cls(vocab_size=K, regions=C, feature_dim=D, hidden=H, embed=E, attention=A)


@dataclass
class CaptionerParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(repr=False)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "CaptionerParams":
        rng = RngStream(seed, "init")
        arrays = {}
        for name, shape in config.shapes().items():
            values = (rng.child(name).uniform(shape) * 2.0 - 1.0) * INIT_SCALE
            if name.endswith(".bias") and name.startswith("lstm"):
                H = config.hidden
                values[H:2 * H] = FORGET_BIAS
            arrays[name] = values.astype(dtype)
        return cls(config, arrays)

    def validate(self) -> None:
        expected = self.config.shapes()
        missing = sorted(set(expected) - set(self.arrays))
        extra = sorted(set(self.arrays) - set(expected))
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ValueError(f"{name}: shape {self.arrays[name].shape} != expected {shape}")

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def astype(self, dtype) -> "CaptionerParams":
        return CaptionerParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "CaptionerParams":
        return CaptionerParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def tensors(self) -> dict[str, Tensor]:
        return {k: T.parameter(v, k) for k, v in self.arrays.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v, name=k) for k, v in self.arrays.items()}


class DecoderState(NamedTuple):
    h0: Tensor
    c0: Tensor
    h1: Tensor
    c1: Tensor


def initial_state(batch: int, hidden: int, dtype) -> DecoderState:
    zeros = Tensor(np.zeros((batch, hidden), dtype=dtype))
    return DecoderState(zeros, zeros, zeros, zeros)


def _as_batch(features, config: ModelConfig, dtype) -> np.ndarray:
    a = np.asarray(features, dtype=dtype)
    if a.ndim == 2:
        a = a[None]
    if a.shape[1:] != (config.regions, config.feature_dim):
        raise ValueError(
            f"feature map shape {a.shape[1:]} != ({config.regions}, {config.feature_dim})")
    return T.check_finite(a, "feature map")


def project_features(a: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Step-invariant part of the attention scores, ``(B, C, A)``."""
    return T.add(T.matmul(a, p["attn.w_feature"]), p["attn.bias"])


def attend(h_prev: Tensor, a: Tensor, p: Mapping[str, Tensor],
           projected: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Additive attention over regions.

    Returns ``alpha`` of shape ``(B, C)`` on the simplex and the context
    ``sum_c alpha_c a(c)`` of shape ``(B, D)``.
    """
    if projected is None:
        projected = project_features(a, p)
    query = T.matmul(h_prev, p["attn.w_hidden"])
    batch, regions = a.shape[0], a.shape[1]
    hidden = T.tanh(T.add(projected, T.reshape(query, (batch, 1, query.shape[-1]))))
    alpha = T.softmax(T.matmul(hidden, p["attn.score"]), axis=-1)
    assert alpha.shape == (batch, regions)
    return alpha, T.weighted_sum(alpha, a)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, p: Mapping[str, Tensor], prefix: str):
    H = h.shape[-1]
    pre = T.add(T.add(T.matmul(x, p[f"{prefix}.w_input"]), T.matmul(h, p[f"{prefix}.w_hidden"])),
                p[f"{prefix}.bias"])
    i = T.sigmoid(T.columns(pre, 0, H))
    f = T.sigmoid(T.columns(pre, H, 2 * H))
    g = T.tanh(T.columns(pre, 2 * H, 3 * H))
    o = T.sigmoid(T.columns(pre, 3 * H, 4 * H))
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    return T.mul(o, T.tanh(c_new)), c_new


def step_logits(state: DecoderState, y_prev, a: Tensor, p: Mapping[str, Tensor],
                rng: RngStream | None, training: bool, keep_rate: float = 1.0,
                projected: Tensor | None = None):
    """One decoder step; returns ``(state', logits, alpha)``."""
    y_prev = np.asarray(y_prev, dtype=np.int64).reshape(-1)
    alpha, context = attend(state.h1, a, p, projected)
    glimpse = T.concat([context, alpha], axis=-1)
    z0 = T.dropout(glimpse, keep_rate, rng, training)
    h0, c0 = lstm_cell(z0, state.h0, state.c0, p, "lstm0")
    z1 = T.dropout(h0, keep_rate, rng, training)
    h1, c1 = lstm_cell(z1, state.h1, state.c1, p, "lstm1")
    word = T.embedding(p["embed.weight"], y_prev)
    deep = T.add(T.add(T.matmul(h1, p["out.w_hidden"]), T.matmul(word, p["out.w_embed"])),
                 T.add(T.matmul(glimpse, p["out.w_context"]), p["out.bias"]))
    logits = T.add(T.matmul(deep, p["out.w_logits"]), p["out.b_logits"])
    return DecoderState(h0, c0, h1, c1), logits, alpha


def step(state: DecoderState, y_prev, features, params: CaptionerParams,
         rng: RngStream | None = None, training: bool = False, keep_rate: float = 1.0):
    """Public single step: returns ``(state', y_dist, alpha)`` as a DecoderState and arrays."""
    cfg = params.config
    y = np.asarray(y_prev).reshape(-1)
    if np.any(y < 0) or np.any(y >= cfg.vocab_size):
        raise ValueError(f"token id {y_prev} outside [0, {cfg.vocab_size})")
    a = Tensor(_as_batch(features, cfg, params.dtype))
    with T.no_grad():
        state, logits, alpha = step_logits(state, y, a, params.constants(), rng, training, keep_rate)
    return state, T.softmax(logits).data, alpha.data


def pad_targets(targets: Sequence[Sequence[int]]) -> np.ndarray:
    if not targets:
        raise ValueError("no targets")
    longest = max(len(t) for t in targets)
    out = np.full((len(targets), longest), PAD_ID, dtype=np.int64)
    for row, t in enumerate(targets):
        if len(t) < 2:
            raise ValueError("empty target sentence")
        if t[0] != SOT_ID or t[-1] != EOT_ID:
            raise ValueError("target must start with SOT and end with EOT")
        out[row, :len(t)] = t
    return out


def batch_loss(features, targets: np.ndarray, p: Mapping[str, Tensor], config: ModelConfig,
               rng: RngStream | None = None, training: bool = False,
               keep_rate: float = 1.0) -> Tensor:
    """Mean over the batch of each sentence's length-normalised negative log-likelihood.

    ``targets`` is a padded ``(B, T)`` id array (see :func:`pad_targets`). The
    length of a sentence counts every predicted token up to and including
    EOT; SOT and PAD are not counted.
    """
    dtype = p["embed.weight"].dtype
    a = Tensor(_as_batch(features, config, dtype))
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets < 0) or np.any(targets >= config.vocab_size):
        raise ValueError(f"target ids outside [0, {config.vocab_size})")
    batch = targets.shape[0]
    inputs, gold = targets[:, :-1], targets[:, 1:]
    mask = gold != PAD_ID
    lengths = mask.sum(axis=1)
    if np.any(lengths == 0):
        raise ValueError("empty target sentence")
    weights = (-mask.astype(np.float64) / lengths[:, None] / batch).astype(dtype)

    state = initial_state(batch, config.hidden, dtype)
    projected = project_features(a, p)
    loss = None
    for t in range(gold.shape[1]):
        state, logits, _ = step_logits(state, inputs[:, t], a, p, rng, training, keep_rate, projected)
        term = T.total(T.mul(T.pick(T.log_softmax(logits), gold[:, t]), weights[:, t]))
        loss = term if loss is None else T.add(loss, term)
    return loss


def sequence_loss(features, target: Sequence[int], params: CaptionerParams,
                  rng: RngStream | None = None, training: bool = False,
                  keep_rate: float = 1.0) -> float:
    """Length-normalised cross-entropy of one sentence (teacher forced)."""
    if len(target) == 0:
        raise ValueError("empty target sentence")
    with T.no_grad():
        loss = batch_loss(features, pad_targets([target]), params.constants(), params.config,
                          rng, training, keep_rate)
    return loss.item()


def decode_greedy(features, params: CaptionerParams, max_len: int = DEFAULT_MAX_LEN):
    """Greedy decoding of one feature map or a batch of them.

    Returns ``(token ids, attention trace)`` per input: ids exclude SOT and
    end with EOT when EOT was produced; the trace holds one attention row
    per emitted token.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    cfg = params.config
    raw = np.asarray(features)
    single = raw.ndim == 2
    a = Tensor(_as_batch(raw, cfg, params.dtype))
    batch = a.shape[0]
    p = params.constants()
    tokens = np.zeros((batch, max_len), dtype=np.int64)
    alphas = np.zeros((batch, max_len, cfg.regions), dtype=np.float64)
    lengths = np.full(batch, max_len)
    done = np.zeros(batch, dtype=bool)
    y = np.full(batch, SOT_ID, dtype=np.int64)
    with T.no_grad():
        state = initial_state(batch, cfg.hidden, params.dtype)
        projected = project_features(a, p)
        for t in range(max_len):
            state, logits, alpha = step_logits(state, y, a, p, None, False, 1.0, projected)
            y = np.argmax(logits.data, axis=-1)
            tokens[:, t] = y
            alphas[:, t] = alpha.data
            finished = (y == EOT_ID) & ~done
            lengths[finished] = t + 1
            done |= finished
            if done.all():
                break
    results = [(tokens[b, :lengths[b]].tolist(), alphas[b, :lengths[b]]) for b in range(batch)]
    return results[0] if single else results
