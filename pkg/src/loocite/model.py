"""Deterministic decoder-only reference transformer.

Pre-norm blocks, learned positional embeddings, output projection tied to
the token embedding.  Everything runs in numpy at 32-bit precision; a model
can be cast to float64 with :meth:`ModelWeights.astype` for numerical
checks.

The normalized next-token distribution covers the 256 byte tokens only.
Special ids (BOS/EOS) and any extra vocabulary rows are masked out of the
softmax, so they can be fed as input but never receive probability mass.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .context import EOS, N_BYTES

MAGIC = b"ABOT1"
LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


class ModelError(ValueError):
    pass


class SequenceTooLong(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    vocab_size: int = 258
    max_seq_len: int = 512

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ModelError(f"{f.name} must be positive")
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if self.vocab_size < N_BYTES + 2:
            raise ModelError("vocab_size must cover 256 bytes plus BOS/EOS")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def param_count(self) -> int:
        d, f = self.d_model, self.d_ff
        per_layer = (2 * d) + (3 * d * d + 3 * d) + (d * d + d) + (2 * d) + (d * f + f) + (f * d + d)
        return self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d


@dataclass
class Layer:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w_qkv: np.ndarray
    b_qkv: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w_1: np.ndarray
    b_1: np.ndarray
    w_2: np.ndarray
    b_2: np.ndarray


LAYER_FIELDS = [f.name for f in fields(Layer)]


@dataclass
class ModelWeights:
    config: ModelConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list[Layer]
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    name: str = "reference"

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in serialization order."""
        out = [self.tok_emb, self.pos_emb]
        for layer in self.layers:
            out.extend(getattr(layer, k) for k in LAYER_FIELDS)
        out.extend([self.lnf_g, self.lnf_b])
        return out

    @property
    def param_count(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    @property
    def dtype(self):
        return self.tok_emb.dtype

    def astype(self, dtype) -> "ModelWeights":
        return _rebuild(self.config, [a.astype(dtype) for a in self.arrays()], self.name)

    def equals(self, other: "ModelWeights") -> bool:
        return self.config == other.config and all(
            a.dtype == b.dtype and np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def _shapes(config: ModelConfig) -> list[tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    layer = [(d,), (d,), (d, 3 * d), (3 * d,), (d, d), (d,), (d,), (d,), (d, f), (f,), (f, d), (d,)]
    return [(config.vocab_size, d), (config.max_seq_len, d)] + layer * config.n_layers + [(d,), (d,)]


def _rebuild(config: ModelConfig, arrays: list[np.ndarray], name: str = "reference") -> ModelWeights:
    it = iter(arrays)
    tok, pos = next(it), next(it)
    layers = [Layer(*[next(it) for _ in LAYER_FIELDS]) for _ in range(config.n_layers)]
    return ModelWeights(config, tok, pos, layers, next(it), next(it), name)


def init_reference_model(config: ModelConfig, seed: int = 0, zero: bool = False,
                         name: str | None = None) -> ModelWeights:
    """Random weights that depend only on ``(config, seed)``.

    ``zero=True`` gives the all-zero model: every logit is equal, so the
    output distribution is uniform over bytes and attention is uniform over
    the visible prefix.
    """
    name = name or f"ref-L{config.n_layers}-d{config.d_model}-s{seed}"
    shapes = _shapes(config)
    if zero:
        return _rebuild(config, [np.zeros(s, np.float32) for s in shapes], name)
    rng = np.random.default_rng(seed)
    d = config.d_model
    arrays = []
    for i, s in enumerate(shapes):
        if i == 0:
            a = rng.normal(0.0, 2.0 / np.sqrt(d), s)
        elif i == 1:
            a = rng.normal(0.0, 0.5, s)
        elif len(s) == 2:
            a = rng.normal(0.0, 1.0 / np.sqrt(s[0]), s)
        else:
            a = rng.normal(0.0, 0.02, s)
        arrays.append(a)
    # layer-norm gains start near one
    d_layer = len(LAYER_FIELDS)
    for l in range(config.n_layers):
        base = 2 + l * d_layer
        for k in (LAYER_FIELDS.index("ln1_g"), LAYER_FIELDS.index("ln2_g")):
            arrays[base + k] = 1.0 + arrays[base + k]
    arrays[-2] = 1.0 + arrays[-2]
    return _rebuild(config, [a.astype(np.float32) for a in arrays], name)


def save_model(weights: ModelWeights, path: str | Path) -> None:
    """Write ``ABOT1`` + six little-endian uint32 config fields + raw float32 arrays."""
    c = weights.config
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<6I", c.n_layers, c.n_heads, c.d_model, c.d_ff,
                             c.vocab_size, c.max_seq_len))
        for a in weights.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_model(path: str | Path, name: str | None = None) -> ModelWeights:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise ModelError(f"{path}: not a model file (bad magic)")
    config = ModelConfig(*struct.unpack_from("<6I", raw, 5))
    offset = 5 + 24
    arrays = []
    for s in _shapes(config):
        n = int(np.prod(s))
        a = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(s)
        arrays.append(a.astype(np.float32))
        offset += 4 * n
    if offset != len(raw):
        raise ModelError(f"{path}: size does not match header")
    return _rebuild(config, arrays, name or Path(path).stem)


# -- forward ---------------------------------------------------------------

def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, xhat, inv


def _gelu(u):
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + 0.044715 * u ** 3)))


def _gelu_grad(u):
    th = np.tanh(_GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def _log_softmax_bytes(logits):
    z = logits[..., :N_BYTES]
    m = z.max(-1, keepdims=True)
    return z - (m + np.log(np.exp(z - m).sum(-1, keepdims=True)))


def _causal_mask(n_new: int, start: int, dtype) -> np.ndarray:
    q = np.arange(start, start + n_new)[:, None]
    k = np.arange(start + n_new)[None, :]
    return np.where(k <= q, 0.0, -np.inf).astype(dtype)


def _check_tokens(w: ModelWeights, tokens: np.ndarray, start: int) -> None:
    if start + len(tokens) > w.config.max_seq_len:
        raise SequenceTooLong(
            f"sequence of {start + len(tokens)} tokens exceeds max_seq_len {w.config.max_seq_len}")
    if len(tokens) and (tokens.min() < 0 or tokens.max() >= w.config.vocab_size):
        raise ModelError("token id out of vocabulary")


def _run(w: ModelWeights, tokens, past_k=None, past_v=None, want_attn=False, x0=None):
    """Forward ``tokens`` after an optional cached prefix.

    Returns final normalized hidden states, new per-layer keys/values (prefix
    included) and, optionally, per-layer attention probabilities.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    start = 0 if past_k is None else past_k[0].shape[1]
    _check_tokens(w, tokens, start)
    c = w.config
    n, h, dh = len(tokens), c.n_heads, c.d_head
    x = w.tok_emb[tokens] + w.pos_emb[start:start + n] if x0 is None else x0
    mask = _causal_mask(n, start, w.dtype)
    scale = w.dtype.type(1.0 / np.sqrt(dh))
    ks, vs, attns = [], [], []
    for l, p in enumerate(w.layers):
        a, _, _ = _layer_norm(x, p.ln1_g, p.ln1_b)
        qkv = a @ p.w_qkv + p.b_qkv
        q, k, v = (qkv[:, i * c.d_model:(i + 1) * c.d_model].reshape(n, h, dh).transpose(1, 0, 2)
                   for i in range(3))
        if past_k is not None:
            k = np.concatenate([past_k[l], k], axis=1)
            v = np.concatenate([past_v[l], v], axis=1)
        ks.append(k)
        vs.append(v)
        probs = _softmax(q @ k.transpose(0, 2, 1) * scale + mask)
        if want_attn:
            attns.append(probs)
        o = (probs @ v).transpose(1, 0, 2).reshape(n, c.d_model)
        x = x + (o @ p.w_o + p.b_o)
        a2, _, _ = _layer_norm(x, p.ln2_g, p.ln2_b)
        x = x + (_gelu(a2 @ p.w_1 + p.b_1) @ p.w_2 + p.b_2)
    hf, _, _ = _layer_norm(x, w.lnf_g, w.lnf_b)
    return hf, ks, vs, attns


def _logprobs(w: ModelWeights, hidden: np.ndarray) -> np.ndarray:
    return _log_softmax_bytes(hidden @ w.tok_emb.T)


def _target_logprob(w: ModelWeights, hidden: np.ndarray, targets: np.ndarray) -> np.ndarray:
    lp = _logprobs(w, hidden)
    t = np.asarray(targets, dtype=np.int64)
    if len(t) and t.max() >= N_BYTES:
        # special tokens carry no probability mass
        out = np.full(len(t), -np.inf, dtype=lp.dtype)
        ok = t < N_BYTES
        out[ok] = lp[np.arange(len(t))[ok], t[ok]]
        return out
    return lp[np.arange(len(t)), t]


def token_logprobs(w: ModelWeights, prefix: Sequence[int], continuation: Sequence[int]) -> np.ndarray:
    """Per-token log-probabilities of ``continuation`` given ``prefix``."""
    prefix, continuation = list(prefix), list(continuation)
    if not continuation:
        raise ModelError("continuation must be non-empty")
    if not prefix:
        raise ModelError("prefix must be non-empty (start prompts with BOS)")
    seq = prefix + continuation
    hf, _, _, _ = _run(w, seq[:-1])
    return _target_logprob(w, hf[len(prefix) - 1:], np.asarray(continuation))


def score_continuation(w: ModelWeights, prefix: Sequence[int], continuation: Sequence[int]) -> float:
    """Total log-probability of ``continuation`` after ``prefix`` (teacher forced)."""
    return float(token_logprobs(w, prefix, continuation).astype(np.float64).sum())


def next_token_distribution(w: ModelWeights, tokens: Sequence[int]) -> np.ndarray:
    """Log-probabilities over the 256 bytes for the token following ``tokens``."""
    hf, _, _, _ = _run(w, list(tokens))
    return _logprobs(w, hf[-1:])[0]


# -- KV sessions -----------------------------------------------------------

@dataclass
class Session:
    """Per-layer key/value cache over a token prefix.

    ``hidden`` keeps the final normalized state of every cached position so
    a continuation can be scored right after any fork point without
    re-feeding a token.
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]
    hidden: np.ndarray
    tokens: tuple[int, ...] = field(default=())

    @property
    def length(self) -> int:
        return len(self.tokens)

    def fork(self, position: int) -> "Session":
        if not 0 <= position <= self.length:
            raise ModelError(f"cannot fork at {position}: {self.length} tokens cached")
        return Session([k[:, :position] for k in self.keys], [v[:, :position] for v in self.values],
                       self.hidden[:position], self.tokens[:position])


def session_create(w: ModelWeights, prefix: Sequence[int]) -> Session:
    empty = Session([np.zeros((w.config.n_heads, 0, w.config.d_head), w.dtype)] * w.config.n_layers,
                    [np.zeros((w.config.n_heads, 0, w.config.d_head), w.dtype)] * w.config.n_layers,
                    np.zeros((0, w.config.d_model), w.dtype))
    return session_extend(w, empty, prefix)


def session_extend(w: ModelWeights, session: Session, tokens: Sequence[int]) -> Session:
    tokens = list(tokens)
    if not tokens:
        return session
    hf, ks, vs, _ = _run(w, tokens, session.keys, session.values)
    return Session(ks, vs, np.concatenate([session.hidden, hf]), session.tokens + tuple(tokens))


def session_score(w: ModelWeights, session: Session, continuation: Sequence[int],
                  tail: Sequence[int] = ()) -> tuple[float, Session]:
    """Score ``continuation`` after the cached prefix plus uncached ``tail``.

    Only ``tail`` and ``continuation`` are run through the model.  Returns
    the total log-probability and the extended session.
    """
    continuation = list(continuation)
    if not continuation:
        raise ModelError("continuation must be non-empty")
    tail = list(tail)
    if session.length + len(tail) == 0:
        raise ModelError("nothing to condition on (start prompts with BOS)")
    fed = tail + continuation
    ext = session_extend(w, session, fed[:-1])
    start = session.length + len(tail) - 1
    lp = _target_logprob(w, ext.hidden[start:start + len(continuation)], np.asarray(continuation))
    return float(lp.astype(np.float64).sum()), ext


# -- introspection ---------------------------------------------------------

def forward_attentions(w: ModelWeights, tokens: Sequence[int]) -> np.ndarray:
    """Attention probabilities, shape ``(layers, heads, n, n)``."""
    _, _, _, attns = _run(w, list(tokens), want_attn=True)
    return np.stack(attns)


def embedding_gradients(w: ModelWeights, tokens: Sequence[int], scored_span: tuple[int, int]) -> np.ndarray:
    """Gradient of the scored span's total log-probability w.r.t. each input embedding.

    Position ``t`` in ``[a, b)`` is scored by the prediction made at ``t - 1``.
    The input embedding of a position is its token plus positional embedding.
    Returns an ``(n, d_model)`` array.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    a, b = scored_span
    if not 1 <= a < b <= len(tokens):
        raise ModelError("scored span must lie inside the sequence and after position 0")
    _check_tokens(w, tokens, 0)
    c = w.config
    n, h, dh, d = len(tokens), c.n_heads, c.d_head, c.d_model
    scale = w.dtype.type(1.0 / np.sqrt(dh))
    mask = _causal_mask(n, 0, w.dtype)

    x = w.tok_emb[tokens] + w.pos_emb[:n]
    tape = []
    for p in w.layers:
        a1, xh1, inv1 = _layer_norm(x, p.ln1_g, p.ln1_b)
        qkv = a1 @ p.w_qkv + p.b_qkv
        q, k, v = (qkv[:, i * d:(i + 1) * d].reshape(n, h, dh).transpose(1, 0, 2) for i in range(3))
        probs = _softmax(q @ k.transpose(0, 2, 1) * scale + mask)
        o = (probs @ v).transpose(1, 0, 2).reshape(n, d)
        x1 = x + (o @ p.w_o + p.b_o)
        a2, xh2, inv2 = _layer_norm(x1, p.ln2_g, p.ln2_b)
        u = a2 @ p.w_1 + p.b_1
        x = x1 + (_gelu(u) @ p.w_2 + p.b_2)
        tape.append((a1, xh1, inv1, q, k, v, probs, o, a2, xh2, inv2, u))
    hf, xhf, invf = _layer_norm(x, w.lnf_g, w.lnf_b)

    logits = hf @ w.tok_emb.T
    dlogits = np.zeros_like(logits)
    rows = np.arange(a - 1, b - 1)
    lp = _log_softmax_bytes(logits[rows])
    dl = -np.exp(lp)
    dl[np.arange(len(rows)), tokens[a:b]] += 1.0
    dlogits[rows, :N_BYTES] = dl
    dx = _ln_backward(dlogits @ w.tok_emb, xhf, invf, w.lnf_g)

    for p, (a1, xh1, inv1, q, k, v, probs, o, a2, xh2, inv2, u) in zip(reversed(w.layers), reversed(tape)):
        dg = (dx @ p.w_2.T) * _gelu_grad(u)
        dx1 = dx + _ln_backward(dg @ p.w_1.T, xh2, inv2, p.ln2_g)
        do = (dx1 @ p.w_o.T).reshape(n, h, dh).transpose(1, 0, 2)
        dp = do @ v.transpose(0, 2, 1)
        dv = probs.transpose(0, 2, 1) @ do
        ds = probs * (dp - (dp * probs).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        dqkv = np.concatenate([t.transpose(1, 0, 2).reshape(n, d) for t in (dq, dk, dv)], axis=1)
        dx = dx1 + _ln_backward(dqkv @ p.w_qkv.T, xh1, inv1, p.ln1_g)
    return dx


def _ln_backward(dy, xhat, inv, g):
    dxh = dy * g
    return inv * (dxh - dxh.mean(-1, keepdims=True) - xhat * (dxh * xhat).mean(-1, keepdims=True))


def input_embeddings(w: ModelWeights, tokens: Sequence[int]) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    return w.tok_emb[tokens] + w.pos_emb[:len(tokens)]


def span_logprob_from_embeddings(w: ModelWeights, x0: np.ndarray, tokens: Sequence[int],
                                 scored_span: tuple[int, int]) -> float:
    """Scored-span log-probability with explicit input embeddings (finite-difference helper)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    a, b = scored_span
    hf, _, _, _ = _run(w, tokens, x0=x0)
    return float(_target_logprob(w, hf[a - 1:b - 1], tokens[a:b]).sum())


# -- decoding --------------------------------------------------------------

def greedy_generate(w: ModelWeights, prompt: Sequence[int], max_new: int) -> list[int]:
    """Argmax decoding; ties go to the lowest id; stops at EOS or ``max_new``."""
    prompt = list(prompt)
    if not prompt:
        raise ModelError("prompt must be non-empty")
    if len(prompt) + max_new > w.config.max_seq_len:
        raise SequenceTooLong("prompt plus max_new exceeds max_seq_len")
    out: list[int] = []
    if max_new == 0:
        return out
    session = session_create(w, prompt)
    while len(out) < max_new:
        nxt = int(np.argmax(_logprobs(w, session.hidden[-1:])[0]))
        if nxt == EOS:
            break
        out.append(nxt)
        if len(out) < max_new:
            session = session_extend(w, session, [nxt])
    return out


def mean_embedding(w: ModelWeights, tokens: Sequence[int]) -> np.ndarray:
    """Mean input token embedding (no positions); zero vector for no tokens."""
    tokens = np.asarray(list(tokens), dtype=np.int64)
    if len(tokens) == 0:
        return np.zeros(w.config.d_model, dtype=w.dtype)
    return w.tok_emb[tokens].mean(0)
