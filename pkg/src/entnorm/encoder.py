"""Character-level Siamese encoder: stacked bidirectional LSTM + dense output.

The two Siamese towers share one parameter set, so a name's embedding is a
plain function of the string.  Gradients are computed by hand with reverse
accumulation; :func:`numerical_gradient` is the independent check.

Parameters live in an ordered ``dict`` of float64 arrays:

* ``emb``            ``(V, E)`` character embedding table
* ``lstm{l}.W``      ``(2, in, 4H)`` input weights, index 0 forward, 1 backward
* ``lstm{l}.U``      ``(2, H, 4H)`` recurrent weights
* ``lstm{l}.b``      ``(2, 4H)`` biases
* ``dense.W``        ``(2H, out)`` and ``dense.b`` ``(out,)``

Gate blocks along the ``4H`` axis are ordered input, forget, output, candidate.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from typing import BinaryIO, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import _lstm_kernels as _k
from .losses import contrastive_loss, contrastive_loss_grad, pairwise_cosine
from .refset import ReferenceSet

Params = Dict[str, np.ndarray]

UNK = "�"
POOLING_MODES = ("last", "mean")

MODEL_MAGIC = b"NSE1"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Checkpoint bytes are truncated, malformed, or from another version."""


class IntegrityError(ModelFormatError):
    """Checkpoint checksum does not match its contents."""


@dataclass(frozen=True)
class EncoderConfig:
    char_embed_dim: int = 32
    hidden_dim: int = 64
    num_recurrent_layers: int = 4
    output_dim: int = 128
    max_sequence_length: int = 128
    pooling: str = "last"

    def __post_init__(self) -> None:
        for key in ("char_embed_dim", "hidden_dim", "num_recurrent_layers", "output_dim", "max_sequence_length"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}")


class CharVocab:
    """Dense character index; index 0 is the unknown token.

    Known characters take indices ``1..V-1`` in code-point order.
    """

    def __init__(self, chars: Iterable[str], max_sequence_length: int) -> None:
        chars = sorted(set(chars) - {UNK})
        if any(len(c) != 1 for c in chars):
            raise ValueError("vocabulary entries must be single characters")
        self.chars: Tuple[str, ...] = tuple(chars)
        self.max_sequence_length = int(max_sequence_length)
        self.unk_index = 0
        self._index = {c: i for i, c in enumerate(self.chars, start=1)}

    def __len__(self) -> int:
        return len(self.chars) + 1

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CharVocab):
            return NotImplemented
        return self.chars == other.chars and self.max_sequence_length == other.max_sequence_length

    def index(self, char: str) -> int:
        return self._index.get(char, self.unk_index)

    def truncate(self, name: str) -> str:
        return name[: self.max_sequence_length]

    def encode(self, name: str) -> List[int]:
        return [self._index.get(c, 0) for c in self.truncate(name)]


def build_vocab(refset: ReferenceSet, max_len: int) -> CharVocab:
    chars = set()
    for _, name in refset.name_pairs():
        chars.update(name)
    return CharVocab(chars, max_len)


@dataclass(eq=False)
class EncoderModel:
    config: EncoderConfig
    vocab: CharVocab
    params: Params

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EncoderModel):
            return NotImplemented
        return (
            self.config == other.config
            and self.vocab == other.vocab
            and list(self.params) == list(other.params)
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
        )

    def embed(self, names: Sequence[str], batch_size: int = 256) -> np.ndarray:
        return embed_names(self.params, self.config, self.vocab, names, batch_size)

    def embed_one(self, name: str) -> np.ndarray:
        return forward(self.params, self.vocab, name, self.config)

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.config, self.vocab, {k: v.copy() for k, v in self.params.items()})


# --------------------------------------------------------------------------
# parameters

def param_shapes(config: EncoderConfig, vocab_size: int) -> Dict[str, Tuple[int, ...]]:
    H = config.hidden_dim
    shapes: Dict[str, Tuple[int, ...]] = {"emb": (vocab_size, config.char_embed_dim)}
    in_dim = config.char_embed_dim
    for layer in range(config.num_recurrent_layers):
        shapes[f"lstm{layer}.W"] = (2, in_dim, 4 * H)
        shapes[f"lstm{layer}.U"] = (2, H, 4 * H)
        shapes[f"lstm{layer}.b"] = (2, 4 * H)
        in_dim = 2 * H
    shapes["dense.W"] = (2 * H, config.output_dim)
    shapes["dense.b"] = (config.output_dim,)
    return shapes


def parameter_count(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


def init_bound(name: str, shape: Tuple[int, ...]) -> float:
    """Glorot-uniform bound for the matrix (per direction) behind ``name``."""
    fan_in, fan_out = shape[-2], shape[-1]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(config: EncoderConfig, vocab: CharVocab, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    H = config.hidden_dim
    params: Params = {}
    for name, shape in param_shapes(config, len(vocab)).items():
        if name.endswith(".b"):
            bias = np.zeros(shape)
            if name.startswith("lstm"):
                bias[..., H:2 * H] = 1.0  # forget gate
            params[name] = bias
        else:
            bound = init_bound(name, shape)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


# --------------------------------------------------------------------------
# forward / backward

class Batch:
    """Names encoded for one pass: time-major indices, rows sorted by length.

    ``order[k]`` is the caller's position of sorted row ``k``.
    """

    def __init__(self, vocab: CharVocab, names: Sequence[str]) -> None:
        seqs = [vocab.encode(n) for n in names]
        for name, seq in zip(names, seqs):
            if not seq:
                raise ValueError(f"cannot encode empty name {name!r}")
        lengths = np.array([len(q) for q in seqs], dtype=np.int64)
        self.order = np.argsort(-lengths, kind="stable")
        self.lengths = lengths[self.order]
        T = int(self.lengths[0])
        B = len(seqs)
        self.idx = np.zeros((T, B), dtype=np.int64)
        for k, row in enumerate(self.order):
            self.idx[: self.lengths[k], k] = seqs[row]
        # rows still inside their sequence at each time step (a prefix)
        self.active = (self.lengths[None, :] > np.arange(T)[:, None]).sum(axis=1).astype(np.int64)
        self.mask = (np.arange(T)[:, None] < self.lengths[None, :]).astype(np.float64)[:, :, None]
        # flat (t, b) positions inside a sequence; dense products skip the padding
        self.valid = np.flatnonzero(self.mask.ravel())

    @property
    def shape(self) -> Tuple[int, int]:
        return self.idx.shape


def _lstm_forward(W, U, b, X, batch: Batch):
    T, B, I = X.shape
    H = U.shape[1]
    Y = np.zeros((T, B, 2 * H))
    Xv = X.reshape(T * B, I)[batch.valid]
    caches = []
    for d in (0, 1):
        # padded entries of these buffers are never read
        xp = np.empty((T * B, 4 * H))
        xp[batch.valid] = Xv @ W[d] + b[d]
        xp = xp.reshape(T, B, 4 * H)
        gates = np.empty((T, B, 4 * H))
        tanh_c = np.empty((T, B, H))
        h_prev = np.empty((T, B, H))
        c_prev = np.empty((T, B, H))
        out = np.zeros((T, B, H))
        _k.direction_forward(xp, U[d], batch.active, d == 1, gates, tanh_c, h_prev, c_prev, out)
        Y[..., d * H:(d + 1) * H] = out
        caches.append((gates, tanh_c, h_prev, c_prev))
    return Y, (W, U, X, caches)


def _lstm_backward(dY, cache, batch: Batch):
    W, U, X, caches = cache
    T, B, I = X.shape
    H = U.shape[1]
    Xv = X.reshape(T * B, I)[batch.valid]
    dXv = np.zeros((len(batch.valid), I))
    dW = np.empty_like(W)
    dU = np.empty_like(U)
    db = np.empty((2, 4 * H))
    for d in (0, 1):
        gates, tanh_c, h_prev, c_prev = caches[d]
        dz = np.empty((T, B, 4 * H))
        dout = np.ascontiguousarray(dY[..., d * H:(d + 1) * H])
        _k.direction_backward(dout, U[d], batch.active, d == 1, gates, tanh_c, c_prev, dz)
        dzv = dz.reshape(T * B, 4 * H)[batch.valid]
        dW[d] = Xv.T @ dzv
        dU[d] = h_prev.reshape(T * B, H)[batch.valid].T @ dzv
        db[d] = dzv.sum(axis=0)
        dXv += dzv @ W[d].T
    dX = np.zeros((T * B, I))
    dX[batch.valid] = dXv
    return dX.reshape(T, B, I), dW, dU, db


def _forward_batch(params: Params, config: EncoderConfig, batch: Batch, keep_cache: bool = False):
    """Embeddings in sorted-row order, plus the cache for :func:`_backward_batch`."""
    X = params["emb"][batch.idx]
    caches = []
    for layer in range(config.num_recurrent_layers):
        X, cache = _lstm_forward(
            params[f"lstm{layer}.W"], params[f"lstm{layer}.U"], params[f"lstm{layer}.b"], X, batch
        )
        if keep_cache:
            caches.append(cache)
    H = config.hidden_dim
    rows = np.arange(X.shape[1])
    if config.pooling == "last":
        # forward state at the last character, backward state at the first
        pooled = np.concatenate([X[batch.lengths - 1, rows, :H], X[0, :, H:]], axis=-1)
    else:
        pooled = X.sum(axis=0) / batch.lengths[:, None]
    out = pooled @ params["dense.W"] + params["dense.b"]
    if not keep_cache:
        return out, None
    return out, (X.shape, caches, pooled)


def _backward_batch(params: Params, config: EncoderConfig, batch: Batch, cache, d_out: np.ndarray) -> Params:
    top_shape, caches, pooled = cache
    grads: Params = {}
    grads["dense.W"] = pooled.T @ d_out
    grads["dense.b"] = d_out.sum(axis=0)
    d_pooled = d_out @ params["dense.W"].T
    H = config.hidden_dim
    if config.pooling == "last":
        dY = np.zeros(top_shape)
        rows = np.arange(top_shape[1])
        dY[batch.lengths - 1, rows, :H] = d_pooled[:, :H]
        dY[0, :, H:] += d_pooled[:, H:]
    else:
        dY = batch.mask * (d_pooled / batch.lengths[:, None])[None, :, :]
    for layer in range(config.num_recurrent_layers - 1, -1, -1):
        dY, dW, dU, db = _lstm_backward(dY, caches[layer], batch)
        grads[f"lstm{layer}.W"] = dW
        grads[f"lstm{layer}.U"] = dU
        grads[f"lstm{layer}.b"] = db
    d_emb = np.zeros_like(params["emb"])
    np.add.at(d_emb, batch.idx.ravel(), dY.reshape(-1, dY.shape[-1]))
    grads["emb"] = d_emb
    return {k: grads[k] for k in params}


def embed_names(params: Params, config: EncoderConfig, vocab: CharVocab, names: Sequence[str], batch_size: int = 256) -> np.ndarray:
    """Embed many names; rows follow ``names``."""
    out = np.empty((len(names), config.output_dim))
    for start in range(0, len(names), batch_size):
        chunk = names[start:start + batch_size]
        batch = Batch(vocab, chunk)
        emb, _ = _forward_batch(params, config, batch)
        out[start + batch.order] = emb
    return out


def _config_from_params(params: Params) -> EncoderConfig:
    layers = sum(1 for k in params if k.endswith(".U"))
    H = params["lstm0.U"].shape[1]
    return EncoderConfig(
        char_embed_dim=params["emb"].shape[1],
        hidden_dim=H,
        num_recurrent_layers=layers,
        output_dim=params["dense.b"].shape[0],
    )


def forward(params: Params, vocab: CharVocab, name: str, config: Optional[EncoderConfig] = None) -> np.ndarray:
    """Embedding of one name (truncated to the vocabulary's maximum length)."""
    if config is None:
        config = _config_from_params(params)
    out, _ = _forward_batch(params, config, Batch(vocab, [name]))
    return out[0]


def pair_batch_loss_and_grad(
    params: Params,
    config: EncoderConfig,
    vocab: CharVocab,
    names_a: Sequence[str],
    names_b: Sequence[str],
    labels: np.ndarray,
    margin: float,
    with_grad: bool = True,
):
    """Mean contrastive loss over pairs and its exact gradient.

    Each distinct string is encoded once per call; gradients from every
    pair (and from both towers) accumulate into the shared parameters.
    Returns ``(mean_loss, grads or None, per_pair_loss, per_pair_delta)``.
    """
    labels = np.asarray(labels, dtype=np.float64)
    uniq: Dict[str, int] = {}
    for n in list(names_a) + list(names_b):
        uniq.setdefault(n, len(uniq))
    batch = Batch(vocab, list(uniq))
    # positions of each pair member among the length-sorted rows
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[batch.order] = np.arange(len(uniq))
    ia = rank[np.fromiter((uniq[n] for n in names_a), dtype=np.int64, count=len(names_a))]
    ib = rank[np.fromiter((uniq[n] for n in names_b), dtype=np.int64, count=len(names_b))]
    emb, cache = _forward_batch(params, config, batch, keep_cache=with_grad)
    delta, ga, gb = pairwise_cosine(emb[ia], emb[ib])
    losses = contrastive_loss(delta, labels, margin)
    P = len(labels)
    mean_loss = float(losses.sum() / P)
    if not with_grad:
        return mean_loss, None, losses, delta
    dl = contrastive_loss_grad(delta, labels, margin) / P
    d_emb = np.zeros_like(emb)
    np.add.at(d_emb, ia, dl[:, None] * ga)
    np.add.at(d_emb, ib, dl[:, None] * gb)
    grads = _backward_batch(params, config, batch, cache, d_emb)
    return mean_loss, grads, losses, delta


def _pair_fields(pair) -> Tuple[str, str, float]:
    if isinstance(pair, tuple):
        return pair[0], pair[1], float(pair[2])
    return pair.name_a, pair.name_b, float(pair.y)


def backward(params: Params, vocab: CharVocab, pair, margin: float = 1.0, config: Optional[EncoderConfig] = None) -> Tuple[Params, float]:
    """Gradient of one pair's contrastive loss, plus the loss value.

    ``pair`` is a :class:`~entnorm.pairs.TrainingPair` or ``(a, b, y)``.
    """
    if config is None:
        config = _config_from_params(params)
    a, b, y = _pair_fields(pair)
    loss, grads, _, _ = pair_batch_loss_and_grad(params, config, vocab, [a], [b], np.array([y]), margin)
    return grads, loss


def pair_loss(params: Params, vocab: CharVocab, pair, margin: float = 1.0, config: Optional[EncoderConfig] = None) -> float:
    if config is None:
        config = _config_from_params(params)
    a, b, y = _pair_fields(pair)
    loss, _, _, _ = pair_batch_loss_and_grad(params, config, vocab, [a], [b], np.array([y]), margin, with_grad=False)
    return loss


def numerical_gradient(params: Params, vocab: CharVocab, pair, margin: float = 1.0, epsilon: float = 1e-5,
                       config: Optional[EncoderConfig] = None, loss_fn=None) -> Params:
    """Central-difference estimate of the pair loss gradient, entry by entry.

    ``loss_fn(params)`` overrides the pair loss, which lets the routine be
    checked on a closed-form function.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if loss_fn is None:
        if config is None:
            config = _config_from_params(params)

        def loss_fn(p):
            return pair_loss(p, vocab, pair, margin, config)

    work = {k: v.copy() for k, v in params.items()}
    grads = zeros_like_params(params)
    for key, arr in work.items():
        flat = arr.reshape(-1)
        gflat = grads[key].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            plus = loss_fn(work)
            flat[j] = orig - epsilon
            minus = loss_fn(work)
            flat[j] = orig
            gflat[j] = (plus - minus) / (2.0 * epsilon)
    return grads


# --------------------------------------------------------------------------
# checkpoints

def _header(model: EncoderModel) -> dict:
    return {
        "config": asdict(model.config),
        "vocab": {"chars": list(model.vocab.chars), "max_sequence_length": model.vocab.max_sequence_length},
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
    }


def model_to_bytes(model: EncoderModel) -> bytes:
    header = json.dumps(_header(model), sort_keys=True, ensure_ascii=True).encode("ascii")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<II", MODEL_VERSION, len(header)))
    buf.write(header)
    for arr in model.params.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def model_from_bytes(data: bytes) -> EncoderModel:
    if len(data) < 12 + 32:
        raise ModelFormatError("checkpoint truncated")
    if data[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {data[:4]!r}, expected {MODEL_MAGIC!r}")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported checkpoint version {version}")
    header_end = 12 + header_len
    if header_end > len(data) - 32:
        raise ModelFormatError("checkpoint truncated in header")
    try:
        header = json.loads(data[12:header_end].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt checkpoint header: {exc}") from None
    shapes = [(k, tuple(s)) for k, s in header["params"]]
    expected = header_end + 8 * sum(int(np.prod(s)) for _, s in shapes) + 32
    if len(data) != expected:
        raise ModelFormatError(f"checkpoint is {len(data)} bytes, expected {expected}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch")
    config = EncoderConfig(**header["config"])
    vocab = CharVocab(header["vocab"]["chars"], header["vocab"]["max_sequence_length"])
    params: Params = {}
    offset = header_end
    for key, shape in shapes:
        n = int(np.prod(shape))
        params[key] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
    return EncoderModel(config, vocab, params)


def save_model(model: EncoderModel, stream: BinaryIO) -> str:
    """Write a checkpoint; returns its fingerprint (hex SHA-256 of the bytes)."""
    data = model_to_bytes(model)
    stream.write(data)
    return hashlib.sha256(data).hexdigest()


def load_model(stream: BinaryIO) -> EncoderModel:
    return model_from_bytes(stream.read())


def model_fingerprint(model: EncoderModel) -> str:
    return hashlib.sha256(model_to_bytes(model)).hexdigest()


def new_model(refset: ReferenceSet, config: EncoderConfig = EncoderConfig(), seed: int = 0) -> EncoderModel:
    vocab = build_vocab(refset, config.max_sequence_length)
    return EncoderModel(config, vocab, init_params(config, vocab, seed))
