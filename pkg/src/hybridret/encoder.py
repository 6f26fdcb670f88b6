"""Mean-pool + two-layer projection encoder with hand-written gradients.

Forward pass for one id sequence::

    p = mean(E[id] for real ids)
    h = tanh(W1 @ p + b1)
    z = W2 @ h + b2
    e = z / ||z||

Everything runs in float64; checkpoints are written as float32.
"""

from __future__ import annotations

import hashlib
import re
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence, Union

import numpy as np

from hybridret.codetok import MASK, TokenSeq, tokenize_code

PAD_ID, UNK_ID, MASK_ID = 0, 1, 2
RESERVED = ("[PAD]", "[UNK]", MASK)
# Remix separator: occupies a position but is masked out of the mean pool like
# padding. A bag-of-tokens encoder gains nothing from a trainable separator row.
SEP_ID = PAD_ID

CODE_MAX_LEN = 256
NL_MAX_LEN = 128
PARAM_NAMES = ("E", "W1", "b1", "W2", "b2")


class EncoderError(ValueError):
    pass


class Vocab:
    def __init__(self, itos: Sequence[str]):
        if tuple(itos[:3]) != RESERVED:
            raise EncoderError("vocab must start with the reserved tokens")
        self.itos = list(itos)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise EncoderError("duplicate vocab entries")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)


_NL_PIECE = re.compile(r"\w+|[^\w\s]+")


def nl_words(text: str) -> list[str]:
    """Lowercased word/punctuation pieces; a literal ``[MASK]`` stays whole."""
    out: list[str] = []
    for chunk in text.split():
        if chunk == MASK:
            out.append(MASK)
        else:
            out.extend(_NL_PIECE.findall(chunk.lower()))
    return out


def code_tokens(code: str, language: str) -> list[str]:
    return tokenize_code(code, language, strict=False).content()


def build_vocab(corpus, max_vocab: int = 8192) -> Vocab:
    if max_vocab < 4:
        raise EncoderError("max_vocab must be >= 4")
    if len(corpus) == 0:
        raise EncoderError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for s in corpus:
        counts.update(code_tokens(s.code, s.language))
        counts.update(nl_words(s.nl))
        if s.comment:
            counts.update(nl_words(s.comment))
    for r in RESERVED:
        counts.pop(r, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(list(RESERVED) + [t for t, _ in ranked[: max_vocab - len(RESERVED)]])


class IdSeq(NamedTuple):
    ids: np.ndarray
    real: int

    @property
    def empty(self) -> bool:
        return self.real == 0


def encode_ids(seq: Union[TokenSeq, Iterable[str]], vocab: Vocab, max_len: int) -> IdSeq:
    """Map content tokens to ids, truncate to ``max_len`` and right-pad."""
    if max_len < 1:
        raise EncoderError("max_len must be >= 1")
    toks = seq.content() if isinstance(seq, TokenSeq) else list(seq)
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    real = [vocab.lookup(t) for t in toks[:max_len]]
    ids[: len(real)] = real
    return IdSeq(ids, len(real))


def encode_remix(nl: IdSeq, code: IdSeq, max_len: int = CODE_MAX_LEN) -> IdSeq:
    """NL ids, then the separator, then as many code ids as fit."""
    parts = [nl.ids[: nl.real], [SEP_ID], code.ids[: code.real]]
    merged = np.concatenate([np.asarray(p, dtype=np.int64) for p in parts])[:max_len]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[: len(merged)] = merged
    return IdSeq(ids, int(np.count_nonzero(merged != PAD_ID)))


@dataclass
class EncoderParams:
    E: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def d(self) -> int:
        return self.E.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.E.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.E, self.W1, self.b1, self.W2, self.b2]

    def items(self):
        return zip(PARAM_NAMES, self.arrays())

    def copy(self) -> "EncoderParams":
        return EncoderParams(*(a.copy() for a in self.arrays()))

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def equals(self, other: "EncoderParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def init_params(d: int, vocab: Union[Vocab, int], seed: int) -> EncoderParams:
    """All entries i.i.d. uniform(-0.05, 0.05) except the biases, which start at zero."""
    V = vocab if isinstance(vocab, int) else len(vocab)
    rng = np.random.default_rng(seed)
    u = lambda *shape: rng.uniform(-0.05, 0.05, size=shape)  # noqa: E731
    E = u(V, d)
    W1 = u(d, d)
    W2 = u(d, d)
    return EncoderParams(E, W1, np.zeros(d), W2, np.zeros(d))


class Cache(NamedTuple):
    pool: np.ndarray  # (n, V) mean-pooling weights
    P: np.ndarray
    H: np.ndarray
    norms: np.ndarray
    out: np.ndarray


def _as_matrix(ids) -> np.ndarray:
    if isinstance(ids, IdSeq):
        return ids.ids[None, :]
    if isinstance(ids, (list, tuple)) and ids and isinstance(ids[0], IdSeq):
        return np.stack([s.ids for s in ids])
    a = np.asarray(ids, dtype=np.int64)
    return a[None, :] if a.ndim == 1 else a


def forward_batch(params: EncoderParams, ids) -> tuple[np.ndarray, Cache]:
    """Encode a batch of id rows; returns (n, d) unit embeddings and the cache."""
    mat = _as_matrix(ids)
    n = mat.shape[0]
    real = mat != PAD_ID
    counts = real.sum(axis=1)
    if np.any(counts == 0):
        raise EncoderError(f"empty sequence at batch row {int(np.argmin(counts))}")
    if mat.max(initial=0) >= params.vocab_size:
        raise EncoderError("token id out of vocabulary range")
    pool = np.zeros((n, params.vocab_size))
    rows, cols = np.nonzero(real)
    np.add.at(pool, (rows, mat[rows, cols]), 1.0 / counts[rows])
    P = pool @ params.E
    H = np.tanh(P @ params.W1.T + params.b1)
    Z = H @ params.W2.T + params.b2
    norms = np.sqrt(np.einsum("ij,ij->i", Z, Z))
    if np.any(norms < 1e-12):
        raise EncoderError("degenerate projection: ||z|| < 1e-12")
    out = Z / norms[:, None]
    return out, Cache(pool, P, H, norms, out)


def forward(params: EncoderParams, ids: IdSeq) -> tuple[np.ndarray, Cache]:
    out, cache = forward_batch(params, ids)
    return out[0], cache


def backward(params: EncoderParams, cache: Cache, grad_output: np.ndarray) -> EncoderParams:
    """Gradients of sum_i <grad_output_i, e_i> w.r.t. every parameter.

    The embedding-table gradient is dense, with nonzero rows only where a
    token was pooled; :func:`touched_rows` recovers those rows.
    """
    G = np.atleast_2d(grad_output)
    e = cache.out
    radial = np.einsum("ij,ij->i", e, G)
    gZ = (G - e * radial[:, None]) / cache.norms[:, None]
    gW2 = gZ.T @ cache.H
    gb2 = gZ.sum(axis=0)
    gA = (gZ @ params.W2) * (1.0 - cache.H**2)
    gW1 = gA.T @ cache.P
    gb1 = gA.sum(axis=0)
    gP = gA @ params.W1
    gE = cache.pool.T @ gP
    return EncoderParams(gE, gW1, gb1, gW2, gb2)


def touched_rows(cache: Cache) -> np.ndarray:
    return np.flatnonzero(cache.pool.any(axis=0))


@dataclass
class EncoderState:
    query: EncoderParams
    key: EncoderParams
    m: float = 0.999

    @classmethod
    def fresh(cls, params: EncoderParams, m: float = 0.999) -> "EncoderState":
        return cls(params, params.copy(), m)


def momentum_update(state: EncoderState) -> EncoderState:
    """theta_k <- m * theta_k + (1 - m) * theta_q.

    Written as k + (1 - m)(q - k) so that k == q stays bitwise fixed; m == 0
    copies the query exactly.
    """
    m = state.m
    if m == 0.0:
        return EncoderState(state.query, state.query.copy(), m)
    key = EncoderParams(
        *(k + (1.0 - m) * (q - k) for k, q in zip(state.key.arrays(), state.query.arrays()))
    )
    return EncoderState(state.query, key, m)


# --- checkpoint file --------------------------------------------------------

MAGIC = b"UCRM"
VERSION = 1


@dataclass
class Checkpoint:
    vocab: Vocab
    state: EncoderState

    @property
    def d(self) -> int:
        return self.state.query.d

    def to_bytes(self) -> bytes:
        q = self.state.query
        chunks = [MAGIC, struct.pack("<IIIf", VERSION, len(self.vocab), q.d, self.state.m)]
        for tok in self.vocab.itos:
            raw = tok.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw)))
            chunks.append(raw)
        for params in (self.state.query, self.state.key):
            for a in params.arrays():
                chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
        return b"".join(chunks)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise EncoderError("not a checkpoint file (bad magic)")
        version, V, d, m = struct.unpack_from("<IIIf", buf, 4)
        if version != VERSION:
            raise EncoderError(f"unsupported checkpoint version {version}")
        off = 20
        itos = []
        for _ in range(V):
            (length,) = struct.unpack_from("<I", buf, off)
            off += 4
            itos.append(buf[off : off + length].decode("utf-8"))
            off += length
        shapes = [(V, d), (d, d), (d,), (d, d), (d,)]
        both = []
        for _ in range(2):
            arrays = []
            for shape in shapes:
                count = int(np.prod(shape))
                a = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
                arrays.append(a.astype(np.float64).reshape(shape))
                off += 4 * count
            both.append(EncoderParams(*arrays))
        if off != len(buf):
            raise EncoderError("trailing bytes in checkpoint")
        return cls(Vocab(itos), EncoderState(both[0], both[1], float(m)))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
