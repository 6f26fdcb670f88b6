"""Embedding stores and the six retrieval strategies.

Candidates are always ordered by descending score with ties broken by
ascending candidate id, so every ranking is total and reproducible.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from hybridret.corpus import Corpus, Sample
from hybridret.encoder import (
    CODE_MAX_LEN,
    NL_MAX_LEN,
    Checkpoint,
    code_tokens,
    encode_ids,
    encode_remix,
    forward_batch,
    nl_words,
)

SINGLE = ("NL2Code", "NL2NL", "Code2Code")
HYBRID = ("Remix", "Concat", "Weight")
STRATEGIES = SINGLE + HYBRID


class RetrievalError(ValueError):
    pass


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise RetrievalError("dimension mismatch")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise RetrievalError("cosine of a zero vector")
    return float(a @ b / (na * nb))


def cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise RetrievalError("cosine of a zero vector")
    return (A @ B.T) / np.outer(na, nb)


@dataclass
class EmbeddingStore:
    ids: list[str]
    problem_ids: list[str]
    languages: list[str]
    code: np.ndarray
    nl: np.ndarray
    fingerprint: str = ""
    corpus_sha256: str = ""
    _pos: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = len(self.ids)
        if not (len(self.problem_ids) == len(self.languages) == n == len(self.code) == len(self.nl)):
            raise RetrievalError("store columns have inconsistent lengths")
        self.code = np.asarray(self.code, dtype=float).reshape(n, -1)
        self.nl = np.asarray(self.nl, dtype=float).reshape(n, -1)
        self._pos = {sid: i for i, sid in enumerate(self.ids)}
        if len(self._pos) != n:
            raise RetrievalError("duplicate ids in store")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.code.shape[1]

    def index(self, sample_id: str) -> int:
        try:
            return self._pos[sample_id]
        except KeyError:
            raise RetrievalError(f"unknown sample id {sample_id!r}") from None

    def language_set(self) -> list[str]:
        return sorted(set(self.languages))

    def pool(self, language: str) -> np.ndarray:
        """Store indices of ``language``, sorted by ascending sample id."""
        idx = [i for i, lang in enumerate(self.languages) if lang == language]
        return np.array(sorted(idx, key=lambda i: self.ids[i]), dtype=np.int64)

    # --- file format ---

    def to_bytes(self) -> bytes:
        chunks = [b"UCRE", struct.pack("<III", 1, self.d, len(self))]
        for i in range(len(self)):
            for text, fmt in ((self.ids[i], "<H"), (self.problem_ids[i], "<H"), (self.languages[i], "<B")):
                raw = text.encode("utf-8")
                chunks.append(struct.pack(fmt, len(raw)))
                chunks.append(raw)
            chunks.append(np.asarray(self.code[i], dtype="<f4").tobytes())
            chunks.append(np.asarray(self.nl[i], dtype="<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "EmbeddingStore":
        if buf[:4] != b"UCRE":
            raise RetrievalError("not an embedding store (bad magic)")
        version, d, count = struct.unpack_from("<III", buf, 4)
        if version != 1:
            raise RetrievalError(f"unsupported store version {version}")
        off = 16
        ids, pids, langs = [], [], []
        code = np.empty((count, d))
        nl = np.empty((count, d))
        for i in range(count):
            for target, fmt, width in ((ids, "<H", 2), (pids, "<H", 2), (langs, "<B", 1)):
                (length,) = struct.unpack_from(fmt, buf, off)
                off += width
                target.append(buf[off : off + length].decode("utf-8"))
                off += length
            code[i] = np.frombuffer(buf, dtype="<f4", count=d, offset=off)
            off += 4 * d
            nl[i] = np.frombuffer(buf, dtype="<f4", count=d, offset=off)
            off += 4 * d
        if off != len(buf):
            raise RetrievalError("trailing bytes in store")
        return cls(ids, pids, langs, code, nl)

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        meta = {"encoder_fingerprint": self.fingerprint, "corpus_sha256": self.corpus_sha256}
        meta_path(path).write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EmbeddingStore":
        path = Path(path)
        store = cls.from_bytes(path.read_bytes())
        mp = meta_path(path)
        if mp.exists():
            meta = json.loads(mp.read_text())
            store.fingerprint = meta.get("encoder_fingerprint", "")
            store.corpus_sha256 = meta.get("corpus_sha256", "")
        return store

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "problem_id", "language"]
                       + [f"code_{j}" for j in range(self.d)] + [f"nl_{j}" for j in range(self.d)])
            for i in range(len(self)):
                w.writerow([self.ids[i], self.problem_ids[i], self.languages[i]]
                           + [repr(float(x)) for x in self.code[i]] + [repr(float(x)) for x in self.nl[i]])


def meta_path(store_path: Path) -> Path:
    return store_path.with_name(store_path.name + ".meta.json")


def _check_checkpoint(ckpt: Checkpoint) -> None:
    q = ckpt.state.query
    if q.vocab_size != len(ckpt.vocab) or ckpt.state.key.E.shape != q.E.shape:
        raise RetrievalError("checkpoint vocabulary and parameter shapes disagree")


def _embed_rows(ckpt: Checkpoint, rows: list[np.ndarray], chunk: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(rows), chunk):
        e, _ = forward_batch(ckpt.state.query, np.stack(rows[start : start + chunk]))
        out.append(e)
    return np.vstack(out) if out else np.zeros((0, ckpt.d))


def embed_corpus(ckpt: Checkpoint, corpus: Corpus) -> EmbeddingStore:
    _check_checkpoint(ckpt)
    vocab = ckpt.vocab
    code_rows = [encode_ids(code_tokens(s.code, s.language), vocab, CODE_MAX_LEN).ids for s in corpus]
    nl_rows = [encode_ids(nl_words(s.nl), vocab, NL_MAX_LEN).ids for s in corpus]
    return EmbeddingStore(
        ids=[s.id for s in corpus],
        problem_ids=[s.problem_id for s in corpus],
        languages=[s.language for s in corpus],
        code=_embed_rows(ckpt, code_rows),
        nl=_embed_rows(ckpt, nl_rows),
        fingerprint=ckpt.fingerprint(),
        corpus_sha256=corpus.fingerprint(),
    )


def remix_vectors(ckpt: Checkpoint, samples: Sequence[Sample]) -> np.ndarray:
    """Query-encoder embedding of each sample's NL followed by its code."""
    _check_checkpoint(ckpt)
    vocab = ckpt.vocab
    rows = []
    for s in samples:
        nl = encode_ids(nl_words(s.nl), vocab, NL_MAX_LEN)
        code = encode_ids(code_tokens(s.code, s.language), vocab, CODE_MAX_LEN)
        rows.append(encode_remix(nl, code, CODE_MAX_LEN).ids)
    return _embed_rows(ckpt, rows)


@dataclass(frozen=True)
class Scenario:
    query_language: str
    target_language: str
    strategy: str
    alpha: float = 0.5

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise RetrievalError(f"unknown strategy {self.strategy!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise RetrievalError("alpha must be in [0, 1]")

    @property
    def label(self) -> str:
        return f"Weight({self.alpha:g})" if self.strategy == "Weight" else self.strategy


@dataclass
class RankedList:
    query_id: str
    ids: list[str]
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def scenario_scores(
    store: EmbeddingStore,
    scenario: Scenario,
    query_idx: np.ndarray,
    pool_idx: np.ndarray,
    remix: Optional[np.ndarray] = None,
) -> np.ndarray:
    """(queries x pool) similarity matrix for ``scenario``.

    ``remix`` holds Remix query vectors aligned with ``query_idx``.
    """
    T = store.code[pool_idx]
    s = scenario.strategy
    if s == "NL2Code":
        return cosine_matrix(store.nl[query_idx], T)
    if s == "NL2NL":
        return cosine_matrix(store.nl[query_idx], store.nl[pool_idx])
    if s == "Code2Code":
        return cosine_matrix(store.code[query_idx], T)
    if s == "Weight":
        a = scenario.alpha
        return a * cosine_matrix(store.nl[query_idx], T) + (1.0 - a) * cosine_matrix(store.code[query_idx], T)
    if s == "Concat":
        Qn, Qc = store.nl[query_idx], store.code[query_idx]
        num = Qn @ T.T + Qc @ T.T
        q_norm = np.sqrt(np.einsum("ij,ij->i", Qn, Qn) + np.einsum("ij,ij->i", Qc, Qc))
        t_norm = np.sqrt(2.0 * np.einsum("ij,ij->i", T, T))
        return num / np.outer(q_norm, t_norm)
    if s == "Remix":
        if remix is None:
            raise RetrievalError("Remix needs query vectors re-encoded by a checkpoint")
        return cosine_matrix(np.atleast_2d(remix), T)
    raise RetrievalError(f"unknown strategy {s!r}")


def candidate_pool(store: EmbeddingStore, scenario: Scenario, query_id: str) -> np.ndarray:
    qi = store.index(query_id)
    if store.languages[qi] != scenario.query_language:
        raise RetrievalError(
            f"query {query_id!r} is {store.languages[qi]}, scenario expects {scenario.query_language}"
        )
    pool = store.pool(scenario.target_language)
    pool = pool[pool != qi]
    if pool.size == 0:
        raise RetrievalError("empty candidate pool")
    return pool


TIE_DECIMALS = 12


def ranking_order(scores: np.ndarray) -> np.ndarray:
    """Descending-score order of an id-sorted pool.

    Scores are snapped to ``TIE_DECIMALS`` for the sort so that ties which only differ by
    rounding noise still fall back to id order.
    """
    return np.argsort(-np.round(scores, TIE_DECIMALS), kind="stable")


def rank(store: EmbeddingStore, query_id: str, pool: np.ndarray, scores: np.ndarray) -> RankedList:
    order = ranking_order(scores)
    return RankedList(query_id, [store.ids[i] for i in pool[order]], scores[order])


def _retrieve(store, scenario, query_id, remix=None) -> RankedList:
    pool = candidate_pool(store, scenario, query_id)
    qi = np.array([store.index(query_id)])
    scores = scenario_scores(store, scenario, qi, pool, remix)[0]
    return rank(store, query_id, pool, scores)


def retrieve_single(kind: str, query_id: str, scenario: Scenario, store: EmbeddingStore) -> RankedList:
    if kind not in SINGLE:
        raise RetrievalError(f"{kind!r} is not a single-modal strategy")
    sc = Scenario(scenario.query_language, scenario.target_language, kind)
    return _retrieve(store, sc, query_id)


def retrieve_remix(
    query_id: str, scenario: Scenario, store: EmbeddingStore, ckpt: Checkpoint, corpus: Corpus
) -> RankedList:
    sample = corpus.by_id.get(query_id)
    if sample is None:
        raise RetrievalError(f"query {query_id!r} not in corpus")
    sc = Scenario(scenario.query_language, scenario.target_language, "Remix")
    return _retrieve(store, sc, query_id, remix_vectors(ckpt, [sample]))


def retrieve_concat(query_id: str, scenario: Scenario, store: EmbeddingStore) -> RankedList:
    sc = Scenario(scenario.query_language, scenario.target_language, "Concat")
    return _retrieve(store, sc, query_id)


def retrieve_weight(query_id: str, scenario: Scenario, store: EmbeddingStore, alpha: float) -> RankedList:
    sc = Scenario(scenario.query_language, scenario.target_language, "Weight", alpha)
    return _retrieve(store, sc, query_id)
