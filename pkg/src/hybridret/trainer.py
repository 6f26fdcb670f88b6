"""Momentum-contrast training loop: batches, queues, AdamW and the train step."""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from hybridret.codetok import AugmentConfig, AugTuple, TokenSeq, augment_tuple, tokenize_code
from hybridret.corpus import Corpus, Sample
from hybridret.encoder import (
    CODE_MAX_LEN,
    NL_MAX_LEN,
    Checkpoint,
    EncoderParams,
    EncoderState,
    backward,
    build_vocab,
    encode_ids,
    forward_batch,
    init_params,
    momentum_update,
    nl_words,
    touched_rows,
    Vocab,
)
from hybridret.losses import (
    ANCHORS,
    CODE_ITEMS,
    NL_ITEMS,
    BatchViews,
    LossConfig,
    LossReport,
    mpcl,
    rpcl,
)
from hybridret.seeding import substream, subseed

log = logging.getLogger(__name__)

ITEMS = CODE_ITEMS + NL_ITEMS


class TrainingError(RuntimeError):
    pass


class BatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_tuples: int = 8
    steps: int = 300
    lr: float = 1e-3
    momentum: float = 0.999
    queue_size: int = 1024
    dim: int = 64
    max_vocab: int = 8192
    weight_decay: float = 0.01
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    disable_mpcl_intra: bool = False
    disable_rpcl: bool = False
    disable_augmentation: bool = False
    queue_exclude_same_problem: bool = False

    def __post_init__(self) -> None:
        if self.batch_tuples < 1:
            raise ValueError("batch_tuples must be >= 1")
        if self.queue_size < self.batch_tuples:
            raise ValueError("queue_size must be >= batch_tuples")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must be in [0, 1]")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        if self.dim < 1 or self.max_vocab < 1:
            raise ValueError("dim and max_vocab must be >= 1")


# --- queues -----------------------------------------------------------------


class EmbeddingQueue:
    """Fixed-capacity FIFO of embedding rows (plus their problem ids) on a ring buffer."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf = np.zeros((capacity, dim))
        self._labels = np.empty(capacity, dtype=object)
        self._head = 0  # next write slot
        self._len = 0

    def __len__(self) -> int:
        return self._len

    def enqueue(self, rows: np.ndarray, labels: Optional[Sequence[str]] = None) -> None:
        rows = np.atleast_2d(rows)
        labels = [None] * rows.shape[0] if labels is None else list(labels)
        if len(labels) != rows.shape[0]:
            raise ValueError("one label per row")
        for r, lab in zip(rows[-self.capacity :], labels[-self.capacity :]):
            self._buf[self._head] = r
            self._labels[self._head] = lab
            self._head = (self._head + 1) % self.capacity
        self._len = min(self._len + rows.shape[0], self.capacity)

    def _order(self) -> np.ndarray:
        if self._len < self.capacity:
            return np.arange(self._len)
        return (np.arange(self.capacity) + self._head) % self.capacity

    def contents(self) -> np.ndarray:
        """Rows from oldest to newest."""
        return self._buf[self._order()]

    def labels(self) -> np.ndarray:
        return self._labels[self._order()]


@dataclass
class QueueSet:
    code: EmbeddingQueue
    code_star: EmbeddingQueue
    nl: EmbeddingQueue
    nl_star: EmbeddingQueue

    @classmethod
    def empty(cls, capacity: int, dim: int) -> "QueueSet":
        return cls(*(EmbeddingQueue(capacity, dim) for _ in range(4)))

    def code_negatives(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.vstack([self.code.contents(), self.code_star.contents()]),
                np.concatenate([self.code.labels(), self.code_star.labels()]))

    def nl_negatives(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.vstack([self.nl.contents(), self.nl_star.contents()]),
                np.concatenate([self.nl.labels(), self.nl_star.labels()]))

    def push(self, key: dict[str, np.ndarray], problem_ids: Sequence[str]) -> None:
        """Enqueue the eight key views of a batch, evicting the oldest rows."""
        labels = list(problem_ids) * 2
        self.code.enqueue(np.vstack([key["code1"], key["code2"]]), labels)
        self.code_star.enqueue(np.vstack([key["code1*"], key["code2*"]]), labels)
        self.nl.enqueue(np.vstack([key["nl1"], key["nl2"]]), labels)
        self.nl_star.enqueue(np.vstack([key["nl1*"], key["nl2*"]]), labels)


# --- batches ----------------------------------------------------------------


def sample_language_pair(languages: Sequence[str], rng: np.random.Generator) -> tuple[str, str]:
    langs = sorted(set(languages))
    if not langs:
        raise BatchError("no languages to sample from")
    if len(langs) == 1:
        log.warning("single-language corpus: training in intra-language mode (%s)", langs[0])
        return langs[0], langs[0]
    pairs = list(itertools.combinations(langs, 2))
    return pairs[int(rng.integers(len(pairs)))]


@dataclass
class Batch:
    problem_ids: list[str]
    tuples: list[tuple[Sample, Sample]]
    ids: dict[str, np.ndarray]  # item -> (B, CODE_MAX_LEN) id matrix


class TokenCache:
    """Lexes each sample once; lexing is the slowest part of batch assembly."""

    def __init__(self) -> None:
        self._seqs: dict[str, TokenSeq] = {}

    def get(self, s: Sample) -> TokenSeq:
        seq = self._seqs.get(s.id)
        if seq is None:
            seq = self._seqs[s.id] = tokenize_code(s.code, s.language, strict=False)
        return seq


def _ids_row(tokens, vocab: Vocab, max_len: int) -> np.ndarray:
    row = np.zeros(CODE_MAX_LEN, dtype=np.int64)
    row[:max_len] = encode_ids(tokens, vocab, max_len).ids
    return row


def build_batch(
    corpus: Corpus,
    pair: tuple[str, str],
    B: int,
    rng: np.random.Generator,
    augment_cfg: Optional[AugmentConfig],
    vocab: Vocab,
    cache: Optional[TokenCache] = None,
) -> Batch:
    """Sample B distinct problems with code in both languages of ``pair``.

    ``augment_cfg=None`` disables augmentation (the starred views equal the originals).
    """
    cache = cache or TokenCache()
    lang_a, lang_b = pair
    by_lang: dict[str, dict[str, list[Sample]]] = {lang_a: {}, lang_b: {}}
    for s in corpus:
        if s.language in by_lang:
            by_lang[s.language].setdefault(s.problem_id, []).append(s)
    eligible = sorted(set(by_lang[lang_a]) & set(by_lang[lang_b]))
    if lang_a == lang_b:
        eligible = [p for p in eligible if by_lang[lang_a][p]]
    if len(eligible) < B:
        raise BatchError(
            f"only {len(eligible)} problems have code in both {lang_a} and {lang_b}; "
            f"need {B} (deficit {B - len(eligible)})"
        )
    chosen = [eligible[i] for i in rng.choice(len(eligible), size=B, replace=False)]
    rows: dict[str, list[np.ndarray]] = {it: [] for it in ITEMS}
    tuples = []
    for pid in chosen:
        pool_a, pool_b = by_lang[lang_a][pid], by_lang[lang_b][pid]
        s1 = pool_a[int(rng.integers(len(pool_a)))]
        s2 = pool_b[int(rng.integers(len(pool_b)))]
        tuples.append((s1, s2))
        d = AugTuple(cache.get(s1), cache.get(s2), s1.nl, s2.nl, s1.comment, s2.comment)
        aug_seed = int(rng.integers(2**31 - 1))
        d_star = d if augment_cfg is None else augment_tuple(d, augment_cfg, aug_seed)
        for name, member in (("code1", d.code1), ("code2", d.code2), ("code1*", d_star.code1), ("code2*", d_star.code2)):
            rows[name].append(_ids_row(member, vocab, CODE_MAX_LEN))
        for name, text in (("nl1", d.nl1), ("nl2", d.nl2), ("nl1*", d_star.nl1), ("nl2*", d_star.nl2)):
            rows[name].append(_ids_row(nl_words(text), vocab, NL_MAX_LEN))
    ids = {k: np.stack(v) for k, v in rows.items()}
    for k, mat in ids.items():
        if np.any((mat != 0).sum(axis=1) == 0):
            raise BatchError(f"empty {k} sequence in batch (problem ids {chosen})")
    return Batch(chosen, tuples, ids)


# --- optimizer --------------------------------------------------------------


class AdamW:
    """AdamW with decoupled weight decay on matrices and lazily-updated embedding rows."""

    NO_DECAY = ("b1", "b2")

    def __init__(self, params: EncoderParams, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(a) for k, a in params.items()}
        self.v = {k: np.zeros_like(a) for k, a in params.items()}
        self.t = 0

    def step(self, params: EncoderParams, grads: EncoderParams, rows: np.ndarray, lr: float) -> EncoderParams:
        """Update ``params`` in place; ``rows`` are the embedding rows touched this step."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for (name, p), g in zip(params.items(), grads.arrays()):
            m, v = self.m[name], self.v[name]
            if name == "E":
                idx = rows
                p_sel, g_sel = p[idx], g[idx]
                p_sel -= lr * self.weight_decay * p_sel
                m[idx] = self.beta1 * m[idx] + (1.0 - self.beta1) * g_sel
                v[idx] = self.beta2 * v[idx] + (1.0 - self.beta2) * g_sel * g_sel
                p_sel -= lr * (m[idx] / bc1) / (np.sqrt(v[idx] / bc2) + self.eps)
                p[idx] = p_sel
                continue
            if name not in self.NO_DECAY:
                p -= lr * self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return params


def optimizer_update(params: EncoderParams, grads: EncoderParams, opt: AdamW, lr: float,
                     rows: Optional[np.ndarray] = None) -> EncoderParams:
    if rows is None:
        rows = np.flatnonzero(np.any(grads.E != 0, axis=1))
    return opt.step(params, grads, rows, lr)


# --- the step ---------------------------------------------------------------


def key_views(key_params: EncoderParams, batch: Batch) -> dict[str, np.ndarray]:
    B = len(batch.problem_ids)
    out, _ = forward_batch(key_params, np.vstack([batch.ids[it] for it in ITEMS]))
    return {it: out[j * B : (j + 1) * B] for j, it in enumerate(ITEMS)}


@dataclass
class StepResult:
    report: LossReport
    grads: EncoderParams
    rows: np.ndarray


def objective(
    params: EncoderParams,
    batch: Batch,
    keys: dict[str, np.ndarray],
    queues: QueueSet,
    cfg: TrainConfig,
) -> StepResult:
    """Total loss and its gradient w.r.t. the query parameters, keys held fixed."""
    B = len(batch.problem_ids)
    q_out, cache = forward_batch(params, np.vstack([batch.ids[a] for a in ANCHORS]))
    query = {a: q_out[j * B : (j + 1) * B] for j, a in enumerate(ANCHORS)}
    views = BatchViews(batch.problem_ids, query, keys)
    report = LossReport()
    g_out = {a: np.zeros_like(query[a]) for a in ANCHORS}

    qc, qc_pids = queues.code_negatives()
    qn, qn_pids = queues.nl_negatives()
    if not cfg.queue_exclude_same_problem:
        qc_pids = qn_pids = None
    res = mpcl(views, qc, qn, cfg.loss, intra=not cfg.disable_mpcl_intra,
               queue_code_pids=qc_pids, queue_nl_pids=qn_pids)
    report.l_code2code, report.l_nl2nl, report.l_nl2code = res.l_code2code, res.l_nl2nl, res.l_nl2code
    for a in ANCHORS:
        g_out[a] += res.grads[a]

    if not cfg.disable_rpcl:
        r = rpcl(query["code1"], query["code2"], queues.code.contents(), cfg.loss.sigmas)
        report.l_local, report.l_global = r.l_local, r.l_global
        g_out["code1"] += r.grad_code1
        g_out["code2"] += r.grad_code2
    report.finalize()

    G = np.vstack([g_out[a] for a in ANCHORS])
    grads = backward(params, cache, G)
    return StepResult(report, grads, touched_rows(cache))


class Trainer:
    """Owns every piece of mutable training state; one writer only."""

    def __init__(self, cfg: TrainConfig, vocab: Vocab, params: Optional[EncoderParams] = None):
        self.cfg = cfg
        self.vocab = vocab
        if params is None:
            params = init_params(cfg.dim, vocab, subseed(cfg.seed, "init"))
        self.state = EncoderState.fresh(params, cfg.momentum)
        self.opt = AdamW(params, weight_decay=cfg.weight_decay)
        self.queues = QueueSet.empty(cfg.queue_size, params.d)
        self.step_no = 0

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.vocab, self.state)

    def train_step(self, batch: Batch) -> LossReport:
        self.step_no += 1
        keys = key_views(self.state.key, batch)
        res = objective(self.state.query, batch, keys, self.queues, self.cfg)
        self._check_finite(res)
        optimizer_update(self.state.query, res.grads, self.opt, self.cfg.lr, res.rows)
        self.state = momentum_update(self.state)
        self.queues.push(keys, batch.problem_ids)
        return res.report

    def _check_finite(self, res: StepResult) -> None:
        bad = [c for c, v in zip(LossReport.columns(), res.report.values()) if not math.isfinite(v)]
        grad_ok = all(np.all(np.isfinite(a)) for a in res.grads.arrays())
        if bad or not grad_ok:
            gmax = max(float(np.nanmax(np.abs(a))) if a.size else 0.0 for a in res.grads.arrays())
            component = bad[0] if bad else "gradients"
            raise TrainingError(
                f"non-finite loss at step {self.step_no}: component {component}, max |grad| {gmax:.3g}"
            )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    reports: list[LossReport]
    manifest: dict


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["loss"]["sigmas"] = list(cfg.loss.sigmas)
    return d


def train(cfg: TrainConfig, corpus: Corpus, on_step=None) -> TrainResult:
    """Run ``cfg.steps`` train steps on ``corpus``; returns checkpoint, log and manifest."""
    t0 = time.perf_counter()
    vocab = build_vocab(corpus, cfg.max_vocab)
    trainer = Trainer(cfg, vocab)
    languages = sorted(corpus.languages)
    cache = TokenCache()
    augment = None if cfg.disable_augmentation else cfg.augment
    reports = []
    for t in range(1, cfg.steps + 1):
        rng = substream(cfg.seed, f"step/{t}")
        pair = sample_language_pair(languages, rng)
        batch = build_batch(corpus, pair, cfg.batch_tuples, rng, augment, vocab, cache)
        report = trainer.train_step(batch)
        reports.append(report)
        if on_step is not None:
            on_step(t, report)
    ckpt = trainer.checkpoint()
    manifest = {
        "config": config_dict(cfg),
        "corpus_sha256": corpus.fingerprint(),
        "corpus_samples": len(corpus),
        "vocab_size": len(vocab),
        "n_params": trainer.state.query.n_params(),
        "checkpoint_sha256": ckpt.fingerprint(),
        "wall_clock_s": round(time.perf_counter() - t0, 3),
        "final_losses": asdict(reports[-1]) if reports else None,
    }
    return TrainResult(ckpt, reports, manifest)
