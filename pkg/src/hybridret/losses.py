"""Contrastive and distribution-alignment objectives with exact gradients.

All gradients are taken with respect to the query-side embeddings only; key
views and queue entries are constants.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping, Optional, Sequence

import numpy as np

DEFAULT_SIGMAS = (0.6, 1.2, 2.4)


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07
    sigmas: tuple[float, ...] = DEFAULT_SIGMAS
    nl2code_bidirectional: bool = True

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise LossError("temperature must be positive")
        if not self.sigmas or any(not s > 0 for s in self.sigmas):
            raise LossError("sigmas must be a nonempty set of positive bandwidths")


@dataclass
class LossReport:
    l_code2code: float = 0.0
    l_nl2nl: float = 0.0
    l_nl2code: float = 0.0
    l_mpcl: float = 0.0
    l_local: float = 0.0
    l_global: float = 0.0
    l_rpcl: float = 0.0
    l_total: float = 0.0

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def values(self) -> list[float]:
        return [getattr(self, c) for c in self.columns()]

    def finalize(self) -> "LossReport":
        self.l_mpcl = self.l_code2code + self.l_nl2nl + self.l_nl2code
        self.l_rpcl = self.l_local + self.l_global
        self.l_total = total_loss(self.l_mpcl, self.l_rpcl)
        return self


def total_loss(l_mpcl: float, l_rpcl: float) -> float:
    return l_mpcl + l_rpcl


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def _check_unit(*vectors: np.ndarray, tol: float = 1e-4) -> None:
    for v in vectors:
        norms = np.linalg.norm(np.atleast_2d(v), axis=1)
        if norms.size and np.max(np.abs(norms - 1.0)) > tol:
            raise LossError("inputs must be unit vectors")


def info_nce(
    q: np.ndarray, k_pos: np.ndarray, negs: Optional[np.ndarray], tau: float
) -> tuple[float, np.ndarray]:
    """InfoNCE for one positive pair; returns the loss and its gradient w.r.t. ``q``."""
    q = np.asarray(q, dtype=float)
    k_pos = np.asarray(k_pos, dtype=float)
    negs = np.zeros((0, q.shape[0])) if negs is None else np.atleast_2d(np.asarray(negs, dtype=float))
    if negs.size == 0:
        negs = negs.reshape(0, q.shape[0])
    if k_pos.shape != q.shape or negs.shape[1] != q.shape[0]:
        raise LossError("dimension mismatch")
    _check_unit(q, k_pos, negs)
    keys = np.vstack([k_pos[None, :], negs])
    logits = keys @ q / tau
    lse = _logsumexp(logits)
    loss = lse - logits[0]
    w = np.exp(logits - lse)
    w[0] -= 1.0
    return float(loss), (w @ keys) / tau


def _pair_losses(
    q: np.ndarray, positives: np.ndarray, negatives: np.ndarray, tau: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-positive losses for one anchor and the summed gradient w.r.t. the anchor.

    Uses loss_j = softplus(lse(neg logits) - pos_logit_j), so the negative
    log-sum-exp is shared by all positives of the anchor.
    """
    if negatives.shape[0] == 0:
        return np.zeros(positives.shape[0]), np.zeros_like(q)
    s_pos = positives @ q / tau
    s_neg = negatives @ q / tau
    neg_lse = _logsumexp(s_neg)
    grad_lse = (np.exp(s_neg - neg_lse) @ negatives) / tau
    x = neg_lse - s_pos
    losses = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    grad = sig.sum() * grad_lse - (sig @ positives) / tau
    return losses, grad


def perspective_loss(
    anchors: Sequence[tuple[np.ndarray, str, np.ndarray]],
    negatives: Sequence[tuple[np.ndarray, Optional[str]]],
    tau: float,
) -> tuple[float, list[np.ndarray]]:
    """Mean InfoNCE over every (anchor, positive) pair.

    ``anchors`` holds ``(query_vector, problem_id, positive_keys)``; ``negatives``
    holds ``(key_vector, problem_id)`` with ``None`` for unlabelled queue entries.
    Labelled negatives sharing the anchor's problem id are skipped.
    """
    if not anchors:
        raise LossError("no anchors")
    d = anchors[0][0].shape[0]
    neg_vecs = np.array([v for v, _ in negatives]).reshape(-1, d)
    neg_pids = [p for _, p in negatives]
    total, n_pairs, grads = 0.0, 0, []
    for q, pid, pos in anchors:
        pos = np.atleast_2d(pos)
        if pos.shape[0] == 0:
            raise LossError(f"anchor of problem {pid!r} has no positives")
        keep = np.array([p is None or p != pid for p in neg_pids], dtype=bool)
        losses, g = _pair_losses(q, pos, neg_vecs[keep] if keep.size else neg_vecs, tau)
        total += losses.sum()
        n_pairs += losses.size
        grads.append(g)
    return total / n_pairs, [g / n_pairs for g in grads]


CODE_ITEMS = ("code1", "code2", "code1*", "code2*")
NL_ITEMS = ("nl1", "nl2", "nl1*", "nl2*")
ANCHORS = ("code1", "code2", "nl1", "nl2")


@dataclass
class BatchViews:
    """Embeddings for one batch of tuples.

    ``query`` holds (B, d) arrays for the anchor items, ``key`` holds (B, d)
    arrays for all eight items.
    """

    problem_ids: Sequence[str]
    query: Mapping[str, np.ndarray]
    key: Mapping[str, np.ndarray]


def _direction(
    views: BatchViews,
    anchor_pos: Mapping[str, Sequence[str]],
    pool_items: Sequence[str],
    queue: np.ndarray,
    queue_pids: Optional[np.ndarray],
    tau: float,
) -> tuple[float, dict[str, np.ndarray]]:
    pids = np.asarray(views.problem_ids)
    B = len(pids)
    pool = np.vstack([views.key[it] for it in pool_items])
    pool_pids = np.tile(pids, len(pool_items))
    total, n_pairs = 0.0, 0
    grads = {a: np.zeros_like(views.query[a]) for a in anchor_pos}
    for i in range(B):
        q_negs = queue if queue_pids is None else queue[queue_pids != pids[i]]
        negs = np.vstack([pool[pool_pids != pids[i]], q_negs])
        for a, pos_items in anchor_pos.items():
            pos = np.vstack([views.key[p][i] for p in pos_items])
            losses, g = _pair_losses(views.query[a][i], pos, negs, tau)
            total += losses.sum()
            n_pairs += losses.size
            grads[a][i] = g
    for g in grads.values():
        g /= n_pairs
    return total / n_pairs, grads


@dataclass
class MpclResult:
    l_code2code: float
    l_nl2nl: float
    l_nl2code: float
    grads: dict[str, np.ndarray]

    @property
    def l_mpcl(self) -> float:
        return self.l_code2code + self.l_nl2nl + self.l_nl2code


def mpcl(
    views: BatchViews,
    queue_code: np.ndarray,
    queue_nl: np.ndarray,
    cfg: LossConfig,
    *,
    intra: bool = True,
    queue_code_pids: Optional[Sequence[str]] = None,
    queue_nl_pids: Optional[Sequence[str]] = None,
) -> MpclResult:
    """Sum of the code-code, NL-NL and NL-code contrastive terms.

    ``queue_code`` / ``queue_nl`` are the pooled queue contents used as extra
    negatives for code-target and NL-target directions. When problem ids for
    the queue rows are given, rows of the anchor's own problem are skipped,
    exactly like in-batch keys. With ``intra=False`` the two within-modality
    terms are skipped and reported as zero.
    """
    for item in CODE_ITEMS + NL_ITEMS:
        if item not in views.key:
            raise LossError(f"batch views missing key view {item!r}")
    for item in ANCHORS:
        if item not in views.query:
            raise LossError(f"batch views missing query view {item!r}")
    d = views.key["code1"].shape[1]
    queue_code = np.asarray(queue_code, dtype=float).reshape(-1, d)
    queue_nl = np.asarray(queue_nl, dtype=float).reshape(-1, d)
    qc_pids = None if queue_code_pids is None else np.asarray(queue_code_pids)
    qn_pids = None if queue_nl_pids is None else np.asarray(queue_nl_pids)
    tau = cfg.temperature
    grads = {a: np.zeros_like(views.query[a]) for a in ANCHORS}

    def add(g: dict[str, np.ndarray], scale: float = 1.0) -> None:
        for k, v in g.items():
            grads[k] += scale * v

    l_c2c = l_n2n = 0.0
    if intra:
        l_c2c, g = _direction(
            views,
            {"code1": ("code1*", "code2", "code2*"), "code2": ("code2*", "code1", "code1*")},
            CODE_ITEMS,
            queue_code,
            qc_pids,
            tau,
        )
        add(g)
        l_n2n, g = _direction(
            views,
            {"nl1": ("nl1*", "nl2", "nl2*"), "nl2": ("nl2*", "nl1", "nl1*")},
            NL_ITEMS,
            queue_nl,
            qn_pids,
            tau,
        )
        add(g)
    l_n2c, g = _direction(
        views, {"nl1": CODE_ITEMS, "nl2": CODE_ITEMS}, CODE_ITEMS, queue_code, qc_pids, tau
    )
    if cfg.nl2code_bidirectional:
        l_c2n, g2 = _direction(
            views, {"code1": NL_ITEMS, "code2": NL_ITEMS}, NL_ITEMS, queue_nl, qn_pids, tau
        )
        l_n2c = 0.5 * (l_n2c + l_c2n)
        add(g, 0.5)
        add(g2, 0.5)
    else:
        add(g)
    return MpclResult(l_c2c, l_n2n, l_n2c, grads)


def multiscale_kernel(x: np.ndarray, y: np.ndarray, sigmas: Sequence[float] = DEFAULT_SIGMAS) -> float:
    sq = float(np.sum((np.asarray(x, dtype=float) - np.asarray(y, dtype=float)) ** 2))
    return float(np.mean([np.exp(-sq / (2.0 * s * s)) for s in sigmas]))


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", A, A)[:, None] + np.einsum("ij,ij->i", B, B)[None, :] - 2.0 * (A @ B.T)
    return np.maximum(sq, 0.0)


def _kernel_terms(A: np.ndarray, B: np.ndarray, sigmas: Sequence[float]):
    sq = _sq_dists(A, B)
    K = np.zeros_like(sq)
    W = np.zeros_like(sq)
    for s in sigmas:
        e = np.exp(-sq / (2.0 * s * s))
        K += e
        W += e / (s * s)
    return K / len(sigmas), W / len(sigmas)


def _pull(A: np.ndarray, B: np.ndarray, W: np.ndarray) -> np.ndarray:
    # sum_j W_ij (a_i - b_j)
    return A * W.sum(axis=1)[:, None] - W @ B


def mmd2_biased(
    X: np.ndarray, Y: np.ndarray, sigmas: Sequence[float] = DEFAULT_SIGMAS
) -> tuple[float, np.ndarray, np.ndarray]:
    """V-statistic MMD^2 with the multi-scale Gaussian kernel, plus gradients."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] == 0 or Y.shape[0] == 0 or X.size == 0 or Y.size == 0:
        raise LossError("MMD needs two nonempty sets")
    if X.shape[1] != Y.shape[1]:
        raise LossError("dimension mismatch")
    n, m = X.shape[0], Y.shape[0]
    Kxx, Wxx = _kernel_terms(X, X, sigmas)
    Kyy, Wyy = _kernel_terms(Y, Y, sigmas)
    Kxy, Wxy = _kernel_terms(X, Y, sigmas)
    value = Kxx.mean() + Kyy.mean() - 2.0 * Kxy.mean()
    gX = -2.0 / n**2 * _pull(X, X, Wxx) + 2.0 / (n * m) * _pull(X, Y, Wxy)
    gY = -2.0 / m**2 * _pull(Y, Y, Wyy) + 2.0 / (n * m) * _pull(Y, X, Wxy.T)
    return max(float(value), 0.0), gX, gY


@dataclass
class RpclResult:
    l_local: float
    l_global: float
    grad_code1: np.ndarray
    grad_code2: np.ndarray

    @property
    def l_rpcl(self) -> float:
        return self.l_local + self.l_global


def _mmd_to_fixed(X: np.ndarray, Y: np.ndarray, kyy_mean: float, sigmas: Sequence[float]):
    """MMD^2(X, Y) and its gradient w.r.t. X, reusing a precomputed mean k(y, y')."""
    n, m = X.shape[0], Y.shape[0]
    Kxx, Wxx = _kernel_terms(X, X, sigmas)
    Kxy, Wxy = _kernel_terms(X, Y, sigmas)
    value = Kxx.mean() + kyy_mean - 2.0 * Kxy.mean()
    gX = -2.0 / n**2 * _pull(X, X, Wxx) + 2.0 / (n * m) * _pull(X, Y, Wxy)
    return max(float(value), 0.0), gX


def rpcl(
    code1: np.ndarray,
    code2: np.ndarray,
    queue_code: Optional[np.ndarray],
    sigmas: Sequence[float] = DEFAULT_SIGMAS,
) -> RpclResult:
    """Batch-level MMD between the two code sets plus MMD of each against the queue."""
    l_local, g1, g2 = mmd2_biased(code1, code2, sigmas)
    l_global = 0.0
    if queue_code is not None and len(queue_code):
        Q = np.atleast_2d(np.asarray(queue_code, dtype=float))
        kqq = _kernel_terms(Q, Q, sigmas)[0].mean()
        a, ga = _mmd_to_fixed(np.atleast_2d(code1), Q, kqq, sigmas)
        b, gb = _mmd_to_fixed(np.atleast_2d(code2), Q, kqq, sigmas)
        l_global = a + b
        g1 = g1 + ga
        g2 = g2 + gb
    return RpclResult(l_local, l_global, g1, g2)
