"""MRR/MAP, scenario evaluation, alpha grid search and significance testing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from hybridret.corpus import Corpus
from hybridret.encoder import Checkpoint
from hybridret.retrieval import (
    EmbeddingStore,
    RankedList,
    RetrievalError,
    Scenario,
    rank,
    ranking_order,
    remix_vectors,
    scenario_scores,
)
from hybridret.seeding import substream


class MetricsError(ValueError):
    pass


def _relevant_positions(ranked: RankedList | Sequence[str], relevant: Iterable[str]) -> np.ndarray:
    ids = ranked.ids if isinstance(ranked, RankedList) else list(ranked)
    rel = set(relevant)
    pos = np.array([k for k, c in enumerate(ids, 1) if c in rel], dtype=np.int64)
    if pos.size == 0:
        raise MetricsError("no relevant candidate in the ranked pool")
    return pos


def reciprocal_rank(ranked: RankedList | Sequence[str], relevant: Iterable[str]) -> float:
    return 1.0 / float(_relevant_positions(ranked, relevant)[0])


def average_precision(ranked: RankedList | Sequence[str], relevant: Iterable[str]) -> float:
    pos = _relevant_positions(ranked, relevant)
    hits = np.arange(1, pos.size + 1)
    # with one relevant item this is exactly 1/r, bit for bit
    return float(np.sum(hits / pos)) / pos.size


@dataclass
class EvalResult:
    scenario: Scenario
    query_ids: list[str]
    rr: np.ndarray
    ap: np.ndarray
    n_excluded: int = 0

    @property
    def n_queries(self) -> int:
        return len(self.query_ids)

    @property
    def mrr(self) -> float:
        return float(np.mean(self.rr))

    @property
    def map(self) -> float:
        return float(np.mean(self.ap))


def _ranks_from_scores(scores: np.ndarray, relevant_mask: np.ndarray) -> tuple[float, float]:
    order = ranking_order(scores)
    pos = np.flatnonzero(relevant_mask[order]) + 1
    rr = 1.0 / float(pos[0])
    ap = float(np.sum(np.arange(1, pos.size + 1) / pos)) / pos.size
    return rr, ap


def evaluate_scenario(
    store: EmbeddingStore,
    scenario: Scenario,
    checkpoint: Optional[Checkpoint] = None,
    corpus: Optional[Corpus] = None,
) -> EvalResult:
    """Score every eligible query of ``scenario``; relevance is a shared problem id."""
    if scenario.strategy == "Remix" and (checkpoint is None or corpus is None):
        raise MetricsError("Remix evaluation needs the checkpoint and the corpus")
    langs = set(store.languages)
    for lang in (scenario.query_language, scenario.target_language):
        if lang not in langs:
            raise MetricsError(f"language {lang!r} not in store")
    queries = store.pool(scenario.query_language)
    pool = store.pool(scenario.target_language)
    pool_pids = np.array([store.problem_ids[i] for i in pool])

    eligible, excluded = [], 0
    for qi in queries:
        mask = (pool_pids == store.problem_ids[qi]) & (pool != qi)
        if mask.any():
            eligible.append(qi)
        else:
            excluded += 1
    if not eligible:
        raise MetricsError(f"no query in {scenario} has a relevant target")
    q_idx = np.array(eligible, dtype=np.int64)

    remix = None
    if scenario.strategy == "Remix":
        remix = remix_vectors(checkpoint, [corpus.by_id[store.ids[i]] for i in q_idx])
    S = scenario_scores(store, scenario, q_idx, pool, remix)

    rr = np.empty(len(q_idx))
    ap = np.empty(len(q_idx))
    for r, qi in enumerate(q_idx):
        keep = pool != qi
        mask = pool_pids[keep] == store.problem_ids[qi]
        rr[r], ap[r] = _ranks_from_scores(S[r][keep], mask)
    return EvalResult(scenario, [store.ids[i] for i in q_idx], rr, ap, excluded)


# --- alpha grid search --------------------------------------------------------


def alpha_grid(step: float = 0.01) -> np.ndarray:
    if not 0.0 < step <= 0.5:
        raise MetricsError("grid step must be in (0, 0.5]")
    n = int(round(1.0 / step))
    if not math.isclose(n * step, 1.0, rel_tol=0, abs_tol=1e-9):
        raise MetricsError("grid step must divide 1")
    return np.array([k / n for k in range(n + 1)])


@dataclass
class AlphaPick:
    dataset: str
    alpha: float
    mrr: float
    map: float
    curve: list[tuple[float, float, float]] = field(default_factory=list)


@dataclass
class WeightReport:
    picks: list[AlphaPick]

    @property
    def alphas(self) -> np.ndarray:
        return np.array([p.alpha for p in self.picks])

    @property
    def mean_alpha(self) -> float:
        return float(np.mean(self.alphas))

    @property
    def std_alpha(self) -> float:
        return float(np.std(self.alphas))  # population std


def grid_search_alpha(
    stores: dict[str, EmbeddingStore] | EmbeddingStore,
    scenarios: Sequence[Scenario] | Scenario,
    step: float = 0.01,
) -> WeightReport:
    """Best Weight(alpha) per dataset by mean MRR over ``scenarios``; ties go to the smaller alpha.

    A bare store is treated as a single dataset named "default".
    """
    if isinstance(stores, EmbeddingStore):
        stores = {"default": stores}
    if isinstance(scenarios, Scenario):
        scenarios = [scenarios]
    grid = alpha_grid(step)
    picks = []
    for name, store in stores.items():
        curve = []
        for a in grid:
            results = [
                evaluate_scenario(store, Scenario(s.query_language, s.target_language, "Weight", float(a)))
                for s in scenarios
            ]
            curve.append((float(a), float(np.mean([r.mrr for r in results])),
                          float(np.mean([r.map for r in results]))))
        best = max(range(len(curve)), key=lambda k: (curve[k][1], -k))
        a, mrr, map_ = curve[best]
        picks.append(AlphaPick(name, a, mrr, map_, curve))
    return WeightReport(picks)


# --- cross-language matrix ----------------------------------------------------


def cross_language_matrix(
    store: EmbeddingStore,
    strategy: str,
    languages: Optional[Sequence[str]] = None,
    alpha: float = 0.5,
    checkpoint: Optional[Checkpoint] = None,
    corpus: Optional[Corpus] = None,
) -> tuple[list[str], list[list[Optional[float]]]]:
    """MRR per (query language, target language); ``None`` where nothing is evaluable."""
    langs = list(languages) if languages is not None else store.language_set()
    matrix: list[list[Optional[float]]] = []
    for ql in langs:
        row: list[Optional[float]] = []
        for tl in langs:
            try:
                res = evaluate_scenario(store, Scenario(ql, tl, strategy, alpha), checkpoint, corpus)
                row.append(res.mrr)
            except (MetricsError, RetrievalError):
                row.append(None)
        matrix.append(row)
    return langs, matrix


# --- significance -------------------------------------------------------------


def paired_significance(
    a: EvalResult,
    b: EvalResult,
    metric: str = "rr",
    resamples: int = 100_000,
    seed: int = 0,
) -> float:
    """Two-sided paired sign-flip permutation test on per-query differences."""
    if a.query_ids != b.query_ids:
        raise MetricsError("paired test needs identical query sets")
    if metric not in ("rr", "ap"):
        raise MetricsError("metric must be 'rr' or 'ap'")
    diff = getattr(a, metric) - getattr(b, metric)
    observed = abs(diff.sum())
    if not np.any(diff):
        return 1.0
    rng = substream(seed, "significance")
    hits = 0
    chunk = 10_000
    done = 0
    while done < resamples:
        n = min(chunk, resamples - done)
        signs = rng.integers(0, 2, size=(n, diff.size)) * 2 - 1
        stats = np.abs(signs @ diff)
        hits += int(np.count_nonzero(stats >= observed - 1e-12))
        done += n
    return (hits + 1) / (resamples + 1)


def random_baseline_mrr(pool_size: int, n_relevant: int = 1) -> float:
    """Expected reciprocal rank of the first hit under a uniformly random ordering."""
    n, R = pool_size, n_relevant
    if not 1 <= R <= n:
        raise MetricsError("need 1 <= n_relevant <= pool_size")
    total = math.comb(n, R)
    return sum(math.comb(n - r, R - 1) / total / r for r in range(1, n - R + 2))


def random_baseline_for(store: EmbeddingStore, scenario: Scenario) -> float:
    """Mean random-ordering MRR over the scenario's eligible queries."""
    pool = store.pool(scenario.target_language)
    pids = np.array([store.problem_ids[i] for i in pool])
    vals = []
    for qi in store.pool(scenario.query_language):
        keep = pool != qi
        R = int(np.count_nonzero(pids[keep] == store.problem_ids[qi]))
        if R:
            vals.append(random_baseline_mrr(int(keep.sum()), R))
    if not vals:
        raise MetricsError("no eligible queries")
    return float(np.mean(vals))
