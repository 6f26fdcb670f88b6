import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_eval, random_store
from hybridret.metrics import (
    EvalResult,
    MetricsError,
    _ranks_from_scores,
    alpha_grid,
    average_precision,
    cross_language_matrix,
    evaluate_scenario,
    grid_search_alpha,
    paired_significance,
    random_baseline_for,
    random_baseline_mrr,
    reciprocal_rank,
)
from hybridret.retrieval import EmbeddingStore, Scenario, scenario_scores


def test_reciprocal_rank_examples():
    assert reciprocal_rank(["a", "b"], {"a"}) == 1.0
    assert reciprocal_rank(list("abcde"), {"e"}) == 1 / 5
    assert reciprocal_rank(list("abcde"), {"d", "e"}) == 0.25
    with pytest.raises(MetricsError):
        reciprocal_rank(["a"], {"z"})


def test_average_precision_examples():
    assert average_precision(["a", "b"], {"a"}) == 1.0
    assert average_precision(list("abc"), {"a", "c"}) == pytest.approx(0.833333, abs=1e-6)
    assert average_precision(list("abc"), {"b", "c"}) == pytest.approx(0.583333, abs=1e-6)
    with pytest.raises(MetricsError):
        average_precision([], {"a"})


@given(st.integers(1, 30), st.data())
def test_ap_with_one_relevant_is_rr(n, data):
    r = data.draw(st.integers(0, n - 1))
    ids = [f"c{i}" for i in range(n)]
    assert average_precision(ids, {ids[r]}) == reciprocal_rank(ids, {ids[r]})


@given(st.integers(1, 12), st.data())
def test_rr_ap_bounds(n, data):
    ids = [f"c{i}" for i in range(n)]
    rel = data.draw(st.sets(st.sampled_from(ids), min_size=1))
    rr, ap = reciprocal_rank(ids, rel), average_precision(ids, rel)
    assert 0 < ap <= 1 and 0 < rr <= 1
    assert ap >= rr / len(rel) - 1e-15


# --- scenario evaluation ---------------------------------------------------------


@pytest.mark.parametrize("seed", range(50))
@pytest.mark.parametrize("strategy", ["NL2Code", "NL2NL", "Code2Code", "Weight", "Concat"])
def test_evaluate_matches_brute_force(seed, strategy):
    rng = np.random.default_rng(seed)
    store = random_store(rng, n=20, quantize=seed % 7 == 0)
    alpha = 0.3
    for ql in store.language_set():
        for tl in store.language_set():
            rrs, aps = brute_eval(store, ql, tl, strategy, alpha)
            sc = Scenario(ql, tl, strategy, alpha)
            if not rrs:
                with pytest.raises(MetricsError):
                    evaluate_scenario(store, sc)
                continue
            res = evaluate_scenario(store, sc)
            assert res.n_queries == len(rrs)
            assert abs(res.mrr - np.mean(rrs)) <= 1e-12
            assert abs(res.map - np.mean(aps)) <= 1e-12
            assert res.n_queries + res.n_excluded == store.languages.count(ql)


def test_perfect_store_mrr_one():
    code = np.eye(4)[[0, 1, 2, 3, 0, 1, 2, 3]]
    store = EmbeddingStore([f"s{i}" for i in range(8)], [f"p{i % 4}" for i in range(8)],
                           ["a"] * 4 + ["b"] * 4, code, code)
    res = evaluate_scenario(store, Scenario("a", "b", "Code2Code"))
    assert res.mrr == 1.0 and res.map == 1.0 and res.n_queries == 4


@pytest.mark.parametrize("seed", range(20))
def test_one_relevant_each_gives_mrr_equal_map(seed):
    rng = np.random.default_rng(seed)
    n, d = 10, 4
    units = lambda k: (lambda x: x / np.linalg.norm(x, axis=1, keepdims=True))(rng.normal(size=(k, d)))
    pids = [f"p{i}" for i in range(n)] * 2
    store = EmbeddingStore([f"s{i:02d}" for i in range(2 * n)], pids, ["a"] * n + ["b"] * n,
                           units(2 * n), units(2 * n))
    for strategy in ("NL2Code", "Code2Code", "Weight", "Concat", "NL2NL"):
        res = evaluate_scenario(store, Scenario("a", "b", strategy, 0.4))
        assert res.mrr == res.map


def test_excluded_queries_counted():
    store = EmbeddingStore(["q1", "q2", "t1"], ["p", "lonely", "p"], ["a", "a", "b"], np.eye(3), np.eye(3))
    res = evaluate_scenario(store, Scenario("a", "b", "Code2Code"))
    assert res.query_ids == ["q1"] and res.n_excluded == 1


def test_evaluate_errors():
    store = EmbeddingStore(["q", "t"], ["p", "x"], ["a", "b"], np.eye(2), np.eye(2))
    with pytest.raises(MetricsError):
        evaluate_scenario(store, Scenario("a", "b", "Code2Code"))
    with pytest.raises(MetricsError):
        evaluate_scenario(store, Scenario("a", "zz", "Code2Code"))
    with pytest.raises(MetricsError):
        evaluate_scenario(store, Scenario("a", "b", "Remix"))


@pytest.mark.parametrize("seed", range(10))
def test_monotone_rescoring_invariance(seed):
    rng = np.random.default_rng(seed)
    store = random_store(rng, n=20)
    sc = Scenario("la", "lb", "Weight", 0.6)
    q = np.array(store.pool("la"))
    pool = np.array(store.pool("lb"))
    S = scenario_scores(store, sc, q, pool)
    for r, qi in enumerate(q):
        mask = np.array([store.problem_ids[j] == store.problem_ids[qi] for j in pool])
        if mask.any():
            assert _ranks_from_scores(S[r], mask) == _ranks_from_scores(2 * S[r] + 1, mask)


# --- alpha grid -------------------------------------------------------------------


def test_alpha_grid():
    g = alpha_grid(0.01)
    assert len(g) == 101 and g[0] == 0.0 and g[-1] == 1.0 and g[35] == 0.35
    assert list(alpha_grid(0.5)) == [0.0, 0.5, 1.0]
    for bad in (0.0, 0.6, 0.03):
        with pytest.raises(MetricsError):
            alpha_grid(bad)


def modality_fixture(rng, perfect: str, n=8, d=6):
    """Cross-language store where one query modality pins the right target and the other is noise."""
    unit = lambda x: x / np.linalg.norm(x, axis=-1, keepdims=True)
    targets = unit(rng.normal(size=(n, d)))
    noise = unit(rng.normal(size=(n, d)))
    q_code, q_nl = (targets, noise) if perfect == "code" else (noise, targets)
    return EmbeddingStore(
        ids=[f"q{i}" for i in range(n)] + [f"t{i}" for i in range(n)],
        problem_ids=[f"p{i}" for i in range(n)] * 2,
        languages=["a"] * n + ["b"] * n,
        code=np.vstack([q_code, targets]),
        nl=np.vstack([q_nl, unit(rng.normal(size=(n, d)))]),
    )


def brute_best_alpha(store, step):
    best = None
    for a in alpha_grid(step):
        rrs, _ = brute_eval(store, "a", "b", "Weight", float(a))
        m = float(np.mean(rrs))
        if best is None or m > best[1]:
            best = (float(a), m)
    return best


@pytest.mark.parametrize("seed", range(5))
def test_noise_nl_picks_alpha_zero(seed):
    store = modality_fixture(np.random.default_rng(seed), "code")
    rep = grid_search_alpha(store, Scenario("a", "b", "Weight"), step=0.05)
    assert rep.picks[0].alpha == 0.0 and rep.picks[0].mrr == 1.0
    assert rep.picks[0].alpha == brute_best_alpha(store, 0.05)[0]


@pytest.mark.parametrize("seed", range(5))
def test_perfect_nl_picks_top_plateau(seed):
    store = modality_fixture(np.random.default_rng(seed), "nl")
    pick = grid_search_alpha(store, Scenario("a", "b", "Weight"), step=0.05).picks[0]
    assert pick.mrr == 1.0 and pick.curve[-1][1] == 1.0
    assert pick.alpha == brute_best_alpha(store, 0.05)[0]


def swap_query_modalities(store):
    """Exchange NL and code vectors of the ``a`` samples, which are never candidates in a -> b."""
    code, nl = store.code.copy(), store.nl.copy()
    rows = [i for i, l in enumerate(store.languages) if l == "a"]
    code[rows], nl[rows] = store.nl[rows], store.code[rows]
    return EmbeddingStore(store.ids, store.problem_ids, store.languages, code, nl)


@pytest.mark.parametrize("seed", range(8))
def test_swapping_modalities_mirrors_alpha(seed):
    store = random_store(np.random.default_rng(seed), n=20, langs=("a", "b"))
    sc = Scenario("a", "b", "Weight")
    try:
        a = grid_search_alpha(store, sc, step=0.05).picks[0]
    except MetricsError:
        pytest.skip("fixture has no eligible queries")
    b = grid_search_alpha(swap_query_modalities(store), sc, step=0.05).picks[0]
    for (x, m1, _), (y, m2, _) in zip(a.curve, reversed(b.curve)):
        assert x == pytest.approx(1 - y) and m1 == pytest.approx(m2, abs=1e-12)
    best = max(m for _, m, _ in a.curve)
    if sum(m == best for _, m, _ in a.curve) == 1:
        assert b.alpha == pytest.approx(1 - a.alpha)


@pytest.mark.parametrize("seed", range(10))
def test_grid_search_matches_brute_force(seed):
    store = random_store(np.random.default_rng(seed), n=20, langs=("a", "b"))
    try:
        rep = grid_search_alpha(store, Scenario("a", "b", "Weight"), step=0.1)
    except MetricsError:
        pytest.skip("fixture has no eligible queries")
    alpha, mrr = brute_best_alpha(store, 0.1)
    assert rep.picks[0].alpha == alpha and abs(rep.picks[0].mrr - mrr) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_grid_endpoints_bitwise(seed):
    store = random_store(np.random.default_rng(seed), n=20, langs=("a", "b"))
    sc = Scenario("a", "b", "Weight")
    rep = grid_search_alpha(store, sc, step=0.25)
    curve = rep.picks[0].curve
    c2c = evaluate_scenario(store, Scenario("a", "b", "Code2Code"))
    n2c = evaluate_scenario(store, Scenario("a", "b", "NL2Code"))
    assert curve[0][1:] == (c2c.mrr, c2c.map)
    assert curve[-1][1:] == (n2c.mrr, n2c.map)
    w0 = evaluate_scenario(store, Scenario("a", "b", "Weight", 0.0))
    w1 = evaluate_scenario(store, Scenario("a", "b", "Weight", 1.0))
    assert np.array_equal(w0.rr, c2c.rr) and np.array_equal(w0.ap, c2c.ap)
    assert np.array_equal(w1.rr, n2c.rr) and np.array_equal(w1.ap, n2c.ap)


def test_weight_report_statistics():
    rng = np.random.default_rng(3)
    one = grid_search_alpha({"d1": modality_fixture(rng, "code")}, [Scenario("a", "b", "Weight")], 0.5)
    assert one.std_alpha == 0.0
    two = grid_search_alpha(
        {"d1": modality_fixture(rng, "code"), "d2": modality_fixture(rng, "nl")},
        [Scenario("a", "b", "Weight")], 0.5,
    )
    assert list(two.alphas) == [0.0, 1.0]
    assert two.mean_alpha == 0.5 and two.std_alpha == 0.5


# --- cross-language matrix -----------------------------------------------------------


def test_matrix_consistency_and_absent_cells():
    store = EmbeddingStore(
        ["a1", "a2", "b1", "c1"], ["p", "p", "p", "q"], ["a", "a", "b", "c"],
        np.eye(4), np.eye(4)[[0, 0, 1, 2]],
    )
    langs, M = cross_language_matrix(store, "Code2Code", ["a", "b"])
    assert langs == ["a", "b"] and len(M) == 2 and all(len(r) == 2 for r in M)
    for i, ql in enumerate(langs):
        for j, tl in enumerate(langs):
            if M[i][j] is not None:
                assert M[i][j] == evaluate_scenario(store, Scenario(ql, tl, "Code2Code")).mrr
    langs, M = cross_language_matrix(store, "Code2Code")
    assert langs == ["a", "b", "c"]
    # language c has a lonely problem: nothing evaluable, marked absent rather than zero
    assert M[2] == [None, None, None] and M[0][2] is None and M[1][1] is None


# --- significance ----------------------------------------------------------------


def make_result(values, tag="x"):
    v = np.asarray(values, dtype=float)
    return EvalResult(Scenario("a", "b", "NL2Code"), [f"q{i}" for i in range(len(v))], v, v.copy())


def exact_sign_flip_p(diff):
    obs = abs(sum(diff))
    hits = sum(abs(sum(s * d for s, d in zip(signs, diff))) >= obs - 1e-12
               for signs in itertools.product((1, -1), repeat=len(diff)))
    return hits / 2 ** len(diff)


def test_significance_identical():
    a = make_result(np.linspace(0.1, 1, 20))
    assert paired_significance(a, a) == 1.0


def test_significance_dominating():
    a = make_result(np.full(20, 1.0))
    b = make_result(np.full(20, 0.5))
    # only the two all-same-sign flips reach the observed statistic
    assert 2 / 2 ** 20 < 1e-5
    p = paired_significance(a, b)
    assert p < 0.001 and p == pytest.approx(1 / 100_001, abs=3e-5)


def test_significance_symmetric_and_seeded():
    rng = np.random.default_rng(0)
    a, b = make_result(rng.uniform(size=15)), make_result(rng.uniform(size=15))
    assert paired_significance(a, b, resamples=20_000) == paired_significance(b, a, resamples=20_000)
    assert paired_significance(a, b, resamples=5000, seed=4) == paired_significance(a, b, resamples=5000, seed=4)


@pytest.mark.parametrize("seed", range(3))
def test_significance_agrees_with_enumeration(seed):
    rng = np.random.default_rng(seed)
    a, b = make_result(rng.uniform(size=10)), make_result(rng.uniform(size=10))
    exact = exact_sign_flip_p(list(a.rr - b.rr))
    # Monte Carlo at 1e5 resamples: standard error below 0.0016
    assert paired_significance(a, b) == pytest.approx(exact, abs=0.01)


def test_significance_errors():
    a = make_result([1.0, 0.5])
    with pytest.raises(MetricsError):
        paired_significance(a, make_result([1.0]))
    with pytest.raises(MetricsError):
        paired_significance(a, a, metric="ndcg")


# --- random baseline ----------------------------------------------------------------


@pytest.mark.parametrize("n,R", [(1, 1), (2, 1), (5, 1), (5, 2), (6, 3), (7, 7)])
def test_random_baseline_matches_enumeration(n, R):
    total = 0.0
    perms = list(itertools.permutations(range(n)))
    for p in perms:
        first = min(k for k, c in enumerate(p, 1) if c < R)
        total += 1 / first
    assert random_baseline_mrr(n, R) == pytest.approx(total / len(perms), abs=1e-12)


def test_random_baseline_single_relevant_is_harmonic():
    n = 40
    assert random_baseline_mrr(n) == pytest.approx(sum(1 / k for k in range(1, n + 1)) / n, abs=1e-12)
    with pytest.raises(MetricsError):
        random_baseline_mrr(3, 4)


@settings(max_examples=20)
@given(st.integers(0, 1000))
def test_random_baseline_for_store_matches_shuffles(seed):
    rng = np.random.default_rng(seed)
    store = random_store(rng, n=12, langs=("a", "b"))
    try:
        expected = random_baseline_for(store, Scenario("a", "b", "Code2Code"))
    except MetricsError:
        return
    assert 0 < expected <= 1
    per_query = []
    pool = store.pool("b")
    for qi in store.pool("a"):
        cands = [j for j in pool if j != qi]
        R = sum(store.problem_ids[j] == store.problem_ids[qi] for j in cands)
        if R:
            per_query.append(random_baseline_mrr(len(cands), R))
    assert expected == pytest.approx(float(np.mean(per_query)), abs=1e-12)
    assert math.isfinite(expected)
