"""Deliberation-trajectory analysis.

Belief extraction from per-step decoded distributions, entropy and
consecutive-step KL (both in nats, over the full vocabulary), detection of
the exploration phase and of backtracking events, similarity attribution of
abandoned answers, and bootstrap-aggregated summary statistics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .seeds import derive_seed

KL_FLOOR = 1e-12


def entropy(dist) -> float:
    """Shannon entropy in nats, with 0*ln(0) = 0."""
    p = np.asarray(dist, dtype=np.float64).reshape(-1)
    if np.any(p < 0):
        raise ValueError("negative probability")
    total = p.sum()
    if abs(total - 1.0) > 1e-4:
        raise ValueError(f"distribution sums to {total}, not 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def step_kl(p_next, p_prev) -> float:
    """KL(p_next || p_prev) in nats; p_prev is floored at 1e-12."""
    a = np.asarray(p_next, dtype=np.float64).reshape(-1)
    b = np.asarray(p_prev, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    b = np.maximum(b, KL_FLOOR)
    nz = a > 0
    return float((a[nz] * np.log(a[nz] / b[nz])).sum())


def exploration_end(kl_series, tol: float = 0.01, window: int = 3):
    """First index i such that kl_series[i..i+window-1] all fall at or below
    tol; None when no such window exists (the no-correct-answer signature)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if window < 1:
        raise ValueError("window must be >= 1")
    s = np.asarray(kl_series, dtype=np.float64)
    if s.size < window:
        return None
    ok = s <= tol
    for i in range(s.size - window + 1):
        if ok[i:i + window].all():
            return i
    return None


@dataclass
class BacktrackEvent:
    abandoned: int
    adopted: int
    a_start: int
    a_end: int          # inclusive
    b_start: int
    b_end: int          # inclusive
    final_answer: int

    def __post_init__(self):
        if self.adopted == self.abandoned:
            raise ValueError("adopted option must differ from abandoned")
        if self.b_start <= self.a_end:
            raise ValueError("adopted run must start after the abandoned run")
        if self.final_answer != self.adopted:
            raise ValueError("final answer must equal the adopted option")


def _maximal_runs(series):
    """(symbol, start, end_inclusive) for each maximal constant segment."""
    runs = []
    start = 0
    for i in range(1, len(series) + 1):
        if i == len(series) or series[i] != series[start]:
            runs.append((series[start], start, i - 1))
            start = i
    return runs


def detect_backtracks(argmax_series, min_run: int = 3):
    """All backtracking events in an argmax trajectory.

    An event is a maximal run of option a (length >= min_run) followed later
    by a maximal run of option b != a (length >= min_run), where b is also
    the final answer. Events are ordered by abandoned-run start."""
    series = list(argmax_series)
    if not series:
        raise ValueError("empty argmax series")
    final = series[-1]
    runs = [(s, lo, hi) for s, lo, hi in _maximal_runs(series)
            if hi - lo + 1 >= min_run]
    events = []
    for i, (a, a_lo, a_hi) in enumerate(runs):
        for b, b_lo, b_hi in runs[i + 1:]:
            if b != a and b == final:
                events.append(BacktrackEvent(
                    abandoned=a, adopted=b, a_start=a_lo, a_end=a_hi,
                    b_start=b_lo, b_end=b_hi, final_answer=final))
    events.sort(key=lambda e: (e.a_start, e.b_start))
    return events


@dataclass
class BeliefTrajectory:
    """Per-step option beliefs for one (item, permutation) deliberation."""

    item_id: str
    variant: str
    perm_index: int
    k: int
    option_probs: np.ndarray     # (K, 4), mass of each option under p_i
    full_entropy: np.ndarray     # (K,), entropy of p_i over the whole vocab
    renorm_entropy: np.ndarray   # (K,), entropy of the 4-option renormalized mass
    argmax_series: np.ndarray    # (K,), argmax among the 4 options
    step_kl_series: np.ndarray   # (K-1,), KL(p_{i+1} || p_i), full vocab
    correct_index: int | None = None
    similarities: list = field(default_factory=list)  # per option, this ordering
    options: list = field(default_factory=list)

    @property
    def final_answer(self) -> int:
        return int(self.argmax_series[-1])

    @property
    def is_correct(self) -> bool:
        return self.correct_index is not None and self.final_answer == self.correct_index


def belief_trajectory(step_dists, option_token_ids, item_id: str = "",
                      variant: str = "", perm_index: int = 0,
                      correct_index=None, similarities=(), options=()) -> BeliefTrajectory:
    """Extract option beliefs, entropies, argmax and step-KL series from the
    full decoded distributions p_1..p_K."""
    ids = [int(i) for i in option_token_ids]
    if len(ids) != 4 or len(set(ids)) != 4:
        raise ValueError("exactly 4 distinct option token ids required")
    if not step_dists:
        raise ValueError("at least one step distribution required")
    full = [np.asarray(d.probs, dtype=np.float64).reshape(-1) for d in step_dists]
    k = len(full)
    option_probs = np.array([[p[i] for i in ids] for p in full])
    renorm = option_probs / option_probs.sum(axis=1, keepdims=True)
    return BeliefTrajectory(
        item_id=item_id, variant=variant, perm_index=perm_index, k=k,
        option_probs=option_probs,
        full_entropy=np.array([entropy(p) for p in full]),
        renorm_entropy=np.array([float(-(r[r > 0] * np.log(r[r > 0])).sum())
                                 for r in renorm]),
        argmax_series=option_probs.argmax(axis=1),  # ties -> lowest index
        step_kl_series=np.array([step_kl(full[i + 1], full[i])
                                 for i in range(k - 1)]),
        correct_index=correct_index,
        similarities=list(similarities), options=list(options))


# -- bootstrap -------------------------------------------------------------


@dataclass
class BootstrapCI:
    point: float
    lower: float
    upper: float
    level: float = 0.95
    n_resamples: int = 10000


def _resampled_means(values: np.ndarray, n_resamples: int,
                     rng: np.random.Generator) -> np.ndarray:
    n = values.size
    means = np.empty(n_resamples)
    chunk = max(1, int(2e7) // n)
    for lo in range(0, n_resamples, chunk):
        hi = min(lo + chunk, n_resamples)
        idx = rng.integers(0, n, size=(hi - lo, n))
        means[lo:hi] = values[idx].mean(axis=1)
    return means


def bootstrap_ci(values, n_resamples: int = 10000, level: float = 0.95,
                 seed: int = 0) -> BootstrapCI:
    """Percentile bootstrap CI of the mean; deterministic given seed."""
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    if vals.size == 0:
        raise ValueError("bootstrap over an empty sample")
    rng = np.random.default_rng(seed)
    means = _resampled_means(vals, n_resamples, rng)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return BootstrapCI(point=float(vals.mean()), lower=float(lo),
                       upper=float(hi), level=level, n_resamples=n_resamples)


def bootstrap_diff_ci(a, b, n_resamples: int = 10000, level: float = 0.95,
                      seed: int = 0) -> BootstrapCI:
    """Percentile bootstrap CI of mean(a) - mean(b), unpaired."""
    va = np.asarray(a, dtype=np.float64).reshape(-1)
    vb = np.asarray(b, dtype=np.float64).reshape(-1)
    if va.size == 0 or vb.size == 0:
        raise ValueError("bootstrap over an empty sample")
    rng = np.random.default_rng(seed)
    diffs = (_resampled_means(va, n_resamples, rng)
             - _resampled_means(vb, n_resamples, rng))
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(diffs, [alpha, 1.0 - alpha])
    return BootstrapCI(point=float(va.mean() - vb.mean()), lower=float(lo),
                       upper=float(hi), level=level, n_resamples=n_resamples)


# -- similarity attribution --------------------------------------------------


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine of a zero vector")
    return float(u @ v / (nu * nv))


CORRECT = "CORRECT"


def similarity_rank(item, abandoned: int, mode: str = "constructed",
                    params=None, world=None):
    """Rank of the abandoned option among the item's distractors (1 = most
    similar to the stem); CORRECT when the abandoned option is the correct
    answer. `item` is anything exposing options / similarities /
    correct_index / stem order (QuestionItem or PermutedItem)."""
    if abandoned not in range(4):
        raise ValueError("abandoned option index must be in 0..3")
    if item.correct_index is not None and abandoned == item.correct_index:
        return CORRECT
    distractors = [i for i in range(4) if i != item.correct_index]
    if mode == "constructed":
        scores = {i: item.similarities[i] for i in distractors}
    elif mode == "embedding":
        if params is None or world is None:
            raise ValueError("embedding mode needs trained params and a world")
        stem = item.item.stem_tokens if hasattr(item, "item") else item.stem_tokens
        stem_vec = params.embedding.data[world.encode(stem)].mean(axis=0)
        scores = {
            i: cosine(stem_vec,
                      params.embedding.data[world.token_to_id[item.options[i]]])
            for i in distractors}
    else:
        raise ValueError(f"unknown similarity mode {mode!r}")
    # descending score, ties toward the lower option index
    ordered = sorted(distractors, key=lambda i: (-scores[i], i))
    return ordered.index(abandoned) + 1


# -- aggregation -------------------------------------------------------------


@dataclass
class Stat:
    value: float
    ci_low: float
    ci_high: float
    n: int
    note: str = ""


def _stat(values, seed, n_resamples, level) -> Stat:
    ci = bootstrap_ci(values, n_resamples=n_resamples, level=level, seed=seed)
    return Stat(value=ci.point, ci_low=ci.lower, ci_high=ci.upper,
                n=len(values))


def aggregate_stats(trajectories, tol: float = 0.01, window: int = 3,
                    min_run: int = 3, n_resamples: int = 10000,
                    level: float = 0.95, seed: int = 0) -> dict:
    """Summary statistics with bootstrap CIs over (item, permutation)
    instances. Input order does not matter; instances are keyed by stable
    (item_id, variant, perm_index) ids. Statistics whose variant has no
    instances are reported as None (absent), never as zero."""
    if not trajectories:
        raise ValueError("no trajectories to aggregate")
    trajs = sorted(trajectories, key=lambda t: (t.item_id, t.variant, t.perm_index))
    by_variant = {}
    for t in trajs:
        by_variant.setdefault(t.variant, []).append(t)

    def stat_seed(name):
        return derive_seed(seed, "aggregate", name)

    def maybe(name, values):
        if len(values) == 0:
            return None
        return _stat(np.asarray(values, dtype=np.float64), stat_seed(name),
                     n_resamples, level)

    summary = {}
    events_by_variant = {}
    for variant, ts in sorted(by_variant.items()):
        evs = [detect_backtracks(t.argmax_series, min_run=min_run) for t in ts]
        events_by_variant[variant] = list(zip(ts, evs))
        summary[f"backtrack_prevalence_{variant}"] = maybe(
            f"prev_{variant}", [float(bool(e)) for e in evs])

    # accuracy uplift of backtracking instances, Base variant
    base = events_by_variant.get("Base", [])
    bt_acc = [float(t.is_correct) for t, e in base if e]
    nbt_acc = [float(t.is_correct) for t, e in base if not e]
    summary["backtrack_accuracy_Base"] = maybe("bt_acc", bt_acc)
    summary["non_backtrack_accuracy_Base"] = maybe("nbt_acc", nbt_acc)
    if bt_acc and nbt_acc:
        ci = bootstrap_diff_ci(bt_acc, nbt_acc, n_resamples=n_resamples,
                               level=level, seed=stat_seed("uplift"))
        summary["accuracy_uplift_Base"] = Stat(
            value=ci.point, ci_low=ci.lower, ci_high=ci.upper,
            n=len(bt_acc) + len(nbt_acc))
    else:
        summary["accuracy_uplift_Base"] = None

    # exploration lengths (None-length instances counted separately)
    explore = {}
    for variant, ts in sorted(by_variant.items()):
        ends = [exploration_end(t.step_kl_series, tol=tol, window=window)
                for t in ts]
        lengths = [e for e in ends if e is not None]
        explore[variant] = lengths
        summary[f"exploration_length_{variant}"] = maybe(
            f"explen_{variant}", lengths)
        summary[f"exploration_unsettled_fraction_{variant}"] = maybe(
            f"expnone_{variant}", [float(e is None) for e in ends])
    if explore.get("Base") and explore.get("Easy"):
        ci = bootstrap_diff_ci(explore["Base"], explore["Easy"],
                               n_resamples=n_resamples, level=level,
                               seed=stat_seed("expdiff"))
        summary["exploration_diff_Base_minus_Easy"] = Stat(
            value=ci.point, ci_low=ci.lower, ci_high=ci.upper,
            n=len(explore["Base"]) + len(explore["Easy"]))
        easy_mean = float(np.mean(explore["Easy"]))
        if easy_mean > 0:
            ratio = float(np.mean(explore["Base"])) / easy_mean - 1.0
            summary["exploration_gap_Base_over_Easy"] = Stat(
                value=ratio, ci_low=ratio, ci_high=ratio,
                n=len(explore["Base"]) + len(explore["Easy"]),
                note="ratio Base/Easy - 1 of mean exploration steps")
        else:
            summary["exploration_gap_Base_over_Easy"] = None
    else:
        summary["exploration_diff_Base_minus_Easy"] = None
        summary["exploration_gap_Base_over_Easy"] = None

    # final-step full-vocabulary entropy per variant
    fin = {v: [float(t.full_entropy[-1]) for t in ts]
           for v, ts in by_variant.items()}
    for variant in sorted(fin):
        summary[f"final_entropy_{variant}"] = maybe(
            f"finent_{variant}", fin[variant])
    if fin.get("NoCorrect") and fin.get("Base"):
        ci = bootstrap_diff_ci(fin["NoCorrect"], fin["Base"],
                               n_resamples=n_resamples, level=level,
                               seed=stat_seed("entdiff"))
        summary["final_entropy_diff_NoCorrect_minus_Base"] = Stat(
            value=ci.point, ci_low=ci.lower, ci_high=ci.upper,
            n=len(fin["NoCorrect"]) + len(fin["Base"]))
    else:
        summary["final_entropy_diff_NoCorrect_minus_Base"] = None

    # abandoned-answer similarity ranks + adopted-correct, Base events
    ranks = []
    adopted_correct = []
    for t, evs in base:
        for e in evs:
            ranks.append(similarity_rank(t, e.abandoned))
            adopted_correct.append(float(e.adopted == t.correct_index))
    n_events = len(ranks)
    summary["n_backtrack_events_Base"] = Stat(
        value=float(n_events), ci_low=float(n_events), ci_high=float(n_events),
        n=n_events)
    for r in (1, 2, 3):
        label = {1: "most_similar", 2: "second_similar", 3: "least_similar"}[r]
        summary[f"abandoned_{label}_fraction"] = maybe(
            f"rank{r}", [float(x == r) for x in ranks])
        distractor_only = [float(x == r) for x in ranks if x != CORRECT]
        summary[f"abandoned_{label}_fraction_distractor_denom"] = maybe(
            f"rank{r}d", distractor_only)
    summary["abandoned_correct_fraction"] = maybe(
        "rankc", [float(x == CORRECT) for x in ranks])
    summary["adopted_correct_fraction"] = maybe("adopted", adopted_correct)
    return summary


# -- trajectory JSONL interchange --------------------------------------------


def trajectory_to_record(t: BeliefTrajectory) -> dict:
    return {
        "item_id": t.item_id,
        "variant": t.variant,
        "perm_index": t.perm_index,
        "k": t.k,
        "option_probs": [[float(x) for x in row] for row in t.option_probs],
        "full_entropy": [float(x) for x in t.full_entropy],
        "renorm_entropy": [float(x) for x in t.renorm_entropy],
        "argmax_series": [int(x) for x in t.argmax_series],
        "step_kl": [float(x) for x in t.step_kl_series],
        "correct_index": t.correct_index,
        "similarities": [float(x) for x in t.similarities],
        "options": list(t.options),
        "entropy_units": "nats",
    }


def record_to_trajectory(rec: dict) -> BeliefTrajectory:
    return BeliefTrajectory(
        item_id=rec["item_id"], variant=rec["variant"],
        perm_index=rec["perm_index"], k=rec["k"],
        option_probs=np.array(rec["option_probs"], dtype=np.float64),
        full_entropy=np.array(rec["full_entropy"], dtype=np.float64),
        renorm_entropy=np.array(rec["renorm_entropy"], dtype=np.float64),
        argmax_series=np.array(rec["argmax_series"], dtype=np.intp),
        step_kl_series=np.array(rec["step_kl"], dtype=np.float64),
        correct_index=rec["correct_index"],
        similarities=rec.get("similarities", []),
        options=rec.get("options", []))


def write_trajectories_jsonl(trajectories, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in trajectories:
            f.write(json.dumps(trajectory_to_record(t), sort_keys=True) + "\n")


def read_trajectories_jsonl(path):
    with open(path, encoding="utf-8") as f:
        return [record_to_trajectory(json.loads(line)) for line in f]
