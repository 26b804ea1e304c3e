"""Filtered ranking metrics and filtered negative log-likelihood.

Ranks follow the filtered protocol: every other true object of the same
(subject, relation) query is removed from the candidate pool before the
true object's rank is taken.  The optimistic rank counts strictly greater
scores; the pessimistic rank also counts ties, so a constant score row
yields rank 1 versus rank |pool|.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import TripleStore, build_query_index

HITS_AT = (1, 3, 10)


def filtered_rank(scores, true_id: int, filter_ids=(), mode: str = "optimistic") -> int:
    """Rank of true_id within one score row after removing filter_ids.

    filter_ids are excluded from the pool entirely; true_id must not be in
    them.  Rank 1 is best.
    """
    z = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 0 <= true_id < z.size:
        raise ValueError("true_id out of range")
    if mode not in ("optimistic", "pessimistic"):
        raise ValueError(f"unknown rank mode {mode!r}")
    keep = np.ones(z.size, dtype=bool)
    fids = np.asarray(list(filter_ids), dtype=np.int64)
    if fids.size:
        if (fids == true_id).any():
            raise ValueError("true object present in its own filter set")
        keep[fids] = False
    keep[true_id] = False
    target = z[true_id]
    if mode == "optimistic":
        better = int((z[keep] > target).sum())
    else:
        better = int((z[keep] >= target).sum())
    return 1 + better


@dataclass
class EvalReport:
    split: str
    rank_mode: str
    n_queries: int
    mrr: float
    mr: float
    hits: dict[int, float]
    per_query: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self, include_per_query: bool = False) -> dict:
        out = {
            "split": self.split,
            "rank_mode": self.rank_mode,
            "n_queries": self.n_queries,
            "mrr": self.mrr,
            "mr": self.mr,
            "hits": {f"hits@{k}": v for k, v in sorted(self.hits.items())},
        }
        if include_per_query:
            out["per_query"] = self.per_query
        return out


def ranking_metrics(
    score_fn,
    store: TripleStore,
    split: str = "test",
    rank_mode: str = "optimistic",
    candidates: list[list[int]] | None = None,
    filter_splits=("train", "valid", "test"),
    batch_size: int = 512,
) -> EvalReport:
    """Filtered ranking over one split.

    score_fn(subjects, relations) must return a (batch, n_entities) array.
    candidates, when given, is one entity-id list per triple of the split;
    ranking is then restricted to those candidates plus the true object,
    with known-true candidates still filtered out.
    """
    triples = store.split(split)
    if not triples:
        raise ValueError(f"split {split!r} is empty")
    if candidates is not None and len(candidates) != len(triples):
        raise ValueError("need exactly one candidate list per triple")
    index = build_query_index(store, filter_splits)

    ranks = np.empty(len(triples), dtype=np.int64)
    per_query = []
    for start in range(0, len(triples), batch_size):
        chunk = triples[start : start + batch_size]
        subs = np.array([t[0] for t in chunk], dtype=np.int64)
        rels = np.array([t[1] for t in chunk], dtype=np.int64)
        z = np.asarray(score_fn(subs, rels), dtype=np.float64)
        if z.shape != (len(chunk), store.n_entities):
            raise ValueError(
                f"score_fn returned {z.shape}, expected "
                f"({len(chunk)}, {store.n_entities})"
            )
        for i, (s, r, o) in enumerate(chunk):
            drop = set(index.get(s, r))
            drop.discard(o)
            if candidates is not None:
                pool = set(candidates[start + i])
                pool.add(o)
                drop |= set(range(store.n_entities)) - pool
            rank = filtered_rank(z[i], o, sorted(drop), mode=rank_mode)
            ranks[start + i] = rank
            per_query.append({"s": s, "r": r, "o": o, "rank": int(rank)})

    rr = 1.0 / ranks
    hits = {k: float((ranks <= k).mean()) for k in HITS_AT}
    return EvalReport(
        split=split,
        rank_mode=rank_mode,
        n_queries=len(triples),
        mrr=float(rr.mean()),
        mr=float(ranks.mean()),
        hits=hits,
        per_query=per_query,
    )


@dataclass
class NllReport:
    split: str
    filter_splits: tuple[str, ...]
    n_scored: int
    n_skipped: int
    mean_nll: float
    per_query: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self, include_per_query: bool = False) -> dict:
        out = {
            "split": self.split,
            "nll_filter": list(self.filter_splits),
            "n_scored": self.n_scored,
            "n_skipped": self.n_skipped,
            "mean_nll": self.mean_nll,
        }
        if include_per_query:
            out["per_query"] = self.per_query
        return out


def filtered_nll(
    logp_fn,
    store: TripleStore,
    split: str = "test",
    filter_splits=("train",),
    batch_size: int = 512,
) -> NllReport:
    """Mean negative log-probability of true objects after renormalizing
    each row over the entities not already known true in filter_splits.

    A query whose true object is itself excluded by the filter is skipped
    and counted, not scored.
    """
    triples = store.split(split)
    if not triples:
        raise ValueError(f"split {split!r} is empty")
    index = build_query_index(store, filter_splits)

    per_query = []
    total = 0.0
    skipped = 0
    for start in range(0, len(triples), batch_size):
        chunk = triples[start : start + batch_size]
        subs = np.array([t[0] for t in chunk], dtype=np.int64)
        rels = np.array([t[1] for t in chunk], dtype=np.int64)
        logp = np.asarray(logp_fn(subs, rels), dtype=np.float64)
        if logp.shape != (len(chunk), store.n_entities):
            raise ValueError(
                f"logp_fn returned {logp.shape}, expected "
                f"({len(chunk)}, {store.n_entities})"
            )
        for i, (s, r, o) in enumerate(chunk):
            drop = index.get(s, r)
            if o in drop:
                skipped += 1
                per_query.append({"s": s, "r": r, "o": o, "skipped": True})
                continue
            row = logp[i]
            keep = np.ones(row.size, dtype=bool)
            if drop:
                keep[np.asarray(drop, dtype=np.int64)] = False
            kept = row[keep]
            mx = kept.max()
            lse = mx + np.log(np.exp(kept - mx).sum())
            nll = -(row[o] - lse)
            total += nll
            per_query.append({"s": s, "r": r, "o": o, "nll": float(nll)})

    n_scored = len(triples) - skipped
    return NllReport(
        split=split,
        filter_splits=tuple(filter_splits),
        n_scored=n_scored,
        n_skipped=skipped,
        mean_nll=total / n_scored if n_scored else float("nan"),
        per_query=per_query,
    )


def evaluate_model(
    scorer,
    store: TripleStore,
    split: str = "test",
    rank_mode: str = "optimistic",
    candidates: list[list[int]] | None = None,
    nll_filter_splits=("train",),
    batch_size: int = 512,
) -> dict:
    """Ranking metrics plus filtered NLL for one scorer, as one dict."""
    ranks = ranking_metrics(
        scorer.scores, store, split, rank_mode, candidates, batch_size=batch_size
    )
    nll = filtered_nll(
        scorer.log_probs, store, split, nll_filter_splits, batch_size=batch_size
    )
    out = ranks.to_dict()
    out.update(
        {
            "mean_filtered_nll": nll.mean_nll,
            "nll_filter": list(nll.filter_splits),
            "nll_skipped": nll.n_skipped,
        }
    )
    return out
