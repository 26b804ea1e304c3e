"""Constructive capacity analysis for bilinear scorers and softmax outputs.

Three families of checks live here, all certificate-producing:

* Sign decomposition: any 0/1 adjacency with max out-degree c can be
  written as sign(X @ V^T) where V is the 2c+1-column integer Vandermonde
  grid v[t, j] = t^j and row i of X holds the coefficients of a polynomial
  that is positive exactly on i's neighbor columns.  This realizes every
  sign pattern of the adjacency in dimension 2c+1.

* Feasible sign/ranking enumeration: which of the 2^N sign patterns (or N!
  score orderings) over N fixed embedding rows are realized by some query
  vector h.  A batched perceptron hunts for witnesses under an iteration
  cap; an independent geometric enumeration (hyperplane-arrangement ray
  probes for signs, dense direction sampling for rankings) must agree.

* Rank probes: exact rational rank of a target adjacency versus the d+1
  ceiling of single-softmax log-probability matrices, numerical rank of
  sampled log-probability matrices, and the ALR view that flattens a
  single softmax to an affine map.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import linalg

# exact rational cross-checks get slow past this many cells
RATIONAL_CHECK_CELL_CAP = 256

MAX_SIGN_ROWS = 16  # 2^N candidate patterns; keep enumeration tractable
MAX_RANKING_ROWS = 7  # N! candidate permutations
MAX_RANKING_DIM = 3


def _validate_binary(adj) -> np.ndarray:
    a = np.asarray(adj)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("adjacency must be a non-empty 2-D matrix")
    if not np.isin(a, (0, 1)).all():
        raise ValueError("adjacency entries must be 0 or 1")
    return a.astype(np.int64)


@dataclass
class RowSignPoly:
    """sigma * prod_j (t - roots[j]); evaluated in factored form so the
    sign at integer grid points is exact in float arithmetic."""

    sigma: int
    roots: list[Fraction]

    def eval_float(self, t: float) -> float:
        out = float(self.sigma)
        for r in self.roots:
            out *= t - float(r)
        return out

    def eval_exact(self, t) -> Fraction:
        out = Fraction(self.sigma)
        for r in self.roots:
            out *= Fraction(t) - r
        return out

    def coefficients(self, width: int) -> list[Fraction]:
        """Dense coefficient list (low degree first), zero-padded."""
        coeffs = [Fraction(self.sigma)]
        for r in self.roots:
            nxt = [Fraction(0)] * (len(coeffs) + 1)
            for i, c in enumerate(coeffs):
                nxt[i + 1] += c
                nxt[i] -= c * r
            coeffs = nxt
        if len(coeffs) > width:
            raise ValueError("polynomial degree exceeds the requested width")
        return coeffs + [Fraction(0)] * (width - len(coeffs))


@dataclass
class SignDecomposition:
    n_rows: int
    n_cols: int
    degree_cap: int  # c: max row sum of the adjacency
    epsilon: Fraction
    rows: list[RowSignPoly]

    @property
    def width(self) -> int:
        return 2 * self.degree_cap + 1

    def vandermonde(self) -> np.ndarray:
        """(n_cols, width) grid with v[t-1, j] = t**j for t = 1..n_cols."""
        t = np.arange(1, self.n_cols + 1, dtype=np.float64)[:, None]
        j = np.arange(self.width, dtype=np.float64)[None, :]
        return t**j

    def coefficient_matrix(self) -> np.ndarray:
        return np.array(
            [[float(c) for c in row.coefficients(self.width)] for row in self.rows]
        )

    def coefficient_matrix_exact(self) -> list[list[Fraction]]:
        return [row.coefficients(self.width) for row in self.rows]

    def sign_matrix(self) -> np.ndarray:
        """Signs at the integer grid via factored evaluation (exact signs)."""
        out = np.empty((self.n_rows, self.n_cols), dtype=np.int64)
        for i, row in enumerate(self.rows):
            for t in range(1, self.n_cols + 1):
                v = row.eval_float(t)
                out[i, t - 1] = 1 if v > 0 else -1
        return out


def sign_decompose(adj, epsilon=Fraction(1, 2), merge_blocks: bool = True) -> SignDecomposition:
    """Build per-row polynomials whose integer-grid signs equal 2*adj - 1.

    Row i gets a pair of roots a - eps, b + eps around each block [a, b] of
    consecutive neighbor columns (each single column is its own block when
    merge_blocks is False), and an overall minus sign, so the polynomial is
    positive exactly inside the blocks.  All-zero rows use the constant -1,
    all-one rows the constant +1.  Total width is always 2c + 1.
    """
    a = _validate_binary(adj)
    eps = Fraction(epsilon)
    if not 0 < eps < 1:
        raise ValueError("epsilon must lie strictly between 0 and 1")
    n, m = a.shape
    c = int(a.sum(axis=1).max())
    rows = []
    for i in range(n):
        ones = np.flatnonzero(a[i]) + 1  # 1-based grid positions
        if ones.size == 0:
            rows.append(RowSignPoly(sigma=-1, roots=[]))
            continue
        if ones.size == m:
            rows.append(RowSignPoly(sigma=1, roots=[]))
            continue
        blocks = []
        start = prev = int(ones[0])
        for t in ones[1:]:
            t = int(t)
            if t == prev + 1 and merge_blocks:
                prev = t
                continue
            blocks.append((start, prev))
            start = prev = t
        blocks.append((start, prev))
        roots: list[Fraction] = []
        for lo, hi in blocks:
            roots.append(Fraction(lo) - eps)
            roots.append(Fraction(hi) + eps)
        if len(roots) > 2 * c:
            raise AssertionError("row degree exceeded 2c")
        rows.append(RowSignPoly(sigma=-1, roots=roots))
    return SignDecomposition(
        n_rows=n, n_cols=m, degree_cap=c, epsilon=eps, rows=rows
    )


@dataclass
class SignVerification:
    ok: bool
    min_margin: float
    mismatches: list[tuple[int, int]]
    rational_checked: bool


def verify_sign_decomposition(adj, dec: SignDecomposition, rational=None) -> SignVerification:
    """Check sign(p_i(t)) against 2*adj - 1 on the whole grid.

    Factored float evaluation decides the signs (no coefficient-form
    cancellation); when rational is True, or None with a small enough grid,
    the dense exact coefficients are also evaluated with Fractions and must
    agree cell by cell.
    """
    a = _validate_binary(adj)
    if a.shape != (dec.n_rows, dec.n_cols):
        raise ValueError("decomposition shape does not match the adjacency")
    target = 2 * a - 1
    mismatches = []
    min_margin = math.inf
    for i, row in enumerate(dec.rows):
        for t in range(1, dec.n_cols + 1):
            v = row.eval_float(t)
            min_margin = min(min_margin, abs(v))
            s = 1 if v > 0 else (-1 if v < 0 else 0)
            if s != target[i, t - 1]:
                mismatches.append((i, t - 1))
    if rational is None:
        rational = a.size <= RATIONAL_CHECK_CELL_CAP
    if rational:
        coeffs = dec.coefficient_matrix_exact()
        for i, row_coeffs in enumerate(coeffs):
            for t in range(1, dec.n_cols + 1):
                tf = Fraction(t)
                acc = Fraction(0)
                power = Fraction(1)
                for cf in row_coeffs:
                    acc += cf * power
                    power *= tf
                s = 1 if acc > 0 else (-1 if acc < 0 else 0)
                if s != target[i, t - 1]:
                    mismatches.append((i, t - 1))
    return SignVerification(
        ok=not mismatches,
        min_margin=min_margin,
        mismatches=sorted(set(mismatches)),
        rational_checked=bool(rational),
    )


def random_adjacency(
    n_rows: int, n_cols: int, max_degree: int, rng: np.random.Generator
) -> np.ndarray:
    """Random 0/1 matrix with every row sum <= max_degree."""
    if min(n_rows, n_cols) < 1 or max_degree < 0:
        raise ValueError("bad adjacency shape or degree cap")
    out = np.zeros((n_rows, n_cols), dtype=np.int64)
    cap = min(max_degree, n_cols)
    for i in range(n_rows):
        k = int(rng.integers(0, cap + 1))
        if k:
            out[i, rng.choice(n_cols, size=k, replace=False)] = 1
    return out


# ---- feasible sign patterns / rankings ----


def feasible_sign_bound(n: int, d: int) -> int:
    """Count of sign patterns over n generic hyperplanes realizable in R^d:
    2 * sum_{i<d} C(n-1, i).  Saturates at 2^n once d >= n."""
    if n < 1 or d < 1:
        raise ValueError("need n >= 1 and d >= 1")
    return 2 * sum(math.comb(n - 1, i) for i in range(d))


def _unit_rows(e: np.ndarray, tol: float, what: str) -> np.ndarray:
    norms = np.linalg.norm(e, axis=1)
    if (norms <= tol).any():
        raise ValueError(f"{what}: zero row (norm <= {tol})")
    return e / norms[:, None]


def check_general_position_signs(e, tol: float = 1e-9) -> None:
    """Reject zero rows, coincident directions, and degenerate d-subsets."""
    e = linalg.as_matrix(e)
    n, d = e.shape
    en = _unit_rows(e, tol, "sign enumeration")
    if d >= 2:
        gram = np.abs(en @ en.T)
        np.fill_diagonal(gram, 0.0)
        if (gram > 1.0 - 1e-12).any():
            raise ValueError("sign enumeration: coincident row directions")
    k = min(n, d)
    for subset in itertools.combinations(range(n), k):
        sub = en[list(subset)]
        if k == d:
            bad = abs(np.linalg.det(sub)) <= tol
        else:
            bad = np.linalg.svd(sub, compute_uv=False)[-1] <= tol
        if bad:
            raise ValueError(
                f"sign enumeration: rows {subset} are numerically dependent"
            )


def check_general_position_rankings(e, tol: float = 1e-9) -> None:
    """Genericity for score orderings: all rows distinct, and every acyclic
    (forest) subset of pairwise difference vectors has full rank.

    Subsets whose index pairs contain a cycle are structurally dependent
    ((e1-e2) + (e2-e3) - (e1-e3) = 0 identically), so only forests carry
    genericity information.
    """
    e = linalg.as_matrix(e)
    n, d = e.shape
    pairs = list(itertools.combinations(range(n), 2))
    diffs = np.array([e[i] - e[j] for i, j in pairs])
    if diffs.size == 0:
        return
    norms = np.linalg.norm(diffs, axis=1)
    if (norms <= tol).any():
        i, j = pairs[int(np.argmin(norms))]
        raise ValueError(f"ranking enumeration: rows {i} and {j} coincide")
    dn = diffs / norms[:, None]
    k = min(d, len(pairs))
    for subset in itertools.combinations(range(len(pairs)), k):
        # union-find cycle test on the chosen edges
        parent = list(range(n))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        acyclic = True
        for idx in subset:
            a, b = pairs[idx]
            ra, rb = find(a), find(b)
            if ra == rb:
                acyclic = False
                break
            parent[ra] = rb
        if not acyclic:
            continue
        sub = dn[list(subset)]
        if k == d:
            bad = abs(np.linalg.det(sub)) <= tol
        else:
            bad = np.linalg.svd(sub, compute_uv=False)[-1] <= tol
        if bad:
            edges = [pairs[i] for i in subset]
            raise ValueError(
                f"ranking enumeration: difference vectors {edges} are "
                "numerically dependent"
            )


def _perceptron_feasible(constraints: np.ndarray, cap: int):
    """Batched perceptron over P constraint systems.

    constraints[p] is an (m, d) matrix of unit rows; system p is feasible
    when some h satisfies constraints[p] @ h > 0 strictly.  Each system
    gets at most `cap` updates; a found witness certifies feasibility, the
    cap only ever declares 'not found'.
    """
    c = np.asarray(constraints, dtype=np.float64)
    p, m, d = c.shape
    h = np.zeros((p, d))
    feasible = np.zeros(p, dtype=bool)
    active = np.arange(p)
    for _ in range(cap):
        if active.size == 0:
            break
        ca = c[active]
        marg = np.einsum("amd,ad->am", ca, h[active])
        done = marg.min(axis=1) > 0
        if done.any():
            feasible[active[done]] = True
            active = active[~done]
            ca = ca[~done]
            marg = marg[~done]
            if active.size == 0:
                break
        worst = marg.argmin(axis=1)
        h[active] += ca[np.arange(active.size), worst]
    if active.size:
        marg = np.einsum("amd,ad->am", c[active], h[active])
        feasible[active[marg.min(axis=1) > 0]] = True
    return feasible, h


@dataclass
class SignEnumeration:
    n: int
    dim: int
    patterns: list[tuple[int, ...]]  # entries +-1, sorted
    bound: int
    witnesses: dict[tuple[int, ...], np.ndarray]

    @property
    def count(self) -> int:
        return len(self.patterns)


def _sign_patterns_by_rays(en: np.ndarray, tol: float = 1e-12) -> set:
    """Enumerate arrangement chambers by probing around extreme rays.

    Every chamber of the central arrangement {x: e_i . x = 0} is a pointed
    cone (the rows span R^d), so it touches a ray cut out by some d-1 of
    the hyperplanes.  Probing both ray directions, displaced along the dual
    basis of those d-1 normals with every sign combination, visits every
    chamber; each probe's own sign vector is feasible by construction.
    """
    n, d = en.shape

    def pattern(h):
        s = en @ h
        if (np.abs(s) <= tol).any():
            return None
        return tuple(1 if x > 0 else -1 for x in s)

    out = set()
    if d == 1:
        for h in (np.array([1.0]), np.array([-1.0])):
            p = pattern(h)
            if p:
                out.add(p)
        return out
    if n < d:
        # rows are independent: every sign vector is realized exactly
        for y in itertools.product((1.0, -1.0), repeat=n):
            h, *_ = np.linalg.lstsq(en, np.array(y), rcond=None)
            p = pattern(h)
            if p:
                out.add(p)
        return out
    for subset in itertools.combinations(range(n), d - 1):
        b = en[list(subset)]
        v = np.linalg.svd(b)[2][-1]  # unit null direction of the d-1 rows
        others = [j for j in range(n) if j not in subset]
        gaps = np.abs(en[others] @ v)
        gap = gaps.min()
        if gap <= tol:
            continue  # ray lies on another hyperplane; genericity check failed
        dual = b.T @ np.linalg.inv(b @ b.T)  # columns w_i with b @ w_i = basis
        wmax = np.linalg.norm(dual, axis=0).max()
        delta = gap / (2.0 * (d - 1) * wmax)
        for tau in (1.0, -1.0):
            base = tau * v
            for sigmas in itertools.product((1.0, -1.0), repeat=d - 1):
                h = base + delta * (dual @ np.array(sigmas))
                p = pattern(h)
                if p:
                    out.add(p)
    return out


def enumerate_feasible_signs(
    e, cross_check: bool = True, cap_factor: int = 10_000
) -> SignEnumeration:
    """All sign patterns sign(E @ h) realized by some h, with witnesses.

    Tests each of the 2^n candidate patterns with a capped batched
    perceptron, then (by default) independently re-enumerates chambers
    geometrically; the two sets must agree or a RuntimeError is raised.
    """
    e = linalg.as_matrix(e)
    n, d = e.shape
    if n > MAX_SIGN_ROWS:
        raise ValueError(f"sign enumeration capped at {MAX_SIGN_ROWS} rows")
    check_general_position_signs(e)
    en = _unit_rows(e, 1e-9, "sign enumeration")

    candidates = np.array(list(itertools.product((1.0, -1.0), repeat=n)))
    systems = candidates[:, :, None] * en[None, :, :]
    feasible, h = _perceptron_feasible(systems, cap_factor * n * d)

    found = {
        tuple(int(x) for x in candidates[i]): h[i]
        for i in np.flatnonzero(feasible)
    }
    if cross_check:
        geometric = _sign_patterns_by_rays(en)
        if geometric != set(found):
            missing = geometric - set(found)
            extra = set(found) - geometric
            raise RuntimeError(
                "sign enumeration methods disagree: "
                f"perceptron missed {sorted(missing)}, extra {sorted(extra)}"
            )
    return SignEnumeration(
        n=n,
        dim=d,
        patterns=sorted(found),
        bound=feasible_sign_bound(n, d),
        witnesses=found,
    )


@dataclass
class RankingEnumeration:
    n: int
    dim: int
    rankings: list[tuple[int, ...]]  # permutations, best-scoring entity first
    witnesses: dict[tuple[int, ...], np.ndarray]

    @property
    def count(self) -> int:
        return len(self.rankings)


def _rankings_by_sampling(e: np.ndarray, n_probes: int, seed: int) -> set:
    rng = np.random.default_rng(seed)
    n, d = e.shape
    out = set()
    chunk = 100_000
    remaining = n_probes
    while remaining > 0:
        take = min(chunk, remaining)
        h = rng.standard_normal((take, d))
        scores = h @ e.T
        order = np.argsort(-scores, axis=1)
        out.update(map(tuple, order.tolist()))
        remaining -= take
    return out


def enumerate_feasible_rankings(
    e,
    cross_check: bool = True,
    cap_factor: int = 10_000,
    n_probes: int = 1_000_000,
    seed: int = 0,
) -> RankingEnumeration:
    """All total score orderings argsort(E @ h) realized by some h.

    Each of the n! candidate permutations becomes a chain of n-1 strict
    difference constraints, decided by the capped batched perceptron.  The
    default cross-check re-derives the set from a million random probe
    directions and must agree exactly.
    """
    e = linalg.as_matrix(e)
    n, d = e.shape
    if n > MAX_RANKING_ROWS:
        raise ValueError(f"ranking enumeration capped at {MAX_RANKING_ROWS} rows")
    if d > MAX_RANKING_DIM:
        raise ValueError(f"ranking enumeration capped at dim {MAX_RANKING_DIM}")
    check_general_position_rankings(e)

    perms = list(itertools.permutations(range(n)))
    systems = np.empty((len(perms), n - 1, d))
    for i, perm in enumerate(perms):
        idx = np.array(perm)
        diffs = e[idx[:-1]] - e[idx[1:]]
        systems[i] = diffs / np.linalg.norm(diffs, axis=1)[:, None]
    feasible, h = _perceptron_feasible(systems, cap_factor * n * d)
    found = {perms[i]: h[i] for i in np.flatnonzero(feasible)}

    if cross_check:
        sampled = _rankings_by_sampling(e, n_probes, seed)
        if sampled != set(found):
            missing = sampled - set(found)
            extra = set(found) - sampled
            raise RuntimeError(
                "ranking enumeration methods disagree: "
                f"perceptron missed {sorted(missing)}, sampling missed "
                f"{sorted(extra)}"
            )
    return RankingEnumeration(
        n=n, dim=d, rankings=sorted(found), witnesses=found
    )


# ---- rank obstructions and probes ----


@dataclass
class DrCheck:
    target_rank: int
    dim: int
    capacity: int  # d + 1: max rank a single softmax's log-probs can reach
    excluded: bool

    @property
    def verdict(self) -> str:
        return "excluded" if self.excluded else "not-excluded"


def dr_obstruction_check(target, dim: int) -> DrCheck:
    """Can a width-dim single-softmax model put its argmax-graph equal to
    the 0/1 target?  Exact rational rank > dim + 1 rules it out."""
    a = _validate_binary(target)
    if dim < 1:
        raise ValueError("dim must be positive")
    rank = linalg.exact_rank_binary(a)
    return DrCheck(
        target_rank=rank, dim=dim, capacity=dim + 1, excluded=rank > dim + 1
    )


@dataclass
class RankProbe:
    rank: int
    dim: int
    capacity: int
    n_queries: int
    rel_tol: float

    @property
    def within_single_softmax(self) -> bool:
        return self.rank <= self.capacity


def logprob_rank_probe(logp: np.ndarray, dim: int, rel_tol: float = 1e-8) -> RankProbe:
    """Numerical rank of a sampled log-probability matrix versus dim + 1.

    Needs at least dim + 3 rows so a rank above dim + 1 is observable with
    headroom; single-softmax models stay at or below the capacity, mixtures
    with k >= 2 can exceed it.
    """
    m = linalg.as_matrix(logp)
    if m.shape[0] < dim + 3:
        raise ValueError(f"need at least dim + 3 = {dim + 3} query rows")
    rank = linalg.numerical_rank(m, rel_tol)
    return RankProbe(
        rank=rank,
        dim=dim,
        capacity=dim + 1,
        n_queries=m.shape[0],
        rel_tol=rel_tol,
    )


def alr_transform(p, ref: int = 0) -> np.ndarray:
    """Additive log-ratio: ln(p_ij / p_i,ref) with the ref column dropped.

    Rows of a single softmax land in an affine subspace of dimension at
    most d under this map; rows must be strictly positive.
    """
    p = linalg.as_matrix(p)
    if not 0 <= ref < p.shape[1]:
        raise ValueError("ref column out of range")
    if (p <= 0).any():
        raise ValueError("ALR needs strictly positive entries")
    out = np.log(p / p[:, ref : ref + 1])
    return np.delete(out, ref, axis=1)


def sample_output_manifold(state_logp_fn, dim: int, n_samples: int, seed: int = 0):
    """Drive an output layer with Gaussian states; return (states, probs).

    state_logp_fn maps an (n, dim) state matrix to (n, n_entities) log
    probabilities.  The probability rows trace out the layer's reachable
    set; useful for rank and ALR probes on trained or random models.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    rng = np.random.default_rng(seed)
    states = rng.standard_normal((n_samples, dim))
    logp = np.asarray(state_logp_fn(states), dtype=np.float64)
    if logp.ndim != 2 or logp.shape[0] != n_samples:
        raise ValueError("state_logp_fn returned a misshaped matrix")
    return states, np.exp(logp)
