"""Executable capacity checks for the two ranking architectures.

Dual-encoder side: count distinct distance permutations that k sites in R^n can
induce (exact 1D bisector sweep; probed 2D lower bound) and compare against the
k^(2n) ceiling and the ln(k!)/(2 ln k) dimension threshold, below which no
embedding dimension can realize every ordering of k documents.

Autoregressive side: the docID token embedding matrix augmented with a ones
column, E' = [E | 1], governs everything. Full row rank means any strictly
positive next-token distribution and any token permutation is reachable by some
hidden vector; a rank deficit yields a witness h (h'E' = 0) whose sign pattern
names permutations and distributions that are provably unreachable.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.optimize import linprog

from . import diffcore as dc


@dataclass
class SiteConfig:
    """k document sites in R^n under the L2 metric."""

    sites: np.ndarray
    metric: str = "l2"

    def __post_init__(self):
        self.sites = np.asarray(self.sites, dtype=np.float64)
        if self.sites.ndim != 2:
            raise ValueError("sites must be a (k, n) array")
        if self.metric != "l2":
            raise ValueError("only the L2 metric is supported")
        k = self.sites.shape[0]
        for i in range(k):
            for j in range(i + 1, k):
                if np.allclose(self.sites[i], self.sites[j]):
                    raise ValueError(f"sites {i} and {j} coincide")


@dataclass
class CapacityReport:
    """Distance-permutation count against the k^(2n) ceiling and k! demand."""

    k: int
    n: int
    achieved: int
    exact: bool  # True when achieved is the true count, not a probe lower bound
    upper_bound: int  # k^(2n)
    total: int  # k!
    threshold: float  # ln(k!) / (2 ln k)
    verdict: str

    def __post_init__(self):
        if self.achieved > min(self.upper_bound, self.total):
            raise ValueError("achieved count exceeds a hard ceiling")

    def to_dict(self) -> Dict:
        return {"k": self.k, "n": self.n, "achieved": self.achieved,
                "exact": self.exact, "upper_bound": self.upper_bound,
                "total": self.total, "threshold": self.threshold,
                "verdict": self.verdict}


def de_dimension_bound(k: int) -> float:
    """ln(k!) / (2 ln k): any integer dimension strictly below it cannot rank k docs completely."""
    if k < 2:
        raise ValueError("need at least two documents")
    return math.lgamma(k + 1) / (2.0 * math.log(k))


def dimension_insufficient(n: int, k: int) -> bool:
    """True when dimension n is certified unable to solve the complete ranking task."""
    return n < de_dimension_bound(k)


def _ordering(point: np.ndarray, sites: np.ndarray) -> Tuple[int, ...]:
    d = np.linalg.norm(sites - point[None, :], axis=1)
    return tuple(int(i) for i in np.argsort(d, kind="stable"))


def count_distance_permutations(config: SiteConfig, resolution: int = 192,
                                probes: int = 4096, seed: int = 0) -> CapacityReport:
    """Count distinct sorted-by-distance orderings the sites can induce.

    n = 1 is exact: orderings only change across the C(k, 2) bisector points, so
    probing one query per open interval enumerates everything. n = 2 reports a
    probed lower bound (grid plus seeded random queries); it is exact whenever
    it reaches k!.
    """
    sites = config.sites
    k, n = sites.shape
    if n not in (1, 2):
        raise ValueError("desk scale covers n in {1, 2}")
    if k > 6:
        raise ValueError("desk scale covers k <= 6")
    found: Set[Tuple[int, ...]] = set()
    if n == 1:
        xs = sites[:, 0]
        bis = sorted({(xs[i] + xs[j]) / 2.0 for i in range(k) for j in range(i + 1, k)})
        queries = [bis[0] - 1.0, bis[-1] + 1.0]
        queries += [(a + b) / 2.0 for a, b in zip(bis, bis[1:]) if b > a]
        for q in queries:
            found.add(_ordering(np.array([q]), sites))
        exact = True
    else:
        lo = sites.min(axis=0)
        hi = sites.max(axis=0)
        span = max(float((hi - lo).max()), 1.0)
        lo = lo - 1.5 * span
        hi = hi + 1.5 * span
        for x in np.linspace(lo[0], hi[0], resolution):
            for y in np.linspace(lo[1], hi[1], resolution):
                found.add(_ordering(np.array([x, y]), sites))
        rng = np.random.default_rng(seed)
        for _ in range(probes):
            q = rng.uniform(lo, hi)
            found.add(_ordering(q, sites))
        exact = len(found) == math.factorial(k)
    upper = k ** (2 * n)
    total = math.factorial(k)
    verdict = ("complete-ranking-infeasible" if upper < total
               else "bound-permits-complete-ranking")
    return CapacityReport(k=k, n=n, achieved=len(found), exact=exact,
                          upper_bound=upper, total=total,
                          threshold=de_dimension_bound(k), verdict=verdict)


@dataclass
class BottleneckWitness:
    """Rank certificate for E' = [E | 1], or a null direction h with its sign split."""

    size: int  # |V_docIDs|
    rank_e: int
    rank_eprime: int
    full_rank: bool
    h: Optional[np.ndarray]  # unit vector with h' E' = 0, None when full rank
    pos: Tuple[int, ...]  # indices with h_i > 0
    neg: Tuple[int, ...]  # indices with h_i < 0
    residual: float  # max |h' E'| over columns

    def __post_init__(self):
        if not self.full_rank:
            if self.h is None or self.residual >= 1e-9:
                raise ValueError("witness must satisfy ||h'E'||_inf < 1e-9")
            if not self.pos or not self.neg:
                raise ValueError("witness sign partition must be nonempty on both sides")


def _augment(E: np.ndarray) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2:
        raise ValueError("embedding matrix must be 2-D")
    return np.concatenate([E, np.ones((E.shape[0], 1))], axis=1)


def _left_null_basis(M: np.ndarray) -> Tuple[int, np.ndarray]:
    """(rank, orthonormal basis of the left null space) via SVD."""
    u, s, _ = np.linalg.svd(M)
    tol = (s[0] if s.size else 0.0) * max(M.shape) * np.finfo(np.float64).eps
    rank = int((s > max(tol, 1e-12)).sum()) if s.size else 0
    return rank, u[:, rank:]


def bottleneck_witness(E: np.ndarray) -> BottleneckWitness:
    """Rank analysis of E' = [E | 1]; returns a null-space witness when deficient.

    The witness h is orthogonal to every column of E' (in particular to the
    ones column, so its positive and negative parts carry equal mass) and is
    sign-normalized to make its first nonzero entry positive.
    """
    E = np.asarray(E, dtype=np.float64)
    if not np.all(np.isfinite(E)):
        raise ValueError("embedding matrix must be finite")
    Ep = _augment(E)
    rank_e = int(np.linalg.matrix_rank(E, tol=None))
    rank_ep, null_basis = _left_null_basis(Ep)
    size = E.shape[0]
    if rank_ep == size:
        return BottleneckWitness(size=size, rank_e=rank_e, rank_eprime=rank_ep,
                                 full_rank=True, h=None, pos=(), neg=(), residual=0.0)
    h = null_basis[:, 0]
    nz = np.nonzero(np.abs(h) > 1e-12)[0]
    if h[nz[0]] < 0:
        h = -h
    h = h / np.linalg.norm(h)
    residual = float(np.abs(h @ Ep).max())
    return BottleneckWitness(
        size=size, rank_e=rank_e, rank_eprime=rank_ep, full_rank=False, h=h,
        pos=tuple(int(i) for i in np.nonzero(h > 1e-12)[0]),
        neg=tuple(int(i) for i in np.nonzero(h < -1e-12)[0]),
        residual=residual)


@dataclass
class PermutationScan:
    """Feasible strict token orderings for logits z = E phi (+ any shift)."""

    feasible: List[Tuple[int, ...]]
    count: int
    total: int
    exhaustive: bool  # False when the budget ran out (count is a lower bound)


def _ordering_feasible(E: np.ndarray, perm: Sequence[int], margin: float) -> bool:
    """LP feasibility of (E phi)_{perm[0]} > ... > (E phi)_{perm[-1]} with a margin."""
    diffs = np.array([E[perm[i]] - E[perm[i + 1]] for i in range(len(perm) - 1)])
    n = E.shape[1]
    res = linprog(c=np.zeros(n), A_ub=-diffs, b_ub=-np.full(len(diffs), margin),
                  bounds=[(None, None)] * n, method="highs")
    if res.status == 0:
        return True
    if res.status == 2:
        return False
    raise RuntimeError(f"LP solver returned status {res.status}: {res.message}")


def realizable_token_permutations(E: np.ndarray, budget: Optional[int] = None,
                                  margin: float = 1e-6) -> PermutationScan:
    """Enumerate which strict orderings over the |V| docID tokens are reachable.

    Each permutation is one linear feasibility problem over the hidden vector;
    strict inequalities are relaxed to the given margin (any strictly feasible
    ordering admits a margin by scaling). With a budget smaller than |V|! the
    scan stops early and reports a flagged lower bound.
    """
    E = np.asarray(E, dtype=np.float64)
    v = E.shape[0]
    if v > 5:
        raise ValueError("desk scale enumerates up to |V| = 5 tokens")
    total = math.factorial(v)
    feasible: List[Tuple[int, ...]] = []
    tested = 0
    exhaustive = True
    for perm in itertools.permutations(range(v)):
        if budget is not None and tested >= budget:
            exhaustive = False
            break
        tested += 1
        if _ordering_feasible(E, perm, margin):
            feasible.append(perm)
    return PermutationScan(feasible=feasible, count=len(feasible),
                           total=total, exhaustive=exhaustive)


@dataclass
class LogitSolveResult:
    """Outcome of matching softmax(E phi) to a target distribution."""

    feasible: bool
    phi: Optional[np.ndarray]
    sup_err: Optional[float]
    witness: Optional[BottleneckWitness]
    lhs: Optional[float] = None  # sum_{h_i > 0} h_i log p_i
    rhs: Optional[float] = None  # sum_{h_i < 0} |h_i| log p_i


def solve_logits_for_distribution(E: np.ndarray, p: np.ndarray) -> LogitSolveResult:
    """Find phi with softmax(E phi) = p, or certify impossibility.

    With rank(E') = |V| the log-target is solved by least squares on E' and the
    shift coordinate dropped. Otherwise any left-null component of log p yields
    a witness h whose induced equality sum_P h_i log p_i = sum_N |h_i| log p_i
    fails, proving p unreachable; if log p happens to lie in the span anyway,
    the solve still succeeds.
    """
    E = np.asarray(E, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] != E.shape[0]:
        raise ValueError("p must be a distribution over the token rows of E")
    if np.any(p <= 0):
        raise ValueError("p must be strictly positive")
    if abs(float(p.sum()) - 1.0) > 1e-9:
        raise ValueError("p must sum to 1")
    Ep = _augment(E)
    logp = np.log(p)
    witness = bottleneck_witness(E)
    _, null_basis = _left_null_basis(Ep)
    if null_basis.shape[1] > 0:
        coeffs = null_basis.T @ logp
        if np.abs(coeffs).max() > 1e-9:
            # the violating direction is itself a valid witness (h' E' = 0, h'1 = 0)
            h = null_basis @ coeffs
            h /= np.linalg.norm(h)
            nz = np.nonzero(np.abs(h) > 1e-12)[0]
            if h[nz[0]] < 0:
                h = -h
            viol = BottleneckWitness(
                size=E.shape[0], rank_e=witness.rank_e, rank_eprime=witness.rank_eprime,
                full_rank=False, h=h,
                pos=tuple(int(i) for i in np.nonzero(h > 1e-12)[0]),
                neg=tuple(int(i) for i in np.nonzero(h < -1e-12)[0]),
                residual=float(np.abs(h @ Ep).max()))
            lhs = float(sum(h[i] * logp[i] for i in viol.pos))
            rhs = float(sum(-h[i] * logp[i] for i in viol.neg))
            return LogitSolveResult(feasible=False, phi=None, sup_err=None,
                                    witness=viol, lhs=lhs, rhs=rhs)
    phi_aug, *_ = np.linalg.lstsq(Ep, logp, rcond=None)
    phi = phi_aug[:-1]
    sup_err = float(np.abs(dc.softmax_np(E @ phi) - p).max())
    return LogitSolveResult(feasible=True, phi=phi, sup_err=sup_err,
                            witness=witness if not witness.full_rank else None)
