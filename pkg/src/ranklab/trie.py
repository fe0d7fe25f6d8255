"""Prefix tree over tokenized docIDs with rank-marginal target distributions.

Each docID node carries the rank r of its docID and contributes mu(r) = 1/r^beta.
The (pre-normalized) score of any node is the sum of mu over the docID nodes in
its subtree, so a partially generated prefix can be scored by marginalizing over
everything it still governs. Normalization happens at lookup, which lets one
built trie answer queries for any prefix, any rank cutoff, and any beta.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

Token = Hashable

EOD = "<eod>"


def mu_score(rank: int, beta: float) -> float:
    """Per-docID mass 1/r^beta."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    return float(rank) ** (-float(beta))


@dataclass
class TrieNode:
    token: Optional[Token]  # None at the root (epsilon)
    rank: Optional[int] = None  # set iff this node completes a docID
    children: Dict[Token, "TrieNode"] = field(default_factory=dict)
    subtree_ranks: Tuple[int, ...] = ()  # ranks of all docID nodes governed, incl. self
    marginal: float = 0.0  # cached sum of mu over subtree_ranks at build beta

    @property
    def is_docid(self) -> bool:
        return self.rank is not None


@dataclass
class TargetDistribution:
    """Probability per continuation token (including the end-of-docID token)."""

    probs: Dict[Token, float]
    timestep: int

    def __post_init__(self):
        total = sum(self.probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"target distribution sums to {total!r}, not 1")
        if any(p < 0 for p in self.probs.values()):
            raise ValueError("target distribution has negative entries")

    def support(self) -> set:
        return {t for t, p in self.probs.items() if p > 0}


class DocIdTrie:
    """Trie over tokenized docIDs; immutable after build."""

    def __init__(self, root: TrieNode, beta: float, n_docids: int, eod_token: Token = EOD):
        self.root = root
        self.beta = beta
        self.n_docids = n_docids
        self.eod_token = eod_token

    def node_at(self, prefix: Sequence[Token]) -> TrieNode:
        node = self.root
        for tok in prefix:
            if tok not in node.children:
                raise KeyError(f"prefix {list(prefix)!r} is not a path in the trie")
            node = node.children[tok]
        return node

    def docids(self) -> List[Tuple[Tuple[Token, ...], int]]:
        """All (token path, rank) pairs, in rank order."""
        out = []

        def walk(node, path):
            if node.is_docid:
                out.append((tuple(path), node.rank))
            for tok in sorted(node.children, key=repr):
                walk(node.children[tok], path + [tok])

        walk(self.root, [])
        out.sort(key=lambda pr: pr[1])
        return out

    def to_json(self) -> str:
        def encode(node):
            d = {"token": node.token}
            if node.rank is not None:
                d["rank"] = node.rank
            d["children"] = [encode(node.children[t]) for t in sorted(node.children, key=repr)]
            return d

        return json.dumps({"beta": self.beta, "eod_token": self.eod_token,
                           "root": encode(self.root)}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DocIdTrie":
        blob = json.loads(text)
        trie = cls.__new__(cls)
        trie.beta = blob["beta"]
        trie.eod_token = blob["eod_token"]

        def decode(d):
            node = TrieNode(token=d["token"], rank=d.get("rank"))
            for cd in d["children"]:
                child = decode(cd)
                node.children[child.token] = child
            return node

        trie.root = decode(blob["root"])
        _finalize(trie.root, trie.beta)
        trie.n_docids = len(trie.root.subtree_ranks)
        return trie


def _finalize(node: TrieNode, beta: float) -> None:
    """Fill cached subtree ranks and marginals bottom-up."""
    ranks: List[int] = [node.rank] if node.is_docid else []
    for child in node.children.values():
        _finalize(child, beta)
        ranks.extend(child.subtree_ranks)
    node.subtree_ranks = tuple(sorted(ranks))
    node.marginal = sum(mu_score(r, beta) for r in node.subtree_ranks)


def build_trie(docids: Sequence[Tuple[Sequence[Token], int]], beta: float,
               eod_token: Token = EOD) -> DocIdTrie:
    """Build the prefix tree over (token sequence, rank) pairs.

    Ranks must form a permutation of 1..n. A docID that is a strict prefix of
    another becomes a nonterminal docID node.
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if not docids:
        raise ValueError("cannot build a trie over zero docIDs")
    ranks = sorted(r for _, r in docids)
    if ranks != list(range(1, len(docids) + 1)):
        raise ValueError(f"ranks must be a permutation of 1..{len(docids)}, got {ranks}")
    seen = set()
    root = TrieNode(token=None)
    for tokens, rank in docids:
        tokens = tuple(tokens)
        if not tokens:
            raise ValueError("empty docID token sequence")
        if tokens in seen:
            raise ValueError(f"duplicate docID token sequence {tokens!r}")
        seen.add(tokens)
        node = root
        for tok in tokens:
            if tok == eod_token:
                raise ValueError("docID tokens may not contain the end-of-docID token")
            node = node.children.setdefault(tok, TrieNode(token=tok))
        node.rank = rank
    _finalize(root, beta)
    return DocIdTrie(root, beta=beta, n_docids=len(docids), eod_token=eod_token)


def valid_continuations(trie: DocIdTrie, prefix: Sequence[Token], r_min: int = 1) -> set:
    """Child tokens of the prefix node, plus the end-of-docID token at docID nodes.

    With r_min > 1 the trie is viewed as if built over docIDs of rank >= r_min
    only (continuations that lead to no surviving docID disappear).
    """
    node = trie.node_at(prefix)
    if not any(r >= r_min for r in node.subtree_ranks):
        raise KeyError(f"prefix {list(prefix)!r} has no docIDs of rank >= {r_min}")
    out = set()
    for tok, child in node.children.items():
        if any(r >= r_min for r in child.subtree_ranks):
            out.add(tok)
    if node.is_docid and node.rank >= r_min:
        out.add(trie.eod_token)
    return out


def target_distribution(trie: DocIdTrie, prefix: Sequence[Token], r_min: int = 1,
                        beta: Optional[float] = None) -> TargetDistribution:
    """Rank-marginal target over the valid continuations of a prefix.

    Each continuation token gets mass proportional to the marginal score of its
    child node, computed over docIDs of rank >= r_min with weights 1/r^beta; the
    end-of-docID token gets the prefix node's own mu(r). A complete docID with
    no extensions yields a point mass on the end-of-docID token.

    Masses are evaluated relative to the best surviving rank r0 (weights
    (r0/r)^beta), which leaves the normalized distribution unchanged but keeps
    large betas from underflowing the whole numerator: the limit is then an
    exact one-hot instead of a division by zero.
    """
    if r_min < 1:
        raise ValueError(f"r_min must be >= 1, got {r_min}")
    beta = trie.beta if beta is None else beta
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    node = trie.node_at(prefix)
    survivors = [r for r in node.subtree_ranks if r >= r_min]
    if not survivors:
        raise KeyError(f"prefix {list(prefix)!r} has no continuations of rank >= {r_min}")
    r0 = min(survivors)

    def scaled_mass(ranks: Iterable[int]) -> float:
        return sum((r0 / r) ** beta for r in ranks if r >= r_min)

    scores: Dict[Token, float] = {}
    for tok, child in node.children.items():
        s = scaled_mass(child.subtree_ranks)
        if s > 0.0:
            scores[tok] = s
    if node.is_docid and node.rank >= r_min:
        scores[trie.eod_token] = (r0 / node.rank) ** beta
    total = sum(scores.values())  # >= 1: the r0 docID contributes weight 1 somewhere
    return TargetDistribution(probs={t: s / total for t, s in scores.items()},
                              timestep=len(prefix) + 1)
