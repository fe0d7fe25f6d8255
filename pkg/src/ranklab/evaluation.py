"""Decoding and ranking metrics.

Scores are mean per-token log-probabilities of a docID (end token included)
under the model given the augmented query. Beam search expands only trie-valid
tokens but keeps the unconstrained log-softmax as the score, so a beam as wide
as the corpus reproduces exhaustive scoring exactly. Ties anywhere break by
lexicographic docID order so evaluation is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .data import AugmentedQuery, RankedExample, serialize_prompt
from .models import ArrModel, batched_forward_logits
from .trie import DocIdTrie, valid_continuations


@dataclass
class ScoredDocId:
    docid: str
    score: float  # mean per-token log-probability, <= 0

    def __post_init__(self):
        if self.score > 1e-12:
            raise ValueError(f"log-probability score must be <= 0, got {self.score}")


def score_docid(model: ArrModel, prompt: AugmentedQuery, docid: str) -> ScoredDocId:
    """Mean log-probability of the docID's tokens (plus the end token) after the prompt."""
    return score_docids(model, prompt, [docid])[0]


def score_docids(model: ArrModel, prompt: AugmentedQuery,
                 docids: Sequence[str]) -> List[ScoredDocId]:
    """Batched scoring of several candidate docIDs against one prompt."""
    tok = model.tokenizer
    prompt_ids = tok.encode(prompt.text)
    seqs = []
    teachers = []
    for d in docids:
        ids = tok.encode(d)
        if not ids:
            raise ValueError(f"docID {d!r} tokenizes to zero tokens")
        if len(prompt_ids) + len(ids) > model.config.context:
            raise ValueError(f"prompt+docID {d!r} exceeds the context budget")
        seqs.append(prompt_ids + ids)
        teachers.append(ids + [tok.eod_id])
    out = []
    for d, seq, teacher, logits in zip(docids, seqs, teachers,
                                       batched_forward_logits(model, seqs)):
        total = 0.0
        for t, target_id in enumerate(teacher):
            row = dc.log_softmax_np(logits[len(prompt_ids) - 1 + t])
            total += float(row[target_id])
        out.append(ScoredDocId(docid=d, score=total / len(teacher)))
    return out


@dataclass
class _Beam:
    tokens: Tuple[int, ...]
    sum_logprob: float
    node: object  # TrieNode at this prefix; None once the end token is emitted

    @property
    def mean(self) -> float:
        return self.sum_logprob / max(len(self.tokens), 1)


def beam_search(model: ArrModel, prompt: AugmentedQuery, trie: DocIdTrie,
                k: int) -> List[ScoredDocId]:
    """Top-k complete docIDs by mean token log-prob, expanded along trie paths only.

    Each round grows every live prefix by its trie-valid tokens (the end token
    counts as a terminal growth at docID nodes) and keeps the k best candidates
    by mean-so-far, so beam width 1 is exactly greedy constrained decoding.
    Completed docIDs are rescored through the canonical scorer, which makes a
    beam as wide as the corpus agree with exhaustive scoring bit for bit. If k
    exceeds the number of docIDs in the trie, all of them come back, ranked.
    """
    if k < 1:
        raise ValueError("beam width must be >= 1")
    tok = model.tokenizer
    prompt_ids = tok.encode(prompt.text)
    live = [_Beam(tokens=(), sum_logprob=0.0, node=trie.root)]
    completed: List[str] = []
    max_len = max(len(path) for path, _ in trie.docids())
    for _ in range(max_len + 1):
        if not live:
            break
        seqs = [prompt_ids + list(b.tokens) for b in live]
        logits = batched_forward_logits(model, seqs)
        grown: List[_Beam] = []
        for b, lg in zip(live, logits):
            row = dc.log_softmax_np(lg[-1])
            if b.node.is_docid:
                grown.append(_Beam(tokens=b.tokens + (tok.eod_id,),
                                   sum_logprob=b.sum_logprob + float(row[tok.eod_id]),
                                   node=None))
            for token_id, child in b.node.children.items():
                grown.append(_Beam(tokens=b.tokens + (token_id,),
                                   sum_logprob=b.sum_logprob + float(row[token_id]),
                                   node=child))
        grown.sort(key=lambda b: (-b.mean, b.tokens))
        kept = grown[:k]
        live = [b for b in kept if b.node is not None]
        completed.extend(tok.decode(b.tokens[:-1]) for b in kept if b.node is None)
    rescored = score_docids(model, prompt, completed)
    rescored.sort(key=lambda s: (-s.score, s.docid))
    return rescored[:k]


def cvr_violation(pos_scores: Sequence[float], neg_score: float) -> bool:
    """True iff any relevant docID scores strictly below the negative."""
    if len(pos_scores) == 0:
        raise ValueError("need at least one positive score")
    return min(pos_scores) < neg_score


def ranked_docids(scores: Mapping[str, float]) -> List[str]:
    """DocIDs by descending score; ties broken by lexicographic docID order."""
    return sorted(scores, key=lambda d: (-scores[d], d))


def ndcg(example: RankedExample, predicted_scores: Mapping[str, float]) -> float:
    """nDCG on the 0-100 scale with log-scale gold gains.

    Gold gains are ln(n_q + 2 - i) for the rank-i docID and 0 for the negative;
    positions are discounted by 1/log2(position + 1).
    """
    docids = example.docids + [example.negative]
    missing = [d for d in docids if d not in predicted_scores]
    if missing:
        raise ValueError(f"predicted scores missing for {missing}")
    n_q = example.n_q
    gains = {d: math.log(n_q + 2 - (i + 1)) for i, d in enumerate(example.docids)}
    gains[example.negative] = 0.0
    order = ranked_docids({d: predicted_scores[d] for d in docids})
    dcg = sum(gains[d] / math.log2(pos + 2) for pos, d in enumerate(order))
    ideal = sum(gains[d] / math.log2(pos + 2) for pos, d in enumerate(docids))
    return 100.0 * dcg / ideal


def recall_at_k(gold: Sequence[str], predicted: Sequence[str], k: int) -> float:
    """|gold[:k] intersect predicted[:k]| / k."""
    if not 1 <= k <= len(gold):
        raise ValueError(f"k={k} out of range for a list of {len(gold)}")
    return len(set(gold[:k]) & set(predicted[:k])) / k


@dataclass
class MetricsReport:
    """Aggregated metrics: CVR and nDCG on the 0-100 scale, R@k in [0, 1]."""

    cvr: float
    ndcg: float
    r_at: Dict[int, float]
    n_examples: int

    def as_row(self) -> Dict[str, float]:
        row = {"cvr": self.cvr, "ndcg": self.ndcg}
        for k in sorted(self.r_at):
            row[f"r_at_{k}"] = self.r_at[k]
        return row


ScoreFn = Callable[[RankedExample], Dict[str, float]]


def evaluate_examples(score_fn: ScoreFn, examples: Sequence[RankedExample],
                      k_list: Sequence[int]) -> MetricsReport:
    """Run one scoring pass per example and aggregate CVR, nDCG, and R@k.

    R@k averages over the examples with at least k candidates (ranked list plus
    negative); at least one example must qualify for every configured k.
    """
    if not examples:
        raise ValueError("no examples to evaluate")
    violations = 0
    ndcg_total = 0.0
    r_sums = {k: 0.0 for k in k_list}
    r_counts = {k: 0 for k in k_list}
    for ex in examples:
        scores = score_fn(ex)
        pos = [scores[d] for d in ex.docids]
        violations += bool(cvr_violation(pos, scores[ex.negative]))
        ndcg_total += ndcg(ex, scores)
        gold = ex.docids + [ex.negative]
        predicted = ranked_docids({d: scores[d] for d in gold})
        for k in k_list:
            if k <= len(gold):
                r_sums[k] += recall_at_k(gold, predicted, k)
                r_counts[k] += 1
    for k in k_list:
        if r_counts[k] == 0:
            raise ValueError(f"no example has {k} candidates; cannot report R@{k}")
    return MetricsReport(
        cvr=100.0 * violations / len(examples),
        ndcg=ndcg_total / len(examples),
        r_at={k: r_sums[k] / r_counts[k] for k in k_list},
        n_examples=len(examples),
    )


def arr_score_fn(model: ArrModel) -> ScoreFn:
    """Exhaustive mean-log-prob scoring of every candidate docID of an example."""

    def score(ex: RankedExample) -> Dict[str, float]:
        prompt = serialize_prompt(ex, ex.prompt_seed)
        cands = ex.docids + [ex.negative]
        return {s.docid: s.score for s in score_docids(model, prompt, cands)}

    return score


def pairwise_score_fn(score: Callable[[str, str], float]) -> ScoreFn:
    """Adapter for DE/CE scorers that map (query id, doc id) to a scalar."""

    def fn(ex: RankedExample) -> Dict[str, float]:
        return {d: score(ex.query, d) for d in ex.docids + [ex.negative]}

    return fn
