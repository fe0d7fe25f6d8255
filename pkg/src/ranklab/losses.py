"""Rank-aware training losses.

The generalized token-item loss weights each (query, docID, rank) point by
lambda(r) and sums per-timestep cross entropies between the model's next-token
logits (teacher-forced along the docID's tokens plus the end token) and a
target distribution that is either one-hot or marginalized over the docID
prefix tree with per-rank mass 1/r^beta. The same lambda reweighting plugs
into the dual-encoder batch softmax loss and the cross-encoder pairwise
sigmoid loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from . import trie as trie_mod
from .data import AugmentedQuery, RankedExample, serialize_prompt
from .diffcore import ParamSet, Tensor
from .models import ArrModel

REWEIGHT_KINDS = ("fractional", "stepwise", "indicator", "constant")
TARGET_KINDS = ("one_hot", "trie_marginal")


@dataclass(frozen=True)
class ReweightSpec:
    """lambda(r) family: fractional 1/r^alpha, stepwise (n_q-r+1)/n_q, indicator r==1,
    or constant 1 (the plain next-token-prediction-over-all-items baseline)."""

    kind: str
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.kind not in REWEIGHT_KINDS:
            raise ValueError(f"unknown reweight kind {self.kind!r}")
        if self.kind == "fractional":
            if self.alpha is None or self.alpha <= 0:
                raise ValueError("fractional reweighting needs alpha > 0")
        elif self.alpha is not None:
            raise ValueError(f"alpha is only meaningful for fractional, not {self.kind!r}")


@dataclass(frozen=True)
class TargetSpec:
    """Per-timestep target family; combined=True applies the rank-r cutoff when
    building the trie for the rank-r item (item-and-token mode)."""

    kind: str
    beta: Optional[float] = None
    combined: bool = False

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        if self.kind == "trie_marginal":
            if self.beta is None or self.beta <= 0:
                raise ValueError("trie_marginal targets need beta > 0")
        else:
            if self.beta is not None:
                raise ValueError("beta is only meaningful for trie_marginal targets")
            if self.combined:
                raise ValueError("combined mode requires trie_marginal targets")


def lambda_weight(spec: ReweightSpec, r: int, n_q: int) -> float:
    """Rank weight lambda(r) for a query with n_q ranked documents."""
    if not 1 <= r <= n_q:
        raise ValueError(f"rank {r} out of range [1, {n_q}]")
    if spec.kind == "fractional":
        return float(r) ** (-spec.alpha)
    if spec.kind == "stepwise":
        return (n_q - r + 1) / n_q
    if spec.kind == "indicator":
        return 1.0 if r == 1 else 0.0
    return 1.0


def example_trie(model: ArrModel, example: RankedExample,
                 beta: float) -> trie_mod.DocIdTrie:
    """Prefix tree over the example's ranked docID tokenizations (negative excluded)."""
    tokenized = [(tuple(model.tokenizer.encode(d)), r + 1)
                 for r, d in enumerate(example.docids)]
    return trie_mod.build_trie(tokenized, beta=beta, eod_token=model.tokenizer.eod_id)


@dataclass
class TrainItem:
    """One teacher-forced (query, docID, rank) point, ready for the batched graph."""

    input_ids: np.ndarray  # prompt tokens + docID tokens
    loss_positions: np.ndarray  # positions whose logits are scored
    targets: np.ndarray  # (steps, V) target distributions, rows sum to 1
    lam: float
    rank: int


def build_train_item(model: ArrModel, example: RankedExample, r: int,
                     reweight: ReweightSpec, target: TargetSpec,
                     prompt: Optional[AugmentedQuery] = None,
                     cached_trie: Optional[trie_mod.DocIdTrie] = None) -> TrainItem:
    """Assemble tokens, scored positions, and per-timestep targets for one item."""
    if not 1 <= r <= example.n_q:
        raise ValueError(f"rank {r} out of range for example with n_q={example.n_q}")
    tok = model.tokenizer
    if prompt is None:
        prompt = serialize_prompt(example, example.prompt_seed)
    prompt_ids = tok.encode(prompt.text)
    docid_ids = tok.encode(example.docids[r - 1])
    if not docid_ids:
        raise ValueError("docID tokenizes to zero tokens")
    input_ids = np.array(prompt_ids + docid_ids, dtype=np.int64)
    steps = len(docid_ids) + 1  # final step predicts the end-of-docID token
    positions = np.arange(len(prompt_ids) - 1, len(prompt_ids) - 1 + steps)
    targets = np.zeros((steps, model.vocab_size))
    teacher = docid_ids + [tok.eod_id]
    if target.kind == "one_hot":
        targets[np.arange(steps), teacher] = 1.0
    else:
        trie = cached_trie or example_trie(model, example, beta=target.beta)
        r_min = r if target.combined else 1
        for t in range(steps):
            dist = trie_mod.target_distribution(trie, docid_ids[:t], r_min=r_min,
                                                beta=target.beta)
            for token_id, p in dist.probs.items():
                targets[t, token_id] = p
    lam = lambda_weight(reweight, r, example.n_q)
    return TrainItem(input_ids=input_ids, loss_positions=positions,
                     targets=targets, lam=lam, rank=r)


def stoical_batch_graph(model: ArrModel, leaves: Dict[str, Tensor],
                        items: Sequence[TrainItem]) -> Tensor:
    """Batch loss (1/B) * sum_i lambda(r_i) * sum_t CE(y_i_t, logits_i_t).

    Items are right-padded into one forward pass; causal attention keeps the
    padded tail from touching any scored position.
    """
    if not items:
        raise ValueError("empty batch")
    B = len(items)
    T = max(len(it.input_ids) for it in items)
    ids = np.full((B, T), model.tokenizer.pad_id, dtype=np.int64)
    flat_positions = []
    target_rows = []
    weight_rows = []
    for i, it in enumerate(items):
        ids[i, :len(it.input_ids)] = it.input_ids
        flat_positions.append(i * T + it.loss_positions)
        target_rows.append(it.targets)
        weight_rows.append(np.full(len(it.loss_positions), it.lam / B))
    logits = model.logits_graph(leaves, ids, flat_positions=np.concatenate(flat_positions))
    return dc.weighted_soft_ce(np.concatenate(target_rows, axis=0), logits,
                               np.concatenate(weight_rows))


@dataclass
class LossAndGrads:
    value: float
    grads: Dict[str, np.ndarray]


def stoical_loss(model: ArrModel, example: RankedExample, r: int,
                 reweight: ReweightSpec, target: TargetSpec,
                 prompt: Optional[AugmentedQuery] = None) -> LossAndGrads:
    """lambda(r) * summed teacher-forced cross entropy for one (example, rank) point.

    With one-hot targets this is exactly lambda(r) times the negative
    log-likelihood of the docID (end token included) given the augmented query.
    """
    item = build_train_item(model, example, r, reweight, target, prompt=prompt)
    grad_leaves = model.params.leaves(requires_grad=True)
    loss = stoical_batch_graph(model, grad_leaves, [item])
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in grad_leaves.items()}
    return LossAndGrads(value=loss.item(), grads=grads)


def docid_nll(model: ArrModel, example: RankedExample, r: int,
              prompt: Optional[AugmentedQuery] = None) -> float:
    """Independent oracle: -sum_t log p(token_t) over the docID tokens plus the end token."""
    from .models import forward_logits

    tok = model.tokenizer
    if prompt is None:
        prompt = serialize_prompt(example, example.prompt_seed)
    prompt_ids = tok.encode(prompt.text)
    docid_ids = tok.encode(example.docids[r - 1])
    ids = prompt_ids + docid_ids
    logits = forward_logits(model, ids)
    teacher = docid_ids + [tok.eod_id]
    total = 0.0
    for t, target_id in enumerate(teacher):
        row = dc.log_softmax_np(logits[len(prompt_ids) - 1 + t])
        total -= float(row[target_id])
    return total


def _lambdas(reweight: ReweightSpec, ranks: np.ndarray,
             n_qs: Optional[np.ndarray]) -> np.ndarray:
    ranks = np.asarray(ranks, dtype=np.int64)
    if reweight.kind == "stepwise":
        if n_qs is None:
            raise ValueError("stepwise reweighting needs per-item n_q values")
        n_qs = np.asarray(n_qs, dtype=np.int64)
    else:
        n_qs = np.maximum(ranks, 1) if n_qs is None else np.asarray(n_qs, dtype=np.int64)
    return np.array([lambda_weight(reweight, int(r), int(n))
                     for r, n in zip(ranks, n_qs)])


def de_batch_softmax_loss(q_embs, d_embs, ranks, tau: float,
                          reweight: ReweightSpec,
                          n_qs: Optional[np.ndarray] = None) -> Tensor:
    """Weighted in-batch softmax: -(1/B) sum_i lambda(r_i) log softmax(<q_i, d_.>/tau)_i.

    Accepts Tensors (differentiable) or plain arrays. With lambda == 1 this is
    the standard batch softmax loss.
    """
    q = q_embs if isinstance(q_embs, Tensor) else Tensor(q_embs)
    d = d_embs if isinstance(d_embs, Tensor) else Tensor(d_embs)
    if q.ndim != 2 or d.ndim != 2 or q.shape != d.shape:
        raise ValueError(f"q/d embedding shapes differ: {q.shape} vs {d.shape}")
    B = q.shape[0]
    if len(np.asarray(ranks)) != B:
        raise ValueError("ranks length must match the batch")
    if tau <= 0:
        raise ValueError("tau must be positive")
    lam = _lambdas(reweight, ranks, n_qs)
    scores = dc.mul(dc.matmul(q, dc.transpose(d, (1, 0))), 1.0 / tau)
    return dc.weighted_soft_ce(np.eye(B), scores, lam / B)


def ce_pairwise_loss(pos_scores, neg_scores, ranks,
                     reweight: ReweightSpec,
                     n_qs: Optional[np.ndarray] = None) -> Tensor:
    """Weighted pairwise sigmoid loss over positives and permutation-paired negatives.

    -sum_i [ (lambda(r_i)/sum_j lambda(r_j)) log sigmoid(pos_i)
             + (1/B) log sigmoid(-neg_i) ]
    """
    pos = pos_scores if isinstance(pos_scores, Tensor) else Tensor(pos_scores)
    neg = neg_scores if isinstance(neg_scores, Tensor) else Tensor(neg_scores)
    if pos.ndim != 1 or neg.ndim != 1 or pos.shape != neg.shape:
        raise ValueError(f"pos/neg score shapes differ: {pos.shape} vs {neg.shape}")
    B = pos.shape[0]
    if len(np.asarray(ranks)) != B:
        raise ValueError("ranks length must match the batch")
    lam = _lambdas(reweight, ranks, n_qs)
    lam_sum = lam.sum()
    if lam_sum == 0.0:
        raise ValueError("all lambda(r) are zero; no positive carries weight")
    pos_term = dc.tsum(dc.mul(dc.log_sigmoid(pos), lam / lam_sum))
    neg_term = dc.tsum(dc.mul(dc.log_sigmoid(dc.mul(neg, -1.0)), 1.0 / B))
    return dc.mul(dc.add(pos_term, neg_term), -1.0)
