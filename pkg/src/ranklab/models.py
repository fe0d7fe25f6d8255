"""Scoring architectures: toy causal transformer, lookup-table DE, MLP CE.

The transformer ties its output projection to the token embedding matrix
(logits = E @ phi), which is what makes the bottleneck-capacity experiments
on the docID sub-embedding meaningful. Tokenization is character-level with
optional whole-token digit groups so numeric "i,j,k" docIDs stay short.
"""

from __future__ import annotations

import io
import json
import math
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import diffcore as dc
from .diffcore import ParamSet, Tensor

PAD_TOKEN = "<pad>"
EOD_TOKEN = "<eod>"
_NEG_INF = -1e30


class Tokenizer:
    """Greedy longest-match tokenizer over single characters plus registered multi-char tokens."""

    def __init__(self, tokens: Sequence[str]):
        if tokens[0] != PAD_TOKEN or tokens[1] != EOD_TOKEN:
            raise ValueError("token 0 must be <pad> and token 1 <eod>")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens")
        self._multi = sorted((t for t in self.tokens[2:] if len(t) > 1),
                             key=len, reverse=True)
        self.pad_id = 0
        self.eod_id = 1

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> List[int]:
        ids = []
        i = 0
        while i < len(text):
            for tok in self._multi:
                if text.startswith(tok, i):
                    ids.append(self.index[tok])
                    i += len(tok)
                    break
            else:
                ch = text[i]
                if ch not in self.index:
                    raise ValueError(f"character {ch!r} is not in the vocabulary")
                ids.append(self.index[ch])
                i += 1
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.tokens[i] for i in ids)


def build_tokenizer(texts: Iterable[str], docids: Iterable[str],
                    digit_groups: bool = False) -> Tuple[Tokenizer, Set[int]]:
    """Vocabulary from a corpus; returns (tokenizer, docID subvocabulary ids incl. eod).

    With digit_groups=True every maximal digit run inside a docID becomes one
    token ("25" in "25,36,39"), which keeps numeric docIDs short.
    """
    docids = list(docids)
    chars = set()
    for t in texts:
        chars.update(t)
    for d in docids:
        chars.update(d)
    vocab = [PAD_TOKEN, EOD_TOKEN] + sorted(chars)
    if digit_groups:
        groups = set()
        for d in docids:
            groups.update(m.group(0) for m in re.finditer(r"\d+", d))
        vocab += sorted(g for g in groups if len(g) > 1)
    tok = Tokenizer(vocab)
    docid_ids: Set[int] = {tok.eod_id}
    for d in docids:
        docid_ids.update(tok.encode(d))
    return tok, docid_ids


@dataclass
class ArrConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 2
    ff_mult: int = 4
    context: int = 512
    ln_eps: float = 1e-5
    init_scale: float = 0.02

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")


class ArrModel:
    """Toy causal transformer with tied token embeddings and learned positions."""

    def __init__(self, tokenizer: Tokenizer, docid_token_ids: Set[int],
                 config: ArrConfig, seed: int = 0):
        if not docid_token_ids:
            raise ValueError("docID subvocabulary must be nonempty")
        self.tokenizer = tokenizer
        self.config = config
        self.docid_token_ids = set(int(i) for i in docid_token_ids)
        v, n = len(tokenizer), config.dim
        rng = np.random.default_rng(seed)
        s = config.init_scale
        arrays = {
            "tok_emb": rng.normal(scale=s, size=(v, n)),
            "pos_emb": rng.normal(scale=s, size=(config.context, n)),
        }
        for l in range(config.layers):
            p = f"block{l}."
            arrays[p + "ln1_g"] = np.ones(n)
            arrays[p + "ln1_b"] = np.zeros(n)
            for name in ("wq", "wk", "wv", "wo"):
                arrays[p + name] = rng.normal(scale=s, size=(n, n))
            for name in ("bq", "bk", "bv", "bo"):
                arrays[p + name] = np.zeros(n)
            arrays[p + "ln2_g"] = np.ones(n)
            arrays[p + "ln2_b"] = np.zeros(n)
            arrays[p + "w_ff1"] = rng.normal(scale=s, size=(n, config.ff_mult * n))
            arrays[p + "b_ff1"] = np.zeros(config.ff_mult * n)
            arrays[p + "w_ff2"] = rng.normal(scale=s, size=(config.ff_mult * n, n))
            arrays[p + "b_ff2"] = np.zeros(n)
        if config.layers > 0:
            arrays["lnf_g"] = np.ones(n)
            arrays["lnf_b"] = np.zeros(n)
        self.params = ParamSet(arrays)

    @property
    def vocab_size(self) -> int:
        return len(self.tokenizer)

    def docid_mask(self) -> np.ndarray:
        mask = np.zeros(self.vocab_size, dtype=bool)
        mask[sorted(self.docid_token_ids)] = True
        return mask

    def hidden_graph(self, leaves: Dict[str, Tensor], ids: np.ndarray) -> Tensor:
        """Final hidden states (B, T, n) for right-padded token ids (B, T)."""
        cfg = self.config
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError("ids must be (batch, time)")
        B, T = ids.shape
        if T > cfg.context:
            raise ValueError(f"sequence length {T} exceeds context {cfg.context}")
        if ids.max(initial=0) >= self.vocab_size or ids.min(initial=0) < 0:
            raise ValueError("token id out of range")
        n, H = cfg.dim, cfg.heads
        hd = n // H
        x = dc.add(dc.gather_rows(leaves["tok_emb"], ids),
                   dc.gather_rows(leaves["pos_emb"], np.arange(T)))
        causal = np.triu(np.full((T, T), _NEG_INF), k=1)
        for l in range(cfg.layers):
            p = f"block{l}."
            h = dc.layer_norm(x, leaves[p + "ln1_g"], leaves[p + "ln1_b"], cfg.ln_eps)

            def heads_of(letter):
                proj = dc.add(dc.matmul(h, leaves[p + "w" + letter]), leaves[p + "b" + letter])
                return dc.transpose(dc.reshape(proj, (B, T, H, hd)), (0, 2, 1, 3))

            q = heads_of("q")
            k = heads_of("k")
            v = heads_of("v")
            att = dc.add(dc.mul(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))),
                                1.0 / math.sqrt(hd)), causal)
            a = dc.softmax(att)
            o = dc.reshape(dc.transpose(dc.matmul(a, v), (0, 2, 1, 3)), (B, T, n))
            x = dc.add(x, dc.add(dc.matmul(o, leaves[p + "wo"]), leaves[p + "bo"]))
            h2 = dc.layer_norm(x, leaves[p + "ln2_g"], leaves[p + "ln2_b"], cfg.ln_eps)
            f = dc.relu(dc.add(dc.matmul(h2, leaves[p + "w_ff1"]), leaves[p + "b_ff1"]))
            f = dc.add(dc.matmul(f, leaves[p + "w_ff2"]), leaves[p + "b_ff2"])
            x = dc.add(x, f)
        if cfg.layers > 0:
            x = dc.layer_norm(x, leaves["lnf_g"], leaves["lnf_b"], cfg.ln_eps)
        # zero-layer models keep logits = E @ (token + positional embedding) exact
        return x

    def logits_graph(self, leaves: Dict[str, Tensor], ids: np.ndarray,
                     flat_positions: Optional[np.ndarray] = None) -> Tensor:
        """Tied-embedding logits; optionally gathered at flat (b * T + t) positions."""
        B, T = np.asarray(ids).shape
        h = self.hidden_graph(leaves, ids)
        if flat_positions is not None:
            h = dc.gather_rows(dc.reshape(h, (B * T, self.config.dim)),
                               np.asarray(flat_positions, dtype=np.int64))
        return dc.matmul(h, dc.transpose(leaves["tok_emb"], (1, 0)))


def forward_logits(model: ArrModel, context: Sequence[int]) -> np.ndarray:
    """Logits over the vocabulary at every position of one context, no gradients."""
    ids = np.asarray(context, dtype=np.int64)[None, :]
    leaves = model.params.leaves(requires_grad=False)
    return model.logits_graph(leaves, ids).data[0]


def batched_forward_logits(model: ArrModel, sequences: Sequence[Sequence[int]]) -> List[np.ndarray]:
    """Per-sequence logits for a right-padded batch; pads never leak left (causal)."""
    lens = [len(s) for s in sequences]
    T = max(lens)
    ids = np.full((len(sequences), T), model.tokenizer.pad_id, dtype=np.int64)
    for i, s in enumerate(sequences):
        ids[i, :len(s)] = s
    leaves = model.params.leaves(requires_grad=False)
    out = model.logits_graph(leaves, ids).data
    return [out[i, :lens[i]] for i in range(len(sequences))]


def constrained_logits(logits: np.ndarray, valid: Iterable[int]) -> np.ndarray:
    """Softmax restricted to the valid token set; exactly zero elsewhere."""
    valid = sorted(set(int(v) for v in valid))
    if not valid:
        raise ValueError("valid token set is empty")
    z = np.asarray(logits, dtype=np.float64)
    sub = z[valid]
    p = np.zeros_like(z)
    p[valid] = dc.softmax_np(sub)
    return p


def save_checkpoint(model: ArrModel, path) -> None:
    """Single-file npz: parameter arrays plus a JSON meta record."""
    meta = {
        "tokens": model.tokenizer.tokens,
        "docid_token_ids": sorted(model.docid_token_ids),
        "config": {
            "dim": model.config.dim, "layers": model.config.layers,
            "heads": model.config.heads, "ff_mult": model.config.ff_mult,
            "context": model.config.context, "ln_eps": model.config.ln_eps,
            "init_scale": model.config.init_scale,
        },
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> ArrModel:
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["meta"]).decode())
        model = ArrModel(Tokenizer(meta["tokens"]), set(meta["docid_token_ids"]),
                         ArrConfig(**meta["config"]), seed=0)
        for k in model.params.names():
            model.params[k] = blob[f"param/{k}"]
    return model


class DeTable:
    """Dual-encoder embedding table over atomic query/doc ids; rows live on the unit sphere."""

    def __init__(self, ids: Sequence[str], dim: int, seed: int = 0):
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate ids in the embedding table")
        self.ids = list(ids)
        self.row = {x: i for i, x in enumerate(self.ids)}
        rng = np.random.default_rng(seed)
        table = rng.normal(size=(len(self.ids), dim))
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        self.params = ParamSet({"table": table})

    @property
    def table(self) -> np.ndarray:
        return self.params["table"]

    def rows_for(self, keys: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.row[k] for k in keys], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"unknown id {exc.args[0]!r}") from None

    def project_rows(self) -> None:
        """Project every row back to the unit L2 sphere (run after each optimizer step)."""
        t = self.params["table"]
        t /= np.linalg.norm(t, axis=1, keepdims=True)


def de_score(table: DeTable, q: str, d: str) -> float:
    """Inner product of the two table rows."""
    rows = table.rows_for([q, d])
    return float(table.table[rows[0]] @ table.table[rows[1]])


class CeMlp:
    """Cross-encoder MLP: concat(q, d) -> three ReLU layers of width 2n -> scalar."""

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        w = 2 * dim
        rng = np.random.default_rng(seed)
        std = math.sqrt(1.0 / w)  # variance 1/(2n)
        self.params = ParamSet({
            "w1": rng.normal(scale=std, size=(w, w)), "b1": np.zeros(w),
            "w2": rng.normal(scale=std, size=(w, w)), "b2": np.zeros(w),
            "w3": rng.normal(scale=std, size=(w, w)), "b3": np.zeros(w),
            "w_out": rng.normal(scale=std, size=(w, 1)), "b_out": np.zeros(1),
        })

    def scores_graph(self, leaves: Dict[str, Tensor], x: Tensor) -> Tensor:
        """Scalar scores (M,) for stacked 2n-dim inputs (M, 2n)."""
        h = x
        for l in ("1", "2", "3"):
            h = dc.relu(dc.add(dc.matmul(h, leaves["w" + l]), leaves["b" + l]))
        out = dc.add(dc.matmul(h, leaves["w_out"]), leaves["b_out"])
        return dc.reshape(out, (out.shape[0],))


def ce_score(mlp: CeMlp, q_emb: np.ndarray, d_emb: np.ndarray) -> float:
    """Relevance of one (query, document) embedding pair."""
    q_emb = np.asarray(q_emb, dtype=np.float64)
    d_emb = np.asarray(d_emb, dtype=np.float64)
    if q_emb.shape != (mlp.dim,) or d_emb.shape != (mlp.dim,):
        raise ValueError(f"embeddings must have dimension {mlp.dim}")
    x = Tensor(np.concatenate([q_emb, d_emb])[None, :])
    leaves = mlp.params.leaves(requires_grad=False)
    return float(mlp.scores_graph(leaves, x).data[0])
