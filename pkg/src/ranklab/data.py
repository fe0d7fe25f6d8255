"""Synthetic ranking datasets and prompt serialization.

Two construction-faithful generators:
  * taxonomy-style: a random rooted tree; a query node's relevant docIDs are
    its proper ancestors below the root, nearest first, plus one off-path
    negative.
  * product-style: random unit-vector documents coded into 3-sparse "i,j,k"
    docIDs via orthogonal matching pursuit over a fixed dictionary; a query's
    relevant documents are its nearest docs by inner product.

Everything regenerates byte-identically from (config, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

PROMPT_DELIM = "|"
_PROMPT_RESERVED = ("|", ";")


@dataclass
class Taxonomy:
    """Rooted tree over string node ids; parent maps every non-root to its parent."""

    nodes: List[str]
    parent: Dict[str, str]
    root: str

    def __post_init__(self):
        self._children: Dict[str, List[str]] = {n: [] for n in self.nodes}
        for child, par in self.parent.items():
            self._children[par].append(child)
        self.validate()

    def validate(self) -> None:
        node_set = set(self.nodes)
        if self.root not in node_set:
            raise ValueError("root is not a node")
        if set(self.parent) != node_set - {self.root}:
            raise ValueError("every non-root node needs exactly one parent")
        for node in self.nodes:
            if node == self.root:
                continue
            seen = {node}
            cur = node
            while cur != self.root:
                cur = self.parent[cur]
                if cur in seen:
                    raise ValueError(f"cycle through {node!r}")
                seen.add(cur)

    def children(self, node: str) -> List[str]:
        return self._children[node]

    def ancestors(self, node: str) -> List[str]:
        """Proper ancestors from the immediate parent up to and including the root."""
        out = []
        cur = node
        while cur != self.root:
            cur = self.parent[cur]
            out.append(cur)
        return out

    def depth(self, node: str) -> int:
        return len(self.ancestors(node))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for node in self.nodes:
                if node != self.root:
                    fh.write(f"{node}\t{self.parent[node]}\n")

    @classmethod
    def load(cls, path) -> "Taxonomy":
        parent: Dict[str, str] = {}
        nodes: List[str] = []
        seen = set()
        with open(path) as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                child, par = line.split("\t")
                if child in parent:
                    raise ValueError(f"node {child!r} listed with two parents")
                parent[child] = par
                for n in (child, par):
                    if n not in seen:
                        seen.add(n)
                        nodes.append(n)
        roots = [n for n in nodes if n not in parent]
        if len(roots) != 1:
            raise ValueError(f"expected exactly one root, found {roots}")
        return cls(nodes=nodes, parent=parent, root=roots[0])


@dataclass
class RankedExample:
    """A query, its relevance-ordered docIDs (rank 1 first), and one off-list negative."""

    query: str
    docids: List[str]
    negative: str
    prompt_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.docids) < 1:
            raise ValueError("ranked list must contain at least one docID")
        if len(set(self.docids)) != len(self.docids):
            raise ValueError("ranked docIDs must be distinct")
        if self.negative in self.docids:
            raise ValueError("negative docID must not appear in the ranked list")

    @property
    def n_q(self) -> int:
        return len(self.docids)


@dataclass
class SparseCode:
    """Indices and coefficients of a greedy sparse code, ordered by descending |coef|."""

    indices: Tuple[int, ...]
    coefficients: Tuple[float, ...]

    def __post_init__(self):
        if len(self.indices) != len(self.coefficients):
            raise ValueError("indices and coefficients must have equal length")
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("sparse-code indices must be distinct")
        mags = [abs(c) for c in self.coefficients]
        if any(a < b - 1e-12 for a, b in zip(mags, mags[1:])):
            raise ValueError("entries must be ordered by descending |coefficient|")

    def docid(self) -> str:
        return ",".join(str(i) for i in self.indices)


@dataclass
class AugmentedQuery:
    """Serialized prompt: the query plus its shuffled docID set."""

    text: str
    docids_shuffled: List[str]
    seed: int


def gen_taxonomy(num_nodes: int, max_branching: int, seed: int) -> Taxonomy:
    """Random rooted tree: node i attaches to a uniform random node with spare capacity.

    Node ids are distinct random lowercase triples (word-like, no systematic
    shared prefixes, mirroring how noun labels tokenize apart early).
    """
    if num_nodes < 2:
        raise ValueError(f"num_nodes must be >= 2, got {num_nodes}")
    if max_branching < 1:
        raise ValueError(f"max_branching must be >= 1, got {max_branching}")
    if num_nodes > 17000:
        raise ValueError("taxonomy generator is desk-scale: num_nodes <= 17000")
    rng = np.random.default_rng(seed)
    names: List[str] = []
    seen = set()
    while len(names) < num_nodes:
        name = "".join(chr(97 + int(c)) for c in rng.integers(26, size=3))
        if name not in seen:
            seen.add(name)
            names.append(name)
    parent: Dict[str, str] = {}
    open_slots = [0]  # indices of nodes with < max_branching children
    child_count = np.zeros(num_nodes, dtype=np.int64)
    for i in range(1, num_nodes):
        j = int(rng.integers(len(open_slots)))
        p = open_slots[j]
        parent[names[i]] = names[p]
        child_count[p] += 1
        if child_count[p] >= max_branching:
            open_slots.pop(j)
        open_slots.append(i)
    return Taxonomy(nodes=names, parent=parent, root=names[0])


def eligible_query_nodes(tax: Taxonomy) -> List[str]:
    """Nodes whose ranked list is non-empty: depth >= 2 (parent is not the root)."""
    return [n for n in tax.nodes if tax.depth(n) >= 2]


def make_ranking_example(tax: Taxonomy, node: str, seed: int) -> RankedExample:
    """Hypernym-path example: ancestors below the root, nearest first, plus a negative.

    The negative is drawn uniformly from nodes that are neither the query nor on
    its ancestor path (the root is on the path, so it is excluded too).
    """
    if node == tax.root:
        raise ValueError("the root node cannot be a query")
    path = tax.ancestors(node)  # ends with the root
    ranked = path[:-1]
    if not ranked:
        raise ValueError(f"node {node!r} is at depth 1; its ranked list would be empty")
    rng = np.random.default_rng(seed)
    excluded = set(path) | {node}
    pool = [n for n in tax.nodes if n not in excluded]
    if not pool:
        raise ValueError("no candidate negatives outside the ancestor path")
    negative = pool[int(rng.integers(len(pool)))]
    prompt_seed = int(rng.integers(2**31 - 1))
    return RankedExample(query=node, docids=ranked, negative=negative,
                         prompt_seed=prompt_seed)


def omp_sparse_code(v: np.ndarray, atoms: np.ndarray, k_nonzero: int) -> SparseCode:
    """Greedy orthogonal matching pursuit against unit-norm dictionary rows.

    Repeats k_nonzero times: pick the atom most correlated with the residual,
    re-solve least squares on the selected support. Rank-deficient supports fall
    back to the minimum-norm solution (lstsq).
    """
    v = np.asarray(v, dtype=np.float64)
    atoms = np.asarray(atoms, dtype=np.float64)
    if atoms.ndim != 2 or v.shape != (atoms.shape[1],):
        raise ValueError(f"shape mismatch: v {v.shape} vs atoms {atoms.shape}")
    if k_nonzero < 1 or k_nonzero > atoms.shape[0]:
        raise ValueError(f"k_nonzero must be in [1, {atoms.shape[0]}]")
    norms = np.linalg.norm(atoms, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("dictionary atoms must be unit-norm")
    support: List[int] = []
    residual = v.copy()
    coef = np.zeros(0)
    for _ in range(k_nonzero):
        mag = np.abs(atoms @ residual)
        mag[support] = -1.0  # never reselect an atom
        support.append(int(np.argmax(mag)))
        sub = atoms[support].T  # (dim, |support|)
        coef, *_ = np.linalg.lstsq(sub, v, rcond=None)
        residual = v - sub @ coef
    order = np.argsort(-np.abs(coef), kind="stable")
    return SparseCode(indices=tuple(int(support[i]) for i in order),
                      coefficients=tuple(float(coef[i]) for i in order))


def random_dictionary(n_atoms: int, dim: int, seed: int) -> np.ndarray:
    """Random unit-norm atoms, one per row."""
    rng = np.random.default_rng(seed)
    atoms = rng.normal(size=(n_atoms, dim))
    return atoms / np.linalg.norm(atoms, axis=1, keepdims=True)


def serialize_prompt(example: RankedExample, seed: int) -> AugmentedQuery:
    """Fixed plain-text template: ``q:<query>;d:<id>|<id>|...;a:``

    The docID set (ranked list plus the negative) is shuffled with the given
    seed. docIDs containing the delimiter or the field separator are rejected.
    """
    docids = list(example.docids) + [example.negative]
    for d in docids + [example.query]:
        if any(ch in d for ch in _PROMPT_RESERVED):
            raise ValueError(f"docID/query {d!r} contains a reserved prompt character")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(docids))
    shuffled = [docids[i] for i in order]
    text = f"q:{example.query};d:{PROMPT_DELIM.join(shuffled)};a:"
    return AugmentedQuery(text=text, docids_shuffled=shuffled, seed=seed)


def make_taxonomy_dataset(tax: Taxonomy, num_queries: int, seed: int) -> List[RankedExample]:
    """Sample query nodes (without replacement while possible) into examples."""
    eligible = eligible_query_nodes(tax)
    if not eligible:
        raise ValueError("taxonomy has no nodes of depth >= 2")
    ss = np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss.spawn(1)[0])
    if num_queries <= len(eligible):
        picks = list(rng.permutation(len(eligible))[:num_queries])
    else:
        picks = list(rng.integers(len(eligible), size=num_queries))
    child_seeds = ss.spawn(len(picks))
    out = []
    for idx, cs in zip(picks, child_seeds):
        sub = int(np.random.default_rng(cs).integers(2**31 - 1))
        out.append(make_ranking_example(tax, eligible[int(idx)], seed=sub))
    return out


@dataclass
class ProductCorpus:
    """Documents as unit vectors plus their sparse-code docIDs."""

    embeddings: np.ndarray  # (num_docs, dim)
    docids: List[str]
    dictionary: np.ndarray  # (n_atoms, dim)


def make_product_corpus(num_docs: int, dim: int = 32, n_atoms: int = 100,
                        k_nonzero: int = 3, seed: int = 0) -> ProductCorpus:
    """Random unit documents with OMP docIDs; collisions resampled until unique."""
    rng = np.random.default_rng(seed)
    atoms = random_dictionary(n_atoms, dim, seed=int(rng.integers(2**31 - 1)))
    embeddings = np.zeros((num_docs, dim))
    docids: List[str] = []
    used = set()
    for i in range(num_docs):
        while True:
            v = rng.normal(size=dim)
            v /= np.linalg.norm(v)
            docid = omp_sparse_code(v, atoms, k_nonzero).docid()
            if docid not in used:
                break
        used.add(docid)
        embeddings[i] = v
        docids.append(docid)
    return ProductCorpus(embeddings=embeddings, docids=docids, dictionary=atoms)


def make_product_dataset(corpus: ProductCorpus, num_queries: int,
                         docs_per_query: Tuple[int, int] = (5, 30),
                         seed: int = 0,
                         return_query_vectors: bool = False):
    """Queries are random unit vectors; relevance is the inner product with documents."""
    lo, hi = docs_per_query
    if not (1 <= lo <= hi):
        raise ValueError(f"bad docs_per_query range {docs_per_query}")
    if hi >= len(corpus.docids):
        raise ValueError("docs_per_query upper bound must leave room for a negative")
    rng = np.random.default_rng(seed)
    dim = corpus.embeddings.shape[1]
    width = max(3, len(str(num_queries - 1)))
    out = []
    qvecs = []
    for qi in range(num_queries):
        q = rng.normal(size=dim)
        q /= np.linalg.norm(q)
        qvecs.append(q)
        n_q = int(rng.integers(lo, hi + 1))
        sims = corpus.embeddings @ q
        order = np.lexsort((corpus.docids, -sims))  # ties broken by docid
        ranked = [corpus.docids[i] for i in order[:n_q]]
        rest = order[n_q:]
        negative = corpus.docids[rest[int(rng.integers(len(rest)))]]
        out.append(RankedExample(query=f"q{qi:0{width}d}", docids=ranked,
                                 negative=negative,
                                 prompt_seed=int(rng.integers(2**31 - 1))))
    if return_query_vectors:
        return out, np.array(qvecs)
    return out


def save_examples(examples: Iterable[RankedExample], path) -> None:
    """JSON Lines: one example per line with query/docids/negative/prompt_seed."""
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps({"query": ex.query, "docids": ex.docids,
                                 "negative": ex.negative,
                                 "prompt_seed": ex.prompt_seed},
                                sort_keys=True) + "\n")


def load_examples(path) -> List[RankedExample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            blob = json.loads(line)
            out.append(RankedExample(query=blob["query"], docids=list(blob["docids"]),
                                     negative=blob["negative"],
                                     prompt_seed=int(blob["prompt_seed"])))
    return out
