"""Config-driven training runs, sweeps, and capacity suites.

A run is fully determined by (config, seed): the dataset regenerates from the
dataset spec's own seed, the run seed drives model init and batch order, and
evaluation is deterministic, so re-running a config reproduces its metrics
bit for bit. Results persist as append-only JSONL plus a CSV summary laid out
like the result tables (one row per method/temperature).

Config schema (JSON, see README for the full field list)::

    {
      "schema_version": 1,
      "dataset":   {"kind": "taxonomy" | "product" | "file", ...,  "seed": int},
      "model":     {"arch": "arr" | "de" | "ce", "dim": int, ...},
      "loss":      {"reweight": {"kind", "alpha"?}, "target": {"kind", "beta"?, "combined"?}},
      "optimizer": {"kind": "adam" | "sgd", "lr": float, ...},
      "train":     {"steps": int, "batch_size": int, "eval_examples": int?, "grad_clip": float},
      "eval":      {"k_list": [int, ...]},
      "sweep":     {"axis": "alpha" | "beta", "values": [...]}?,
      "capacity":  {"ks": [...], "ns": [...], "matrix_source": {...}?}?
    }
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import capacity as cap
from . import data as data_mod
from . import diffcore as dc
from .diffcore import ParamSet
from .evaluation import MetricsReport, arr_score_fn, evaluate_examples, pairwise_score_fn
from .losses import (
    ReweightSpec,
    TargetSpec,
    build_train_item,
    ce_pairwise_loss,
    de_batch_softmax_loss,
    example_trie,
    lambda_weight,
    stoical_batch_graph,
)
from .models import (
    ArrConfig,
    ArrModel,
    CeMlp,
    DeTable,
    build_tokenizer,
    ce_score,
    de_score,
    save_checkpoint,
)

SCHEMA_VERSION = 1


def _require(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)} in {where}")


@dataclass
class DatasetSpec:
    kind: str  # taxonomy | product | file
    seed: int = 0
    num_nodes: int = 200
    max_branching: int = 4
    num_queries: int = 128
    num_docs: int = 80
    embed_dim: int = 32
    dict_atoms: int = 100
    docs_per_query: Tuple[int, int] = (5, 30)
    path: Optional[str] = None
    taxonomy_path: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        _require(d, {f.name for f in cls.__dataclass_fields__.values()}, "dataset")
        if "kind" not in d:
            raise ValueError("dataset.kind is required")
        spec = cls(**{**d, "docs_per_query": tuple(d.get("docs_per_query", (5, 30)))})
        if spec.kind not in ("taxonomy", "product", "file"):
            raise ValueError(f"unknown dataset kind {spec.kind!r}")
        if spec.kind == "file" and not spec.path:
            raise ValueError("dataset.path is required for kind=file")
        return spec


@dataclass
class ModelSpec:
    arch: str = "arr"  # arr | de | ce
    dim: int = 64
    layers: int = 2
    heads: int = 2
    ff_mult: int = 4
    context: int = 512

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        _require(d, {f.name for f in cls.__dataclass_fields__.values()}, "model")
        spec = cls(**d)
        if spec.arch not in ("arr", "de", "ce"):
            raise ValueError(f"unknown arch {spec.arch!r}")
        return spec


@dataclass
class OptimizerSpec:
    kind: str
    lr: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def defaults_for(cls, arch: str) -> "OptimizerSpec":
        if arch == "de":
            return cls(kind="sgd", lr=1.0, momentum=0.9)
        if arch == "ce":
            return cls(kind="adam", lr=1e-3, weight_decay=1e-3)
        return cls(kind="adam", lr=3e-4)

    @classmethod
    def from_dict(cls, d: dict, arch: str) -> "OptimizerSpec":
        base = cls.defaults_for(arch)
        _require(d, {f.name for f in cls.__dataclass_fields__.values()}, "optimizer")
        merged = {**asdict(base), **d}
        spec = cls(**merged)
        if spec.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {spec.kind!r}")
        return spec


@dataclass
class TrainSpec:
    steps: int = 1000
    batch_size: int = 32
    eval_examples: Optional[int] = None
    grad_clip: float = 0.0

    @classmethod
    def from_dict(cls, d: dict, arch: str) -> "TrainSpec":
        _require(d, {f.name for f in cls.__dataclass_fields__.values()}, "train")
        merged = {"grad_clip": 1.0 if arch == "arr" else 0.0, **d}
        spec = cls(**merged)
        if spec.steps < 0 or spec.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        return spec


@dataclass
class EvalSpec:
    k_list: Tuple[int, ...] = (1, 2, 3, 4, 5)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSpec":
        _require(d, {"k_list"}, "eval")
        k_list = tuple(int(k) for k in d.get("k_list", (1, 2, 3, 4, 5)))
        if not k_list or any(k < 1 for k in k_list):
            raise ValueError("eval.k_list must contain positive integers")
        return cls(k_list=k_list)


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec
    model: ModelSpec
    loss_reweight: ReweightSpec
    loss_target: TargetSpec
    optimizer: OptimizerSpec
    train: TrainSpec
    eval: EvalSpec
    out_dir: str = "runs"
    sweep: Optional[dict] = None
    capacity: Optional[dict] = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        _require(d, {"schema_version", "dataset", "model", "loss", "optimizer",
                     "train", "eval", "out_dir", "sweep", "capacity"}, "config")
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {version!r}")
        model = ModelSpec.from_dict(d.get("model", {}))
        loss = d.get("loss", {})
        _require(loss, {"reweight", "target"}, "loss")
        reweight = ReweightSpec(**loss.get("reweight", {"kind": "constant"}))
        target = TargetSpec(**loss.get("target", {"kind": "one_hot"}))
        return cls(
            dataset=DatasetSpec.from_dict(d.get("dataset", {})),
            model=model,
            loss_reweight=reweight,
            loss_target=target,
            optimizer=OptimizerSpec.from_dict(d.get("optimizer", {}), model.arch),
            train=TrainSpec.from_dict(d.get("train", {}), model.arch),
            eval=EvalSpec.from_dict(d.get("eval", {})),
            out_dir=d.get("out_dir", "runs"),
            sweep=d.get("sweep"),
            capacity=d.get("capacity"),
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset": asdict(self.dataset),
            "model": asdict(self.model),
            "loss": {
                "reweight": {k: v for k, v in asdict(self.loss_reweight).items()
                             if v is not None},
                "target": {k: v for k, v in asdict(self.loss_target).items()
                           if v is not None},
            },
            "optimizer": asdict(self.optimizer),
            "train": asdict(self.train),
            "eval": {"k_list": list(self.eval.k_list)},
            "out_dir": self.out_dir,
            "sweep": self.sweep,
            "capacity": self.capacity,
        }

    @property
    def method(self) -> str:
        return f"{self.model.arch}:{self.loss_reweight.kind}:{self.loss_target.kind}"


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def config_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def build_dataset(spec: DatasetSpec) -> List[data_mod.RankedExample]:
    if spec.kind == "taxonomy":
        tax = data_mod.gen_taxonomy(spec.num_nodes, spec.max_branching, seed=spec.seed)
        return data_mod.make_taxonomy_dataset(tax, spec.num_queries, seed=spec.seed + 1)
    if spec.kind == "product":
        corpus = data_mod.make_product_corpus(spec.num_docs, dim=spec.embed_dim,
                                              n_atoms=spec.dict_atoms, seed=spec.seed)
        return data_mod.make_product_dataset(corpus, spec.num_queries,
                                             docs_per_query=spec.docs_per_query,
                                             seed=spec.seed + 1)
    return data_mod.load_examples(spec.path)


class SgdMomentum:
    def __init__(self, spec: OptimizerSpec):
        self.lr = spec.lr
        self.momentum = spec.momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads: Dict[str, np.ndarray]) -> None:
        for name, _ in params.items():
            g = grads[name]
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] -= self.lr * v


class Adam:
    def __init__(self, spec: OptimizerSpec):
        self.spec = spec
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ParamSet, grads: Dict[str, np.ndarray]) -> None:
        s = self.spec
        self.t += 1
        for name, p in params.items():
            g = grads[name]
            if s.weight_decay:
                g = g + s.weight_decay * p
            m = s.beta1 * self.m.get(name, np.zeros_like(p)) + (1 - s.beta1) * g
            v = s.beta2 * self.v.get(name, np.zeros_like(p)) + (1 - s.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - s.beta1 ** self.t)
            v_hat = v / (1 - s.beta2 ** self.t)
            params[name] -= s.lr * m_hat / (np.sqrt(v_hat) + s.eps)


def make_optimizer(spec: OptimizerSpec):
    return SgdMomentum(spec) if spec.kind == "sgd" else Adam(spec)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> None:
    if max_norm <= 0:
        return
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


@dataclass
class RunRecord:
    run_id: str
    config_hash: str
    seed: int
    steps: int
    loss_curve: List[float]
    metrics: MetricsReport
    wall_clock: float


class _ItemStream:
    """Deterministic epoch-reshuffled stream of item indices."""

    def __init__(self, n_items: int, rng: np.random.Generator):
        self.n = n_items
        self.rng = rng
        self.buffer: List[int] = []

    def take(self, count: int) -> List[int]:
        while len(self.buffer) < count:
            self.buffer.extend(int(i) for i in self.rng.permutation(self.n))
        out, self.buffer = self.buffer[:count], self.buffer[count:]
        return out


def _train_arr(config, examples, eval_examples, rng_model, rng_train):
    prompts = [data_mod.serialize_prompt(ex, ex.prompt_seed) for ex in examples]
    tok, docid_ids = build_tokenizer(
        [p.text for p in prompts],
        [d for ex in examples for d in ex.docids + [ex.negative]],
        digit_groups=any("," in d for ex in examples for d in ex.docids))
    ms = config.model
    model = ArrModel(tok, docid_ids,
                     ArrConfig(dim=ms.dim, layers=ms.layers, heads=ms.heads,
                               ff_mult=ms.ff_mult, context=ms.context),
                     seed=int(rng_model.integers(2**31 - 1)))
    items = []
    for ex, prompt in zip(examples, prompts):
        trie = (example_trie(model, ex, beta=config.loss_target.beta)
                if config.loss_target.kind == "trie_marginal" else None)
        for r in range(1, ex.n_q + 1):
            if lambda_weight(config.loss_reweight, r, ex.n_q) == 0.0:
                continue
            items.append(build_train_item(model, ex, r, config.loss_reweight,
                                          config.loss_target, prompt=prompt,
                                          cached_trie=trie))
    if not items:
        raise ValueError("loss configuration leaves no trainable items")
    stream = _ItemStream(len(items), rng_train)
    optimizer = make_optimizer(config.optimizer)
    losses = []
    for step in range(config.train.steps):
        batch = [items[i] for i in stream.take(config.train.batch_size)]
        leaves = model.params.leaves(requires_grad=True)
        loss = stoical_batch_graph(model, leaves, batch)
        if not np.isfinite(loss.item()):
            raise RuntimeError(f"non-finite loss {loss.item()!r} at step {step}")
        loss.backward()
        grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data)
                 for k, t in leaves.items()}
        clip_gradients(grads, config.train.grad_clip)
        optimizer.step(model.params, grads)
        model.params.validate_finite()
        losses.append(loss.item())
    metrics = evaluate_examples(arr_score_fn(model), eval_examples,
                                config.eval.k_list)
    return model, losses, metrics


def _pair_items(examples, reweight):
    items = []
    for ex in examples:
        for r in range(1, ex.n_q + 1):
            if lambda_weight(reweight, r, ex.n_q) == 0.0:
                continue
            items.append((ex.query, ex.docids[r - 1], r, ex.n_q))
    if not items:
        raise ValueError("loss configuration leaves no trainable items")
    return items


def _table_ids(examples):
    ids = []
    seen = set()
    for ex in examples:
        for x in [ex.query] + ex.docids + [ex.negative]:
            if x not in seen:
                seen.add(x)
                ids.append(x)
    return ids


def _train_de(config, examples, eval_examples, rng_model, rng_train):
    table = DeTable(_table_ids(examples), dim=config.model.dim,
                    seed=int(rng_model.integers(2**31 - 1)))
    items = _pair_items(examples, config.loss_reweight)
    stream = _ItemStream(len(items), rng_train)
    optimizer = make_optimizer(config.optimizer)
    losses = []
    tau = 0.05  # scoring temperature for the in-batch softmax
    for step in range(config.train.steps):
        batch = [items[i] for i in stream.take(config.train.batch_size)]
        q_idx = table.rows_for([b[0] for b in batch])
        d_idx = table.rows_for([b[1] for b in batch])
        ranks = np.array([b[2] for b in batch])
        n_qs = np.array([b[3] for b in batch])
        leaves = table.params.leaves(requires_grad=True)
        q = dc.gather_rows(leaves["table"], q_idx)
        d = dc.gather_rows(leaves["table"], d_idx)
        loss = de_batch_softmax_loss(q, d, ranks, tau, config.loss_reweight, n_qs=n_qs)
        if not np.isfinite(loss.item()):
            raise RuntimeError(f"non-finite loss {loss.item()!r} at step {step}")
        loss.backward()
        grads = {"table": leaves["table"].grad}
        clip_gradients(grads, config.train.grad_clip)
        optimizer.step(table.params, grads)
        table.project_rows()
        losses.append(loss.item())
    metrics = evaluate_examples(
        pairwise_score_fn(lambda q_, d_: de_score(table, q_, d_)),
        eval_examples, config.eval.k_list)
    return table, losses, metrics


def _train_ce(config, examples, eval_examples, rng_model, rng_train):
    ids = _table_ids(examples)
    table = DeTable(ids, dim=config.model.dim, seed=int(rng_model.integers(2**31 - 1)))
    mlp = CeMlp(config.model.dim, seed=int(rng_model.integers(2**31 - 1)))
    params = ParamSet({**{f"table/{k}": v for k, v in table.params.items()},
                       **{f"mlp/{k}": v for k, v in mlp.params.items()}})
    items = _pair_items(examples, config.loss_reweight)
    stream = _ItemStream(len(items), rng_train)
    optimizer = make_optimizer(config.optimizer)
    losses = []
    for step in range(config.train.steps):
        batch = [items[i] for i in stream.take(config.train.batch_size)]
        B = len(batch)
        rho = rng_train.permutation(B)
        q_idx = table.rows_for([b[0] for b in batch])
        d_idx = table.rows_for([b[1] for b in batch])
        ranks = np.array([b[2] for b in batch])
        n_qs = np.array([b[3] for b in batch])
        leaves = params.leaves(requires_grad=True)
        tbl = leaves["table/table"]
        mlp_leaves = {k.split("/", 1)[1]: v for k, v in leaves.items()
                      if k.startswith("mlp/")}
        q = dc.gather_rows(tbl, q_idx)
        d_pos = dc.gather_rows(tbl, d_idx)
        d_neg = dc.gather_rows(tbl, d_idx[rho])
        pos = mlp.scores_graph(mlp_leaves, dc.concat([q, d_pos], axis=-1))
        neg = mlp.scores_graph(mlp_leaves, dc.concat([q, d_neg], axis=-1))
        loss = ce_pairwise_loss(pos, neg, ranks, config.loss_reweight, n_qs=n_qs)
        if not np.isfinite(loss.item()):
            raise RuntimeError(f"non-finite loss {loss.item()!r} at step {step}")
        loss.backward()
        grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data)
                 for k, t in leaves.items()}
        clip_gradients(grads, config.train.grad_clip)
        optimizer.step(params, grads)
        losses.append(loss.item())
    # `params` shares storage with table.params/mlp.params, so both are trained

    def score(q_, d_):
        rows = table.rows_for([q_, d_])
        return ce_score(mlp, table.table[rows[0]], table.table[rows[1]])

    metrics = evaluate_examples(pairwise_score_fn(score), eval_examples,
                                config.eval.k_list)
    return (table, mlp), losses, metrics


def train(config: ExperimentConfig, seed: int = 0,
          out_root: Optional[str] = None) -> RunRecord:
    """Run one configured experiment; optionally persist under out_root/<run_id>/."""
    started = time.perf_counter()
    examples = build_dataset(config.dataset)
    n_eval = config.train.eval_examples or len(examples)
    eval_examples = examples[:n_eval]
    ss = np.random.SeedSequence(seed)
    rng_model, rng_train = (np.random.default_rng(s) for s in ss.spawn(2))
    trainer = {"arr": _train_arr, "de": _train_de, "ce": _train_ce}[config.model.arch]
    model, losses, metrics = trainer(config, examples, eval_examples,
                                     rng_model, rng_train)
    chash = config_hash(config)
    record = RunRecord(run_id=f"{chash[:10]}_s{seed}", config_hash=chash, seed=seed,
                       steps=config.train.steps, loss_curve=losses, metrics=metrics,
                       wall_clock=time.perf_counter() - started)
    if out_root is not None:
        persist_run(record, config, model, Path(out_root))
    return record


def metrics_row(config: ExperimentConfig, record: RunRecord) -> Dict[str, object]:
    row: Dict[str, object] = {
        "run_id": record.run_id,
        "method": config.method,
        "alpha": "" if config.loss_reweight.alpha is None else config.loss_reweight.alpha,
        "beta": "" if config.loss_target.beta is None else config.loss_target.beta,
    }
    row.update(record.metrics.as_row())
    return row


def _write_csv(path: Path, rows: List[Dict[str, object]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def persist_run(record: RunRecord, config: ExperimentConfig, model,
                out_root: Path) -> Path:
    out = out_root / record.run_id
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "record.jsonl", "w") as fh:
        for step, loss in enumerate(record.loss_curve):
            fh.write(json.dumps({"step": step, "loss": loss}) + "\n")
        fh.write(json.dumps({"result": metrics_row(config, record),
                             "seed": record.seed, "wall_clock": record.wall_clock,
                             "config_hash": record.config_hash}, sort_keys=True) + "\n")
    _write_csv(out / "metrics.csv", [metrics_row(config, record)])
    with open(out / "curves.dat", "w") as fh:
        fh.write("# step loss\n")
        for step, loss in enumerate(record.loss_curve):
            fh.write(f"{step} {loss!r}\n")
    with open(out / "config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    if isinstance(model, ArrModel):
        save_checkpoint(model, out / "checkpoint.npz")
    elif isinstance(model, DeTable):
        np.savez(out / "checkpoint.npz", table=model.table,
                 ids=np.array(model.ids, dtype=object))
    else:
        table, mlp = model
        arrays = {f"mlp/{k}": v for k, v in mlp.params.items()}
        np.savez(out / "checkpoint.npz", table=table.table,
                 ids=np.array(table.ids, dtype=object), **arrays)
    return out


def sweep(base: ExperimentConfig, axis: str, values: Sequence[float], seed: int = 0,
          out_root: Optional[str] = None) -> List[Dict[str, object]]:
    """One training run per axis value over the identical dataset and seed."""
    if axis not in ("alpha", "beta"):
        raise ValueError(f"sweep axis must be alpha or beta, not {axis!r}")
    if not values:
        raise ValueError("sweep over an empty value list")
    if axis == "alpha" and base.loss_reweight.kind != "fractional":
        raise ValueError("alpha sweeps need fractional reweighting")
    if axis == "beta" and base.loss_target.kind != "trie_marginal":
        raise ValueError("beta sweeps need trie_marginal targets")
    rows = []
    for value in values:
        cfg = copy.deepcopy(base)
        if axis == "alpha":
            cfg.loss_reweight = ReweightSpec(kind="fractional", alpha=float(value))
        else:
            cfg.loss_target = TargetSpec(kind="trie_marginal", beta=float(value),
                                         combined=base.loss_target.combined)
        record = train(cfg, seed=seed, out_root=out_root)
        rows.append(metrics_row(cfg, record))
    if out_root is not None:
        _write_csv(Path(out_root) / f"sweep_{axis}.csv", rows)
    return rows


def run_capacity_suite(config: Optional[dict] = None, seed: int = 0,
                       out_dir: Optional[str] = None) -> dict:
    """DE counting reports plus autoregressive rank/witness reports for a grid.

    The embedding matrix source may be random (default) or a trained
    checkpoint's docID token embedding rows.
    """
    cfg = config or {}
    _require(cfg, {"ks", "ns", "arr_sizes", "trials", "matrix_source"}, "capacity")
    ks = list(cfg.get("ks", [2, 3, 4]))
    ns = list(cfg.get("ns", [1, 2]))
    arr_sizes = list(cfg.get("arr_sizes", [3, 4]))
    trials = int(cfg.get("trials", 10))
    rng = np.random.default_rng(seed)
    de_reports = []
    for k in ks:
        for n in ns:
            sites = rng.normal(size=(k, n))
            rep = cap.count_distance_permutations(cap.SiteConfig(sites), seed=seed)
            de_reports.append(rep.to_dict())
    arr_reports = []
    for v in arr_sizes:
        for n in ns + [v]:
            for _ in range(trials):
                E = rng.normal(size=(v, n))
                w = cap.bottleneck_witness(E)
                scan = cap.realizable_token_permutations(E)
                arr_reports.append({
                    "v": v, "n": n, "rank_eprime": w.rank_eprime,
                    "full_rank": w.full_rank, "feasible": scan.count,
                    "total": scan.total,
                    "iff_holds": (scan.count == scan.total) == w.full_rank,
                })
    source = cfg.get("matrix_source")
    source_report = None
    if source:
        if source.get("kind") == "checkpoint":
            from .models import load_checkpoint

            model = load_checkpoint(source["path"])
            rows = sorted(model.docid_token_ids)
            E = model.params["tok_emb"][rows]
        else:
            E = rng.normal(size=(int(source["v"]), int(source["n"])))
        w = cap.bottleneck_witness(E)
        source_report = {"shape": list(E.shape), "rank_e": w.rank_e,
                         "rank_eprime": w.rank_eprime, "full_rank": w.full_rank}
        if E.shape[0] <= 5:
            scan = cap.realizable_token_permutations(E)
            source_report["feasible"] = scan.count
            source_report["total"] = scan.total
    bundle = {"de": de_reports, "arr": arr_reports, "matrix_source": source_report,
              "all_iff_hold": all(r["iff_holds"] for r in arr_reports)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "capacity.json", "w") as fh:
            json.dump(bundle, fh, indent=2, sort_keys=True)
        with open(out / "capacity.txt", "w") as fh:
            fh.write(format_capacity_table(bundle))
    return bundle


def format_capacity_table(bundle: dict) -> str:
    lines = ["k  n  achieved  exact  k^(2n)  k!  threshold  verdict"]
    for r in bundle["de"]:
        lines.append(f"{r['k']}  {r['n']}  {r['achieved']:8d}  {str(r['exact']):5s}"
                     f"  {r['upper_bound']:6d}  {r['total']:3d}  {r['threshold']:.4f}"
                     f"  {r['verdict']}")
    ok = sum(r["iff_holds"] for r in bundle["arr"])
    lines.append(f"arr permutation-vs-rank iff: {ok}/{len(bundle['arr'])} matrices consistent")
    if bundle.get("matrix_source"):
        lines.append(f"matrix source: {bundle['matrix_source']}")
    return "\n".join(lines) + "\n"
