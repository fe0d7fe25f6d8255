import itertools

import numpy as np
import pytest

from ranklab.data import (
    RankedExample,
    SparseCode,
    Taxonomy,
    eligible_query_nodes,
    gen_taxonomy,
    load_examples,
    make_product_corpus,
    make_product_dataset,
    make_ranking_example,
    make_taxonomy_dataset,
    omp_sparse_code,
    random_dictionary,
    save_examples,
    serialize_prompt,
)


def chain_taxonomy(depth):
    """Chain n000 -> n001 -> ... of the given depth, plus one off-path leaf."""
    names = [f"n{i:03d}" for i in range(depth + 1)]
    parent = {names[i]: names[i - 1] for i in range(1, depth + 1)}
    parent["nx"] = names[0]
    return Taxonomy(nodes=names + ["nx"], parent=parent, root=names[0])


class TestTaxonomy:
    def test_smallest_tree(self):
        tax = gen_taxonomy(2, 3, seed=0)
        assert len(tax.nodes) == 2
        assert tax.parent[tax.nodes[1]] == tax.root

    def test_determinism(self):
        a = gen_taxonomy(200, 5, seed=7)
        b = gen_taxonomy(200, 5, seed=7)
        assert a.nodes == b.nodes and a.parent == b.parent

    def test_all_paths_reach_root(self):
        tax = gen_taxonomy(150, 4, seed=3)
        for node in tax.nodes:
            path = tax.ancestors(node)
            if node != tax.root:
                assert path[-1] == tax.root

    def test_branching_cap_respected(self):
        tax = gen_taxonomy(300, 2, seed=1)
        for node in tax.nodes:
            assert len(tax.children(node)) <= 2

    def test_invalid_sizes_rejected(self):
        with pytest.raises(ValueError):
            gen_taxonomy(1, 3, seed=0)
        with pytest.raises(ValueError):
            gen_taxonomy(5, 0, seed=0)

    def test_edge_list_round_trip(self, tmp_path):
        tax = gen_taxonomy(60, 3, seed=2)
        path = tmp_path / "tax.tsv"
        tax.save(path)
        clone = Taxonomy.load(path)
        assert clone.parent == tax.parent and clone.root == tax.root

    def test_cycle_detected_on_load(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("a\tb\nb\ta\nc\ta\n")
        with pytest.raises(ValueError):
            Taxonomy.load(path)


class TestRankingExample:
    def test_deer_style_chain(self):
        # depth-14 chain: 13 ranked docIDs, nearest ancestor first, root excluded
        tax = chain_taxonomy(14)
        ex = make_ranking_example(tax, "n014", seed=0)
        assert len(ex.docids) == 13
        assert ex.docids[0] == "n013"
        assert ex.docids[-1] == "n001"
        assert "n000" not in ex.docids

    def test_depth_two_single_docid(self):
        tax = chain_taxonomy(3)
        ex = make_ranking_example(tax, "n002", seed=1)
        assert ex.docids == ["n001"]

    def test_root_and_depth_one_rejected(self):
        tax = chain_taxonomy(3)
        with pytest.raises(ValueError):
            make_ranking_example(tax, "n000", seed=0)
        with pytest.raises(ValueError):
            make_ranking_example(tax, "n001", seed=0)

    def test_negative_never_on_ancestor_path(self):
        tax = gen_taxonomy(120, 3, seed=5)
        nodes = eligible_query_nodes(tax)
        for seed in range(1000):
            node = nodes[seed % len(nodes)]
            ex = make_ranking_example(tax, node, seed=seed)
            path = set(tax.ancestors(node))
            assert ex.negative not in path
            assert ex.negative != node

    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            RankedExample(query="q", docids=[], negative="x")
        with pytest.raises(ValueError):
            RankedExample(query="q", docids=["a", "a"], negative="x")
        with pytest.raises(ValueError):
            RankedExample(query="q", docids=["a"], negative="a")


class TestOmp:
    def test_atom_recovery(self):
        atoms = random_dictionary(100, 32, seed=0)
        code = omp_sparse_code(atoms[25], atoms, k_nonzero=3)
        assert code.indices[0] == 25
        assert code.coefficients[0] == pytest.approx(1.0, abs=1e-9)
        assert abs(code.coefficients[1]) < 1e-9 and abs(code.coefficients[2]) < 1e-9
        assert code.docid().startswith("25,")

    def test_docid_string_format(self):
        code = SparseCode(indices=(25, 36, 39), coefficients=(0.9, -0.5, 0.1))
        assert code.docid() == "25,36,39"

    def test_descending_magnitude_enforced(self):
        with pytest.raises(ValueError):
            SparseCode(indices=(1, 2), coefficients=(0.1, 0.9))

    def test_matches_own_support_least_squares(self):
        # brute-force oracle: residual of every C(6,3) support
        rng = np.random.default_rng(4)
        atoms = random_dictionary(6, 4, seed=1)
        v = rng.normal(size=4)
        code = omp_sparse_code(v, atoms, k_nonzero=3)

        def subset_residual(idxs):
            sub = atoms[list(idxs)].T
            coef, *_ = np.linalg.lstsq(sub, v, rcond=None)
            return float(np.linalg.norm(v - sub @ coef))

        omp_res = subset_residual(code.indices)
        resids = {s: subset_residual(s) for s in itertools.combinations(range(6), 3)}
        assert omp_res <= min(resids.values()) + 1e-9 or any(
            omp_res <= r + 1e-12 for r in resids.values())
        assert omp_res == pytest.approx(resids[tuple(sorted(code.indices))], abs=1e-12)

    def test_optimal_for_orthogonal_atoms(self):
        # 4 orthonormal atoms in 4-d: OMP picks the top-3 |<v, atom>| support
        atoms = np.eye(4)
        rng = np.random.default_rng(6)
        for _ in range(20):
            v = rng.normal(size=4)
            code = omp_sparse_code(v, atoms, k_nonzero=3)
            best = tuple(np.argsort(-np.abs(v), kind="stable")[:3])
            assert set(code.indices) == set(int(i) for i in best)

    def test_rank_deficient_support_falls_back(self):
        # duplicate atom rows make the selected support rank-deficient
        base = np.zeros((3, 4))
        base[0, 0] = 1.0
        base[1, 0] = 1.0
        base[2, 1] = 1.0
        code = omp_sparse_code(np.array([2.0, 0.0, 0.0, 0.0]), base, k_nonzero=3)
        assert np.isfinite(code.coefficients).all()

    def test_bad_inputs_rejected(self):
        atoms = random_dictionary(5, 3, seed=0)
        with pytest.raises(ValueError):
            omp_sparse_code(np.zeros(3), atoms, k_nonzero=6)
        with pytest.raises(ValueError):
            omp_sparse_code(np.zeros(3), 2.0 * atoms, k_nonzero=2)


class TestPrompt:
    def example(self):
        return RankedExample(query="n005", docids=["n004", "n002", "n001"],
                             negative="n009", prompt_seed=0)

    def test_deterministic(self):
        ex = self.example()
        a = serialize_prompt(ex, seed=11)
        b = serialize_prompt(ex, seed=11)
        assert a.text == b.text and a.docids_shuffled == b.docids_shuffled

    def test_contains_each_docid_once(self):
        ex = self.example()
        q = serialize_prompt(ex, seed=3)
        assert sorted(q.docids_shuffled) == sorted(ex.docids + [ex.negative])
        body = q.text.split(";d:")[1].split(";a:")[0]
        assert body.split("|") == q.docids_shuffled

    def test_shuffle_changes_order_for_some_seed(self):
        ex = self.example()
        rank_order = ex.docids + [ex.negative]
        assert any(serialize_prompt(ex, seed=s).docids_shuffled != rank_order
                   for s in range(10))

    def test_reserved_characters_rejected(self):
        ex = RankedExample(query="q", docids=["a|b"], negative="c")
        with pytest.raises(ValueError):
            serialize_prompt(ex, seed=0)


class TestDatasets:
    def test_taxonomy_dataset_regeneration_identical(self, tmp_path):
        tax = gen_taxonomy(120, 4, seed=9)
        a = make_taxonomy_dataset(tax, 50, seed=21)
        b = make_taxonomy_dataset(tax, 50, seed=21)
        pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_examples(a, pa)
        save_examples(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_jsonl_round_trip_validates(self, tmp_path):
        tax = gen_taxonomy(80, 3, seed=2)
        examples = make_taxonomy_dataset(tax, 20, seed=5)
        path = tmp_path / "data.jsonl"
        save_examples(examples, path)
        loaded = load_examples(path)
        assert loaded == examples

    def test_product_docids_unique(self):
        corpus = make_product_corpus(num_docs=60, dim=16, n_atoms=40, seed=3)
        assert len(set(corpus.docids)) == len(corpus.docids)
        norms = np.linalg.norm(corpus.embeddings, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_product_dataset_ranks_by_inner_product(self):
        corpus = make_product_corpus(num_docs=40, dim=8, n_atoms=30, seed=1)
        examples, qvecs = make_product_dataset(corpus, num_queries=12,
                                               docs_per_query=(3, 6), seed=4,
                                               return_query_vectors=True)
        emb = {d: corpus.embeddings[i] for i, d in enumerate(corpus.docids)}
        for ex, q in zip(examples, qvecs):
            assert 3 <= ex.n_q <= 6
            assert ex.negative not in ex.docids
            sims = [float(emb[d] @ q) for d in ex.docids]
            assert sims == sorted(sims, reverse=True)
            assert float(emb[ex.negative] @ q) <= sims[-1] + 1e-12
        again = make_product_dataset(corpus, num_queries=12, docs_per_query=(3, 6), seed=4)
        assert again == examples

    def test_product_dataset_bounds_checked(self):
        corpus = make_product_corpus(num_docs=10, dim=8, n_atoms=20, seed=1)
        with pytest.raises(ValueError):
            make_product_dataset(corpus, num_queries=2, docs_per_query=(5, 10), seed=0)
