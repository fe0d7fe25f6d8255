import numpy as np
import pytest

from ranklab import diffcore as dc
from ranklab.data import RankedExample, serialize_prompt
from ranklab.evaluation import (
    MetricsReport,
    ScoredDocId,
    arr_score_fn,
    beam_search,
    cvr_violation,
    evaluate_examples,
    ndcg,
    ranked_docids,
    recall_at_k,
    score_docid,
    score_docids,
)
from ranklab.models import ArrConfig, ArrModel, build_tokenizer, forward_logits
from ranklab.trie import build_trie, valid_continuations


def make_setup(docids, negative, seed=0, dim=8, layers=1):
    ex = RankedExample(query="n00", docids=list(docids), negative=negative,
                       prompt_seed=seed)
    prompt = serialize_prompt(ex, ex.prompt_seed)
    tok, docid_ids = build_tokenizer([prompt.text], list(docids) + [negative])
    model = ArrModel(tok, docid_ids, ArrConfig(dim=dim, layers=layers, heads=2,
                                               context=128), seed=seed)
    return model, ex, prompt


def candidate_trie(model, docids):
    tokenized = [(tuple(model.tokenizer.encode(d)), i + 1) for i, d in enumerate(docids)]
    return build_trie(tokenized, beta=1.0, eod_token=model.tokenizer.eod_id)


class TestScoreDocid:
    def test_single_token_docid_score(self):
        model, ex, prompt = make_setup(["a", "b"], "c", seed=1)
        tok = model.tokenizer
        prompt_ids = tok.encode(prompt.text)
        s = score_docid(model, prompt, "a")
        logits = forward_logits(model, prompt_ids + tok.encode("a"))
        lp_tok = dc.log_softmax_np(logits[len(prompt_ids) - 1])[tok.encode("a")[0]]
        lp_eod = dc.log_softmax_np(logits[len(prompt_ids)])[tok.eod_id]
        assert s.score == pytest.approx((lp_tok + lp_eod) / 2, abs=1e-12)

    def test_mean_of_token_logprobs(self):
        # mean semantics on a two-value case
        assert ScoredDocId("x", (-0.5 + -1.5) / 2).score == -1.0

    def test_batched_matches_unbatched_ordering(self):
        model, ex, prompt = make_setup(["ab", "ba", "aa", "bb"], "cc", seed=2)
        batched = score_docids(model, prompt, ex.docids + [ex.negative])
        singles = [score_docid(model, prompt, d) for d in ex.docids + [ex.negative]]
        order_a = [s.docid for s in sorted(batched, key=lambda s: (-s.score, s.docid))]
        order_b = [s.docid for s in sorted(singles, key=lambda s: (-s.score, s.docid))]
        assert order_a == order_b

    def test_context_overflow_rejected(self):
        model, ex, prompt = make_setup(["a"], "b", seed=0)
        model.config.context = 5
        with pytest.raises(ValueError):
            score_docid(model, prompt, "a")

    def test_positive_score_rejected(self):
        with pytest.raises(ValueError):
            ScoredDocId("x", 0.3)


class TestBeamSearch:
    def test_full_beam_matches_exhaustive(self):
        rng = np.random.default_rng(0)
        for trial in range(8):
            docids = [f"{a}{b}" for a, b in zip("aabbc", "xyxzy")][: int(rng.integers(3, 6))]
            model, ex, prompt = make_setup(docids, "zz", seed=trial, layers=1)
            trie = candidate_trie(model, docids)
            beams = beam_search(model, prompt, trie, k=len(docids))
            exhaustive = score_docids(model, prompt, docids)
            exhaustive.sort(key=lambda s: (-s.score, s.docid))
            assert [b.docid for b in beams] == [e.docid for e in exhaustive]
            assert [b.score for b in beams] == [e.score for e in exhaustive]

    def test_beam_one_equals_greedy(self):
        for seed in range(6):
            docids = ["ab", "aab", "ba", "bb", "a"]
            model, ex, prompt = make_setup(docids, "xx", seed=seed, layers=1)
            trie = candidate_trie(model, docids)
            tok = model.tokenizer
            # greedy constrained decode: argmax over valid continuations each step
            prompt_ids = tok.encode(prompt.text)
            node, tokens = trie.root, []
            while True:
                logits = forward_logits(model, prompt_ids + tokens)
                row = dc.log_softmax_np(logits[-1])
                options = {t: row[t] for t in node.children}
                if node.is_docid:
                    options[tok.eod_id] = row[tok.eod_id]
                best = max(sorted(options), key=lambda t: options[t])
                if best == tok.eod_id:
                    break
                tokens.append(best)
                node = node.children[best]
            greedy_docid = tok.decode(tokens)
            result = beam_search(model, prompt, trie, k=1)
            assert len(result) == 1
            assert result[0].docid == greedy_docid

    def test_emitted_docids_always_in_trie(self):
        rng = np.random.default_rng(3)
        for trial in range(5):
            docids = ["ab", "abc", "ba", "ca"]
            model, ex, prompt = make_setup(docids, "zz", seed=100 + trial)
            trie = candidate_trie(model, docids)
            k = int(rng.integers(1, 6))
            for s in beam_search(model, prompt, trie, k):
                assert s.docid in docids

    def test_k_larger_than_corpus_returns_all(self):
        docids = ["ab", "ba"]
        model, ex, prompt = make_setup(docids, "cc", seed=4)
        trie = candidate_trie(model, docids)
        out = beam_search(model, prompt, trie, k=10)
        assert sorted(s.docid for s in out) == sorted(docids)

    def test_bad_beam_width_rejected(self):
        docids = ["ab"]
        model, ex, prompt = make_setup(docids, "cc", seed=5)
        trie = candidate_trie(model, docids)
        with pytest.raises(ValueError):
            beam_search(model, prompt, trie, k=0)


class TestCvr:
    def test_violation_when_any_positive_below_negative(self):
        assert cvr_violation([-1.0, -2.0], -1.5) is True

    def test_no_violation(self):
        assert cvr_violation([-1.0, -1.2], -5.0) is False

    def test_boundary_equality_is_not_a_violation(self):
        assert cvr_violation([-1.0, -2.0], -2.0) is False

    def test_empty_positives_rejected(self):
        with pytest.raises(ValueError):
            cvr_violation([], -1.0)


class TestNdcg:
    def example(self, n):
        return RankedExample(query="q", docids=[f"d{i}" for i in range(n)],
                             negative="neg")

    def test_gold_order_is_100(self):
        ex = self.example(4)
        scores = {d: -float(i) for i, d in enumerate(ex.docids)}
        scores["neg"] = -100.0
        assert ndcg(ex, scores) == pytest.approx(100.0, abs=1e-12)

    def test_two_item_reversed_closed_form(self):
        ex = self.example(1)
        scores = {"d0": -2.0, "neg": -1.0}
        assert ndcg(ex, scores) == pytest.approx(63.09297535714575, abs=1e-9)
        assert ndcg(ex, scores) == pytest.approx(63.09, abs=0.01)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(0)
        ex = self.example(5)
        docids = ex.docids + ["neg"]
        for _ in range(20):
            scores = {d: float(-rng.random()) for d in docids}
            base = ndcg(ex, scores)
            warped = {d: 3.0 * s - 1.0 for d, s in scores.items()}
            assert ndcg(ex, warped) == pytest.approx(base, abs=1e-12)
            expd = {d: float(np.exp(s)) for d, s in scores.items()}
            assert ndcg(ex, expd) == pytest.approx(base, abs=1e-12)

    def test_missing_score_rejected(self):
        ex = self.example(2)
        with pytest.raises(ValueError):
            ndcg(ex, {"d0": -1.0, "neg": -2.0})


class TestRecallAtK:
    def test_unit_cases(self):
        gold, pred = ["a", "b", "c"], ["a", "c", "b"]
        assert recall_at_k(gold, pred, 1) == 1.0
        assert recall_at_k(gold, pred, 2) == 0.5
        assert recall_at_k(gold, pred, 3) == 1.0

    def test_identity(self):
        gold = ["a", "b", "c", "d"]
        for k in range(1, 5):
            assert recall_at_k(gold, gold, k) == 1.0

    def test_reversed_disjoint_top_halves(self):
        gold = ["a", "b", "c", "d"]
        assert recall_at_k(gold, gold[::-1], 2) == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        items = [f"x{i}" for i in range(6)]
        for _ in range(30):
            a = list(rng.permutation(items))
            b = list(rng.permutation(items))
            for k in (1, 3, 6):
                assert recall_at_k(a, b, k) == recall_at_k(b, a, k)

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            recall_at_k(["a"], ["a"], 2)


class TestEvaluateExamples:
    def test_aggregation_and_determinism(self):
        examples = [
            RankedExample(query="q1", docids=["a", "b", "c"], negative="z"),
            RankedExample(query="q2", docids=["d", "e"], negative="y"),
        ]
        fixed = {"a": -1.0, "b": -2.0, "c": -3.0, "z": -2.5,
                 "d": -1.0, "e": -2.0, "y": -0.5}

        def score_fn(ex):
            return {d: fixed[d] for d in ex.docids + [ex.negative]}

        rep1 = evaluate_examples(score_fn, examples, k_list=[1, 2, 3])
        rep2 = evaluate_examples(score_fn, examples, k_list=[1, 2, 3])
        assert rep1 == rep2
        # q1: c < z violates; q2: d,e < y violates -> CVR 100
        assert rep1.cvr == pytest.approx(100.0)
        # R@3 only valid for q1 (4 candidates) and q2 (3 candidates)
        assert rep1.n_examples == 2
        assert set(rep1.as_row()) == {"cvr", "ndcg", "r_at_1", "r_at_2", "r_at_3"}

    def test_k_with_no_qualifying_example_rejected(self):
        examples = [RankedExample(query="q", docids=["a"], negative="z")]

        def score_fn(ex):
            return {"a": -1.0, "z": -2.0}

        with pytest.raises(ValueError):
            evaluate_examples(score_fn, examples, k_list=[5])

    def test_arr_score_fn_end_to_end(self):
        model, ex, prompt = make_setup(["ab", "ba"], "cc", seed=6)
        rep = evaluate_examples(arr_score_fn(model), [ex], k_list=[1, 2])
        assert 0.0 <= rep.cvr <= 100.0
        assert 0.0 <= rep.ndcg <= 100.0
        assert all(0.0 <= v <= 1.0 for v in rep.r_at.values())
