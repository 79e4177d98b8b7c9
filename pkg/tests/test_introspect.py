import json

import numpy as np
import pytest

from esim_saliency import autodiff as ad
from esim_saliency.corpus import RawExample, build_vocab, bundled_examples, encode_example
from esim_saliency.esim import EsimParams, forward
from esim_saliency.introspect import (
    ExplanationReport, IntrospectionError, aligned_map_correlation, attention_saliency, backprop_decision,
    compare_models, decision_score, explain, gate_curves, normalize_by_max, normalized_attention, pearson,
)

from fd import rel_err

KID = "A kid is playing in the garden"
H1 = "A kid is taking a nap in the garden"


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(bundled_examples())


def toy_params(vocab, seed=0, d=4, r=5, sigma=0.5):
    rng = np.random.default_rng(seed)
    p = EsimParams.initialize(d, r, len(vocab), seed=seed)
    for k, a in p.arrays.items():
        p.arrays[k] = rng.normal(0, sigma, a.shape)
    p.arrays["projector.b"] = np.abs(p.arrays["projector.b"]) + 0.5  # keep the ReLU layer alive
    return p


class TestDecisionScore:
    def test_default_is_max_logit(self, vocab):
        p = toy_params(vocab)
        tr = forward(p, encode_example(RawExample(KID, H1), vocab), trace=True)
        assert float(decision_score(tr).data) == tr.logits.max()

    def test_given_logits(self, vocab):
        p = toy_params(vocab)
        for k in ("classifier.W_o", "classifier.b_o"):
            p.arrays[k][...] = 0.0
        p.arrays["classifier.b_o"][0] = 2.0
        tr = forward(p, encode_example(RawExample(KID, H1), vocab), trace=True)
        assert float(decision_score(tr, 0).data) == 2.0

    def test_identity_derivative(self, vocab):
        p = toy_params(vocab)
        tr = forward(p, encode_example(RawExample(KID, H1), vocab))
        tr.tape.backward(decision_score(tr, 1))
        assert tr.logits_node.grad.tolist() == [0.0, 1.0, 0.0]

    def test_out_of_range(self, vocab):
        tr = forward(toy_params(vocab), encode_example(RawExample(KID, H1), vocab))
        with pytest.raises(IndexError):
            decision_score(tr, 3)

    def test_second_class_on_same_tape_refused(self, vocab):
        tr = forward(toy_params(vocab), encode_example(RawExample(KID, H1), vocab), trace=True)
        backprop_decision(tr, 0)
        backprop_decision(tr, 0)  # same class is a no-op
        with pytest.raises(IntrospectionError):
            backprop_decision(tr, 1)


class TestNormalization:
    def test_max_is_one(self):
        v, top, deg = normalize_by_max(np.array([[0.5, 2.0], [1.0, 0.0]]))
        assert v.max() == 1.0 and top == 2.0 and not deg

    def test_all_zero(self):
        v, top, deg = normalize_by_max(np.zeros((2, 3)))
        assert deg and top == 0.0 and np.all(v == 0)

    def test_uniform_attention(self, vocab):
        tr = forward(toy_params(vocab), encode_example(RawExample(KID, H1), vocab), trace=True)
        tr.alpha[...] = 1.0 / tr.alpha.shape[1]
        amap = normalized_attention(tr)
        assert np.allclose(amap.values, 1.0 / 9)


class TestAttentionSaliency:
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_finite_differences_at_energy(self, vocab, seed):
        p = toy_params(vocab, seed)
        ex = encode_example(RawExample("a kid is playing", "kid taking nap"), vocab)
        tr = forward(p, ex, trace=True)
        y = tr.predicted
        amap = attention_saliency(tr, y)
        raw = amap.values * amap.scale
        n, m = tr.energy.shape
        numeric = np.zeros((n, m))
        for i in range(n):
            for j in range(m):
                delta = np.zeros((n, m))
                delta[i, j] = 1e-5
                hi = forward(p, ex, requires_grad=False, perturb={"energy": delta}).logits[y]
                lo = forward(p, ex, requires_grad=False, perturb={"energy": -delta}).logits[y]
                numeric[i, j] = (hi - lo) / 2e-5
        assert rel_err(raw, np.abs(numeric)) < 1e-3

    def test_zeroed_classifier_is_degenerate(self, vocab):
        p = toy_params(vocab)
        p.arrays["classifier.W_o"][...] = 0.0
        rep = explain(p, vocab, KID, H1)
        assert rep.saliency.degenerate and np.all(rep.saliency.values == 0)
        assert "degenerate_attention_saliency" in rep.flags
        for gs in rep.gates.values():
            for c in gs.curves:
                assert c.saliency_degenerate and np.all(c.saliency == 0)
                assert not c.signal_degenerate and c.signal.max() == 1.0

    def test_signal_unchanged_by_severed_classifier(self, vocab):
        p = toy_params(vocab)
        a = explain(p, vocab, KID, H1)
        p.arrays["classifier.W_o"][...] = 0.0
        b = explain(p, vocab, KID, H1)
        for s in ("premise", "hypothesis"):
            for ca, cb in zip(a.gates[s].curves, b.gates[s].curves):
                assert np.array_equal(ca.signal, cb.signal)

    def test_missing_probe(self, vocab):
        tr = forward(toy_params(vocab), encode_example(RawExample(KID, H1), vocab))
        with pytest.raises(IntrospectionError):
            attention_saliency(tr)


class TestGateCurves:
    @pytest.mark.parametrize("seed", range(3))
    def test_saliency_norm_by_directional_probing(self, vocab, seed):
        p = toy_params(vocab, seed)
        ex = encode_example(RawExample("a kid is playing", "kid taking nap"), vocab)
        tr = forward(p, ex, trace=True)
        y = tr.predicted
        backprop_decision(tr, y)
        rng = np.random.default_rng(seed)
        labels = sorted(label for label in tr.tape.probes if "gate" in label)
        for label in rng.choice(labels, 6, replace=False):
            g = tr.tape.probe_grad(label)
            norm = np.linalg.norm(g)
            # zero-gradient gates (forget gate on a zero cell) are probed along an arbitrary direction
            direction = g / norm if norm > 0 else rng.normal(size=g.shape) / 2.0
            h = 1e-5
            hi = forward(p, ex, requires_grad=False, perturb={label: h * direction}).logits[y]
            lo = forward(p, ex, requires_grad=False, perturb={label: -h * direction}).logits[y]
            if norm > 0:
                assert rel_err(norm, (hi - lo) / (2 * h)) < 1e-2
            else:
                assert abs(hi - lo) / (2 * h) < 1e-8

    def test_curve_shapes_and_ranges(self, vocab):
        rep = explain(toy_params(vocab), vocab, KID, H1)
        for sentence, n in (("premise", 7), ("hypothesis", 9)):
            gs = rep.gates[sentence]
            assert len(gs.curves) == 12 and gs.tokens[0] == "a"
            for c in gs.curves:
                for values in (c.signal, c.saliency):
                    assert values.shape == (n,) and values.min() >= 0 and values.max() == 1.0

    def test_signal_is_l2_norm(self, vocab):
        p = toy_params(vocab)
        tr = forward(p, encode_example(RawExample(KID, H1), vocab), trace=True)
        gs = gate_curves(tr, None, "hypothesis")
        raw = np.linalg.norm(tr.lstm[("hypothesis", "inference_lstm", "bwd")].forget_gate, axis=1)
        c = gs.get("inference", "backward", "forget")
        assert np.allclose(c.signal * c.signal_scale, raw, atol=1e-15)

    def test_single_token_sentence(self, vocab):
        rep = explain(toy_params(vocab), vocab, "kid", "garden")
        for gs in rep.gates.values():
            for c in gs.curves:
                assert c.signal.tolist() == [1.0]
                # the forget gate multiplies a zero initial cell, so its saliency is exactly 0
                assert c.saliency.tolist() == ([0.0] if c.gate == "forget" else [1.0])
                assert c.saliency_degenerate == (c.gate == "forget")

    def test_cell_curves_optional(self, vocab):
        p = toy_params(vocab)
        assert len(explain(p, vocab, KID, H1).gates["premise"].curves) == 12
        assert len(explain(p, vocab, KID, H1, include_cell=True).gates["premise"].curves) == 16

    def test_bad_sentence(self, vocab):
        tr = forward(toy_params(vocab), encode_example(RawExample(KID, H1), vocab), trace=True)
        with pytest.raises(ValueError):
            gate_curves(tr, None, "both")


class TestExplain:
    def test_prediction_consistent(self, vocab):
        rep = explain(toy_params(vocab), vocab, KID, H1)
        assert rep.predicted == int(np.argmax(rep.logits)) == rep.score_class
        assert np.allclose(rep.attention.values.sum(1), 1.0, atol=1e-9)

    def test_deterministic(self, vocab):
        p = toy_params(vocab)
        assert explain(p, vocab, KID, H1).to_json() == explain(p, vocab, KID, H1).to_json()

    def test_params_not_mutated(self, vocab):
        p = toy_params(vocab)
        before = {k: v.copy() for k, v in p.arrays.items()}
        explain(p, vocab, KID, H1, y=0)
        explain(p, vocab, KID, H1, y=2)
        assert all(np.array_equal(before[k], p.arrays[k]) for k in before)

    def test_explicit_class(self, vocab):
        p = toy_params(vocab)
        rep = explain(p, vocab, KID, H1, y=2)
        assert rep.score_class == 2 and rep.metadata["score"] == "logit"

    @pytest.mark.parametrize("shift", [0.5, -3.0, 17.0])
    def test_output_bias_shift_invariance(self, vocab, shift):
        p = toy_params(vocab)
        a = explain(p, vocab, KID, H1)
        q = p.copy()
        q.arrays["classifier.b_o"] += shift
        b = explain(q, vocab, KID, H1)
        assert a.predicted == b.predicted
        assert np.array_equal(a.saliency.values, b.saliency.values)
        assert np.array_equal(a.attention.values, b.attention.values)
        for s in ("premise", "hypothesis"):
            for ca, cb in zip(a.gates[s].curves, b.gates[s].curves):
                assert np.array_equal(ca.saliency, cb.saliency) and np.array_equal(ca.signal, cb.signal)

    def test_empty_sentence(self, vocab):
        with pytest.raises(ValueError):
            explain(toy_params(vocab), vocab, "   ", H1)

    def test_json_round_trip(self, vocab):
        rep = explain(toy_params(vocab), vocab, KID, H1, metadata={"checkpoint": "x.ckpt"})
        obj = json.loads(rep.to_json())
        again = ExplanationReport.from_dict(obj)
        assert again.to_json() == rep.to_json()
        assert obj["metadata"]["gate_norm"] == "L2" and obj["saliency"]["scale"] > 0


class TestCompare:
    def test_self_comparison(self, vocab):
        p = toy_params(vocab)
        c = compare_models((p, vocab), (p, vocab), KID, H1)
        assert c.summary["correlation"] == {"attention": pytest.approx(1.0), "saliency": pytest.approx(1.0)}
        preds = c.summary["predictions"]
        assert preds["A"] == preds["B"]
        assert c.summary["argmax_cells"]["saliency"]["A"] == c.summary["argmax_cells"]["saliency"]["B"]

    def test_different_vocabularies_break_grid(self, vocab):
        p = toy_params(vocab)
        other = build_vocab([RawExample("kid garden", "nap")])
        q = toy_params(other, 1)
        c = compare_models((p, vocab), (q, other), "A kid naps", "A kid sleeps")
        assert c.summary["grid_aligned"]
        # grids agree because tokenization is shared even though ids differ
        assert set(c.summary["correlation"]) == {"attention", "saliency"}

    def test_pearson_constant(self):
        assert pearson([1, 1, 1], [1, 2, 3]) is None

    def test_aligned_correlation_uses_shared_tokens(self, vocab):
        p = toy_params(vocab)
        a = explain(p, vocab, KID, H1).attention
        b = explain(p, vocab, KID, "A kid is having fun in the garden").attention
        r = aligned_map_correlation(a, b)
        assert r is not None and -1.0 <= r <= 1.0
        assert aligned_map_correlation(a, a) == pytest.approx(1.0)
