"""Attention saliency and LSTM gate signal/saliency curves.

Everything is driven by one traced forward pass and one backward pass from
the decision score ``S(y)``, the pre-softmax logit of class ``y``:

* attention saliency is ``|dS/de_ij|`` over the energy matrix;
* a gate saliency value is the L2 norm of ``dS/dg_t`` for a gate vector
  ``g_t`` at one timestep, and the matching signal value is ``||g_t||``.

Maps and curves are divided by their own maximum for display. The maxima
are kept in the report so the raw values can be recovered.
"""

from __future__ import annotations

import difflib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .corpus import LABELS, MAX_LEN, RawExample, Vocab, encode_example, tokenize
from .esim import DIRECTIONS, SENTENCES, EsimParams, ForwardTrace, forward

LAYER_KEYS = {"input": "input_lstm", "inference": "inference_lstm"}
DIRECTION_KEYS = {"forward": "fwd", "backward": "bwd"}
GATE_KEYS = ("input", "forget", "output")


class IntrospectionError(RuntimeError):
    pass


def normalize_by_max(values: np.ndarray):
    """Divide non-negative ``values`` by their max; returns (normalized, max, degenerate)."""
    values = np.asarray(values, dtype=np.float64)
    top = float(values.max()) if values.size else 0.0
    if not top > 0.0:
        return np.zeros_like(values), 0.0, True
    return values / top, top, False


@dataclass
class AttentionMap:
    values: np.ndarray  # [n premise tokens x m hypothesis tokens]
    premise_tokens: list
    hypothesis_tokens: list
    kind: str  # "attention" or "saliency"
    scale: float = 1.0
    degenerate: bool = False

    def argmax_cell(self):
        i, j = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return int(i), int(j)

    def to_dict(self):
        return {"kind": self.kind, "premise_tokens": list(self.premise_tokens),
                "hypothesis_tokens": list(self.hypothesis_tokens), "values": self.values.tolist(),
                "scale": self.scale, "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, obj):
        return cls(np.asarray(obj["values"], dtype=np.float64), list(obj["premise_tokens"]),
                   list(obj["hypothesis_tokens"]), obj["kind"], obj["scale"], obj["degenerate"])


@dataclass
class GateCurve:
    layer: str       # "input" | "inference"
    direction: str   # "forward" | "backward"
    gate: str        # "input" | "forget" | "output" | "cell"
    signal: np.ndarray
    saliency: np.ndarray
    signal_scale: float
    saliency_scale: float
    signal_degenerate: bool = False
    saliency_degenerate: bool = False

    def to_dict(self):
        return {"layer": self.layer, "direction": self.direction, "gate": self.gate,
                "signal": self.signal.tolist(), "saliency": self.saliency.tolist(),
                "signal_scale": self.signal_scale, "saliency_scale": self.saliency_scale,
                "signal_degenerate": self.signal_degenerate,
                "saliency_degenerate": self.saliency_degenerate}

    @classmethod
    def from_dict(cls, obj):
        return cls(obj["layer"], obj["direction"], obj["gate"],
                   np.asarray(obj["signal"], dtype=np.float64),
                   np.asarray(obj["saliency"], dtype=np.float64),
                   obj["signal_scale"], obj["saliency_scale"],
                   obj["signal_degenerate"], obj["saliency_degenerate"])


@dataclass
class GateCurveSet:
    sentence: str
    tokens: list
    curves: list = field(default_factory=list)

    def get(self, layer, direction, gate) -> GateCurve:
        for c in self.curves:
            if (c.layer, c.direction, c.gate) == (layer, direction, gate):
                return c
        raise KeyError((layer, direction, gate))

    def to_dict(self):
        return {"sentence": self.sentence, "tokens": list(self.tokens),
                "curves": [c.to_dict() for c in self.curves]}

    @classmethod
    def from_dict(cls, obj):
        return cls(obj["sentence"], list(obj["tokens"]), [GateCurve.from_dict(c) for c in obj["curves"]])


@dataclass
class ExplanationReport:
    premise: str
    hypothesis: str
    logits: np.ndarray
    predicted: int
    score_class: int
    attention: AttentionMap
    saliency: AttentionMap
    gates: dict  # sentence -> GateCurveSet
    metadata: dict = field(default_factory=dict)

    @property
    def predicted_label(self):
        return LABELS[self.predicted]

    @property
    def flags(self):
        out = []
        if self.saliency.degenerate:
            out.append("degenerate_attention_saliency")
        for sentence, gs in self.gates.items():
            for c in gs.curves:
                if c.saliency_degenerate:
                    out.append(f"degenerate_saliency:{sentence}.{c.layer}.{c.direction}.{c.gate}")
                if c.signal_degenerate:
                    out.append(f"degenerate_signal:{sentence}.{c.layer}.{c.direction}.{c.gate}")
        return out

    def to_dict(self):
        return {
            "premise": self.premise,
            "hypothesis": self.hypothesis,
            "logits": self.logits.tolist(),
            "predicted": self.predicted,
            "predicted_label": self.predicted_label,
            "score_class": self.score_class,
            "score_label": LABELS[self.score_class],
            "attention": self.attention.to_dict(),
            "saliency": self.saliency.to_dict(),
            "gates": {k: v.to_dict() for k, v in self.gates.items()},
            "flags": self.flags,
            "metadata": dict(self.metadata),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, obj):
        return cls(obj["premise"], obj["hypothesis"], np.asarray(obj["logits"], dtype=np.float64),
                   obj["predicted"], obj["score_class"], AttentionMap.from_dict(obj["attention"]),
                   AttentionMap.from_dict(obj["saliency"]),
                   {k: GateCurveSet.from_dict(v) for k, v in obj["gates"].items()},
                   dict(obj.get("metadata", {})))


def decision_score(trace: ForwardTrace, y: Optional[int] = None) -> ad.Node:
    """The pre-softmax logit of class ``y`` (default: the predicted class)."""
    y = trace.predicted if y is None else y
    if not 0 <= y < trace.logits.shape[0]:
        raise IndexError(f"class {y} out of range")
    return ad.index(trace.logits_node, y)


def backprop_decision(trace: ForwardTrace, y: Optional[int] = None) -> int:
    """Run the single backward pass from ``S(y)`` on this trace's tape."""
    y = trace.predicted if y is None else y
    done = trace.scored_class
    if done is not None:
        if done != y:
            raise IntrospectionError(f"tape already differentiated for class {done}; trace again for {y}")
        return y
    trace.tape.backward(decision_score(trace, y))
    trace.scored_class = y
    return y


def attention_saliency(trace: ForwardTrace, y: Optional[int] = None, premise_tokens=(),
                       hypothesis_tokens=()) -> AttentionMap:
    if trace.energy_label not in trace.tape.probes:
        raise IntrospectionError("trace has no energy probe; run forward with trace=True")
    backprop_decision(trace, y)
    raw = np.abs(trace.tape.probe_grad(trace.energy_label))
    values, top, degenerate = normalize_by_max(raw)
    return AttentionMap(values, list(premise_tokens), list(hypothesis_tokens), "saliency", top, degenerate)


def normalized_attention(trace: ForwardTrace, premise_tokens=(), hypothesis_tokens=()) -> AttentionMap:
    """Premise-to-hypothesis soft alignment weights (rows sum to 1)."""
    return AttentionMap(trace.alpha.copy(), list(premise_tokens), list(hypothesis_tokens), "attention")


def gate_curves(trace: ForwardTrace, y: Optional[int] = None, sentence: str = "premise", tokens=(),
                include_cell: bool = False) -> GateCurveSet:
    """Signal and saliency L2-norm curves for every layer/direction/gate of one sentence."""
    if sentence not in SENTENCES:
        raise ValueError(f"sentence must be one of {SENTENCES}")
    backprop_decision(trace, y)
    gates = GATE_KEYS + (("cell",) if include_cell else ())
    out = GateCurveSet(sentence, list(tokens))
    for layer, layer_key in LAYER_KEYS.items():
        for direction, dir_key in DIRECTION_KEYS.items():
            lt = trace.lstm[(sentence, layer_key, dir_key)]
            for gate in gates:
                if gate not in lt.probes:
                    raise IntrospectionError(f"no {gate} probes for {sentence}.{layer_key}.{dir_key}")
                signal_raw = np.linalg.norm(lt.gate(gate), axis=1)
                sal_raw = np.array([np.linalg.norm(trace.tape.probe_grad(label))
                                    for label in lt.probes[gate]])
                signal, s_top, s_deg = normalize_by_max(signal_raw)
                sal, g_top, g_deg = normalize_by_max(sal_raw)
                out.curves.append(GateCurve(layer, direction, gate, signal, sal, s_top, g_top, s_deg, g_deg))
    return out


def explain(params: EsimParams, vocab: Vocab, premise: str, hypothesis: str, y: Optional[int] = None,
            include_cell: bool = False, max_len: int = MAX_LEN, metadata: Optional[dict] = None
            ) -> ExplanationReport:
    """One traced forward and one backward from ``S(y)``; assembles maps and curves."""
    p_tokens = tokenize(premise)[:max_len]
    h_tokens = tokenize(hypothesis)[:max_len]
    if not p_tokens or not h_tokens:
        raise ValueError("premise and hypothesis must contain at least one token")
    encoded = encode_example(RawExample(premise, hypothesis), vocab, max_len)
    trace = forward(params, encoded, trace=True, probe_cell=include_cell)
    y = backprop_decision(trace, y)
    meta = {"score": "logit", "gate_norm": "L2", "normalization": "per-map max",
            "d": params.d, "r": params.r, "d_h": params.d_h, "seed": params.seed}
    meta.update(metadata or {})
    return ExplanationReport(
        premise, hypothesis, trace.logits.copy(), trace.predicted, y,
        normalized_attention(trace, p_tokens, h_tokens),
        attention_saliency(trace, y, p_tokens, h_tokens),
        {"premise": gate_curves(trace, y, "premise", p_tokens, include_cell),
         "hypothesis": gate_curves(trace, y, "hypothesis", h_tokens, include_cell)},
        meta)


def pearson(a, b) -> Optional[float]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or a.std() == 0 or b.std() == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def aligned_map_correlation(a: AttentionMap, b: AttentionMap) -> Optional[float]:
    """Pearson correlation over the shared premise axis and matched hypothesis tokens.

    Hypothesis columns are paired by the longest matching token blocks, so
    maps over different hypotheses are compared only where the words agree.
    """
    if a.premise_tokens != b.premise_tokens:
        return None
    matcher = difflib.SequenceMatcher(a=a.hypothesis_tokens, b=b.hypothesis_tokens, autojunk=False)
    cols_a, cols_b = [], []
    for block in matcher.get_matching_blocks():
        cols_a.extend(range(block.a, block.a + block.size))
        cols_b.extend(range(block.b, block.b + block.size))
    if not cols_a:
        return None
    return pearson(a.values[:, cols_a], b.values[:, cols_b])


@dataclass
class Comparison:
    report_a: ExplanationReport
    report_b: ExplanationReport
    summary: dict


def compare_models(model_a, model_b, premise: str, hypothesis: str, names=("A", "B")) -> Comparison:
    """Explain one pair under two models, each with its own vocabulary.

    ``model_a``/``model_b`` are ``(EsimParams, Vocab)`` pairs. Correlations are
    omitted when the two reports do not share an identical token grid.
    """
    ra = explain(*model_a, premise, hypothesis, metadata={"model": names[0]})
    rb = explain(*model_b, premise, hypothesis, metadata={"model": names[1]})
    same_grid = (ra.attention.premise_tokens == rb.attention.premise_tokens
                 and ra.attention.hypothesis_tokens == rb.attention.hypothesis_tokens)
    summary = {
        "models": list(names),
        "predictions": {names[0]: ra.predicted_label, names[1]: rb.predicted_label},
        "argmax_cells": {
            "attention": {names[0]: ra.attention.argmax_cell(), names[1]: rb.attention.argmax_cell()},
            "saliency": {names[0]: ra.saliency.argmax_cell(), names[1]: rb.saliency.argmax_cell()},
        },
        "grid_aligned": same_grid,
    }
    if same_grid:
        summary["correlation"] = {"attention": pearson(ra.attention.values, rb.attention.values),
                                  "saliency": pearson(ra.saliency.values, rb.saliency.values)}
    return Comparison(ra, rb, summary)
