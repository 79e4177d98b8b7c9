"""Finite-difference verification of the tape gradients at toy size.

The oracle here is a separate, batched numpy implementation of the ESIM
forward pass. It shares no code with the tape: every central difference is
one batch row, so a full parameter sweep costs a handful of vectorized
passes instead of thousands of tape constructions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import EncodedExample
from .esim import DIRECTIONS, GATES, EsimParams, forward, loss_and_grads

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-3
_GATE_LABELS = {"i": "input_gate", "f": "forget_gate", "o": "output_gate"}


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x, axis):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def _lstm(arrays, X, layer, direction, sentence, perturb):
    """X: [..., n, r_in]; returns [..., n, d]."""
    pre = f"{layer}.{direction}"
    W = {g: arrays[f"{pre}.W_{g}"] for g in GATES}
    U = {g: arrays[f"{pre}.U_{g}"] for g in GATES}
    b = {g: arrays[f"{pre}.b_{g}"] for g in GATES}
    n = X.shape[-2]
    d = U["i"].shape[-1]
    h = np.zeros(d)
    c = np.zeros(d)
    out = [None] * n
    steps = range(n - 1, -1, -1) if direction == "bwd" else range(n)
    for t in steps:
        x = X[..., t, :]
        z = {g: np.einsum("...k,...dk->...d", x, W[g]) + np.einsum("...k,...dk->...d", h, U[g]) + b[g]
             for g in GATES}
        gate = {g: (np.tanh(z[g]) if g == "c" else _sigmoid(z[g])) for g in GATES}
        for g, name in _GATE_LABELS.items():
            key = f"{sentence}.{layer}.{direction}.{name}.t={t}"
            if key in perturb:
                gate[g] = gate[g] + perturb[key]
        c = gate["f"] * c + gate["i"] * gate["c"]
        h = gate["o"] * np.tanh(c)
        out[t] = h
    batch = np.broadcast_shapes(*(o.shape for o in out))
    return np.stack([np.broadcast_to(o, batch) for o in out], axis=-2)


def _bilstm(arrays, X, layer, sentence, perturb):
    return np.concatenate([_lstm(arrays, X, layer, dr, sentence, perturb) for dr in DIRECTIONS], axis=-1)


def reference_logits(arrays: dict, premise, hypothesis, perturb=None) -> np.ndarray:
    """Batched ESIM logits. Arrays may carry a leading batch axis (size 1 broadcasts)."""
    perturb = perturb or {}
    E = arrays["embedding"]
    u = _bilstm(arrays, E[..., list(premise), :], "input_lstm", "premise", perturb)
    v = _bilstm(arrays, E[..., list(hypothesis), :], "input_lstm", "hypothesis", perturb)
    e = np.einsum("...id,...jd->...ij", u, v)
    if "energy" in perturb:
        e = e + perturb["energy"]
    alpha = _softmax(e, axis=-1)
    beta = _softmax(e, axis=-2)
    u_t = np.einsum("...ij,...jd->...id", alpha, v)
    v_t = np.einsum("...ij,...id->...jd", beta, u)

    def proj(x, xt):
        a = np.concatenate([x, xt, x - xt, x * xt], axis=-1)
        return np.maximum(np.einsum("...nk,...kd->...nd", a, arrays["projector.W"])
                          + arrays["projector.b"][..., None, :], 0.0)

    p_hat = _bilstm(arrays, proj(u, u_t), "inference_lstm", "premise", perturb)
    q_hat = _bilstm(arrays, proj(v, v_t), "inference_lstm", "hypothesis", perturb)
    feat = np.concatenate([p_hat.max(-2), p_hat.mean(-2), q_hat.max(-2), q_hat.mean(-2)], axis=-1)
    hidden = np.tanh(np.einsum("...k,...kh->...h", feat, arrays["classifier.W_h"]) + arrays["classifier.b_h"])
    return np.einsum("...h,...ho->...o", hidden, arrays["classifier.W_o"]) + arrays["classifier.b_o"]


def _cross_entropy(logits, target):
    zmax = logits.max(axis=-1, keepdims=True)
    lse = zmax[..., 0] + np.log(np.exp(logits - zmax).sum(axis=-1))
    return lse - logits[..., target]


def rel_error(a, b, floor=1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def fd_param_grads(params: EsimParams, example: EncodedExample, step=STEP) -> dict:
    """Central differences of the cross-entropy loss w.r.t. every parameter entry."""
    names = list(params.arrays)
    sizes = [params.arrays[k].size for k in names]
    total = sum(sizes)
    batch = {}
    offset = 0
    for name, size in zip(names, sizes):
        base = params.arrays[name]
        arr = np.broadcast_to(base, (2 * total,) + base.shape).copy()
        flat = arr.reshape(2 * total, -1)
        idx = np.arange(size)
        flat[2 * (offset + idx), idx] += step
        flat[2 * (offset + idx) + 1, idx] -= step
        batch[name] = arr
        offset += size
    losses = _cross_entropy(reference_logits(batch, example.premise, example.hypothesis), example.label)
    diffs = (losses[0::2] - losses[1::2]) / (2 * step)
    out, offset = {}, 0
    for name, size in zip(names, sizes):
        out[name] = diffs[offset:offset + size].reshape(params.arrays[name].shape)
        offset += size
    return out


def fd_probe_grads(params: EsimParams, example: EncodedExample, labels_shapes: dict, y: int, step=STEP) -> dict:
    """Central differences of logit ``y`` w.r.t. additive offsets at each probe."""
    total = sum(int(np.prod(s)) for s in labels_shapes.values())
    arrays = {k: v[None] for k, v in params.arrays.items()}
    perturb = {}
    offset = 0
    for label, shape in labels_shapes.items():
        size = int(np.prod(shape))
        delta = np.zeros((2 * total, size))
        idx = np.arange(size)
        delta[2 * (offset + idx), idx] = step
        delta[2 * (offset + idx) + 1, idx] = -step
        perturb[label] = delta.reshape((2 * total,) + tuple(shape))
        offset += size
    scores = reference_logits(arrays, example.premise, example.hypothesis, perturb)[:, y]
    diffs = (scores[0::2] - scores[1::2]) / (2 * step)
    out, offset = {}, 0
    for label, shape in labels_shapes.items():
        size = int(np.prod(shape))
        out[label] = diffs[offset:offset + size].reshape(shape)
        offset += size
    return out


def toy_problem(seed: int, d=4, r=5, vocab_size=20, n=3, m=3):
    rng = np.random.default_rng(seed)
    params = EsimParams.initialize(d, r, vocab_size, seed=seed)
    # larger-than-init weights so gradients are not uniformly tiny
    for k, arr in params.arrays.items():
        params.arrays[k] = rng.normal(0.0, 0.5, size=arr.shape)
    ex = EncodedExample(tuple(rng.integers(2, vocab_size, size=n)), tuple(rng.integers(2, vocab_size, size=m)),
                        int(rng.integers(0, 3)))
    return params, ex


@dataclass
class GradCheckResult:
    seed: int
    param_errors: dict = field(default_factory=dict)
    probe_errors: dict = field(default_factory=dict)
    forward_error: float = 0.0

    @property
    def max_error(self) -> float:
        return max(list(self.param_errors.values()) + list(self.probe_errors.values()) + [0.0])

    def passed(self, tol=TOLERANCE) -> bool:
        return self.max_error < tol and self.forward_error < 1e-10


def check_seed(seed: int, **dims) -> GradCheckResult:
    """Compare tape gradients with central differences for one random toy problem."""
    params, ex = toy_problem(seed, **dims)
    res = GradCheckResult(seed)
    tape_logits = forward(params, ex, requires_grad=False).logits
    ref = reference_logits({k: v for k, v in params.arrays.items()}, ex.premise, ex.hypothesis)
    res.forward_error = float(np.max(np.abs(tape_logits - ref)))

    _, _, analytic = loss_and_grads(params, ex)
    numeric = fd_param_grads(params, ex)
    res.param_errors = {k: rel_error(analytic[k], numeric[k]) for k in params.arrays}

    trace = forward(params, ex, trace=True)
    y = trace.predicted
    trace.tape.backward(ad.index(trace.logits_node, y))
    shapes = {label: trace.tape.probe(label).shape for label in trace.tape.probes}
    numeric_probe = fd_probe_grads(params, ex, shapes, y)
    res.probe_errors = {label: rel_error(trace.tape.probe_grad(label), numeric_probe[label]) for label in shapes}
    return res


def run_suite(seeds=range(20), tol=TOLERANCE, **dims):
    results = [check_seed(s, **dims) for s in seeds]
    return all(r.passed(tol) for r in results), results
