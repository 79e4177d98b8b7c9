"""ESIM: BiLSTM encoding, soft alignment, projection, inference BiLSTM, pooled MLP.

Arrays use the row-vector convention: a timestep is a row, and a dense
layer computes ``x @ W + b``. LSTM weights keep the per-gate layout
``W_g [d x r_in]``, ``U_g [d x d]``, ``b_g [d]`` and are fused into one
``[r_in x 4d]`` block per tape so every timestep costs a single product.

Every forward pass builds its own :class:`~esim_saliency.autodiff.Tape`;
parameters are read, never written, so concurrent passes over one
:class:`EsimParams` are safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .corpus import EncodedExample

GATES = ("i", "f", "c", "o")
GATE_NAMES = {"i": "input", "f": "forget", "o": "output", "c": "cell"}
LAYERS = ("input_lstm", "inference_lstm")
DIRECTIONS = ("fwd", "bwd")
SENTENCES = ("premise", "hypothesis")
N_CLASSES = 3


def param_shapes(d: int, r: int, d_h: int, vocab_size: int) -> dict:
    """Name -> shape for every trainable array, in canonical order."""
    shapes = {"embedding": (vocab_size, r)}
    for layer, r_in in (("input_lstm", r), ("inference_lstm", d)):
        for direction in DIRECTIONS:
            for g in GATES:
                shapes[f"{layer}.{direction}.W_{g}"] = (d, r_in)
                shapes[f"{layer}.{direction}.U_{g}"] = (d, d)
                shapes[f"{layer}.{direction}.b_{g}"] = (d,)
    shapes["projector.W"] = (8 * d, d)
    shapes["projector.b"] = (d,)
    shapes["classifier.W_h"] = (8 * d, d_h)
    shapes["classifier.b_h"] = (d_h,)
    shapes["classifier.W_o"] = (d_h, N_CLASSES)
    shapes["classifier.b_o"] = (N_CLASSES,)
    return shapes


@dataclass
class EsimParams:
    """All trainable arrays of one ESIM model, keyed by name."""

    d: int
    r: int
    d_h: int
    vocab_size: int
    seed: int = 0
    arrays: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.d, self.r, self.d_h, self.vocab_size)
        if self.arrays:
            if list(self.arrays) != list(expected):
                raise ValueError("parameter names do not match the ESIM layout")
            for name, shape in expected.items():
                if self.arrays[name].shape != shape:
                    raise ValueError(f"{name}: shape {self.arrays[name].shape} != {shape}")

    @classmethod
    def initialize(cls, d, r, vocab_size, d_h=None, seed=0) -> "EsimParams":
        """Uniform(-k, k) weights with k = 1/sqrt(fan_in); zero biases, forget bias 1.

        Values are drawn on the 32-bit grid so an untrained model survives a
        checkpoint round-trip unchanged.
        """
        d_h = d if d_h is None else d_h
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in param_shapes(d, r, d_h, vocab_size).items():
            leaf = name.rsplit(".", 1)[-1]
            if len(shape) == 1:
                arr = np.full(shape, 1.0 if leaf == "b_f" else 0.0)
            else:
                fan_in = shape[1] if name == "embedding" or leaf.startswith(("W_", "U_")) else shape[0]
                k = 1.0 / np.sqrt(fan_in)
                arr = rng.uniform(-k, k, size=shape).astype(np.float32).astype(np.float64)
            arrays[name] = arr
        arrays["embedding"][0] = 0.0  # PAD row
        return cls(d, r, d_h, vocab_size, seed, arrays)

    def copy(self) -> "EsimParams":
        return EsimParams(self.d, self.r, self.d_h, self.vocab_size, self.seed,
                          {k: v.copy() for k, v in self.arrays.items()})

    def as_float32_grid(self) -> "EsimParams":
        """Copy with every value rounded to the nearest 32-bit float."""
        return EsimParams(self.d, self.r, self.d_h, self.vocab_size, self.seed,
                          {k: v.astype(np.float32).astype(np.float64) for k, v in self.arrays.items()})

    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def __getitem__(self, name):
        return self.arrays[name]


@dataclass
class LstmCell:
    """One direction of one BiLSTM layer, bound to a tape."""

    Wx: ad.Node  # [r_in x 4d], gate blocks ordered i, f, c, o
    Uh: ad.Node  # [d x 4d]
    b: ad.Node   # [4d]
    d: int


@dataclass
class LstmTrace:
    """Per-timestep LSTM quantities, indexed by original token position."""

    input_gate: np.ndarray
    forget_gate: np.ndarray
    output_gate: np.ndarray
    candidate: np.ndarray
    cell: np.ndarray
    hidden: np.ndarray
    probes: dict = field(default_factory=dict)  # gate name -> list of labels per position

    def __len__(self):
        return self.hidden.shape[0]

    def gate(self, name) -> np.ndarray:
        return {"input": self.input_gate, "forget": self.forget_gate,
                "output": self.output_gate, "cell": self.cell}[name]


@dataclass
class ForwardTrace:
    """Everything a traced forward pass exposes for interpretation."""

    tape: ad.Tape
    logits_node: ad.Node
    energy_label: str
    energy: np.ndarray        # [n x m]
    alpha: np.ndarray         # [n x m], rows sum to 1
    beta: np.ndarray          # [n x m], columns sum to 1
    lstm: dict                # (sentence, layer, direction) -> LstmTrace
    premise_ids: tuple
    hypothesis_ids: tuple
    bound: "BoundParams"
    scored_class: Optional[int] = None  # class whose score has been backpropagated

    @property
    def logits(self) -> np.ndarray:
        return self.logits_node.data

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.logits_node.data))  # lowest index on ties


class BoundParams:
    """EsimParams placed on a tape as leaves, plus per-sentence embedding leaves."""

    def __init__(self, params: EsimParams, tape: ad.Tape, requires_grad: bool = True):
        self.params = params
        self.tape = tape
        self.requires_grad = requires_grad
        self.nodes = {name: tape.leaf(arr, requires_grad=requires_grad)
                      for name, arr in params.arrays.items() if name != "embedding"}
        self.embedded = {}  # sentence -> (ids, leaf node)
        self._cells = {}

    def __getitem__(self, name):
        return self.nodes[name]

    def embed(self, ids, sentence: str) -> ad.Node:
        rows = self.params.arrays["embedding"][np.asarray(ids, dtype=np.intp)]
        node = self.tape.leaf(rows, requires_grad=self.requires_grad)
        self.embedded[sentence] = (np.asarray(ids, dtype=np.intp), node)
        return node

    def cell(self, layer: str, direction: str) -> LstmCell:
        key = (layer, direction)
        if key not in self._cells:
            pre = f"{layer}.{direction}"
            Wx = ad.transpose(ad.concat([self.nodes[f"{pre}.W_{g}"] for g in GATES], axis=0))
            Uh = ad.transpose(ad.concat([self.nodes[f"{pre}.U_{g}"] for g in GATES], axis=0))
            b = ad.concat([self.nodes[f"{pre}.b_{g}"] for g in GATES], axis=0)
            self._cells[key] = LstmCell(Wx, Uh, b, self.params.d)
        return self._cells[key]

    def gradients(self, into: Optional[dict] = None, scale: float = 1.0) -> dict:
        """Add this tape's parameter gradients (times ``scale``) into ``into``."""
        if into is None:
            into = {name: np.zeros_like(arr) for name, arr in self.params.arrays.items()}
        for name, node in self.nodes.items():
            into[name] += scale * node.grad
        emb = into["embedding"]
        for ids, node in self.embedded.values():
            np.add.at(emb, ids, scale * node.grad)
        return into


def lstm_step(cell: LstmCell, x_t: ad.Node, h_prev: ad.Node, c_prev: ad.Node,
              probe_prefix: Optional[str] = None, t: int = 0, probe_cell: bool = False):
    """One standard LSTM step; returns ``(h_t, c_t, gates)`` with gates keyed i, f, c, o.

    When ``probe_prefix`` is given the input/forget/output gate vectors (and
    optionally the cell state) are registered as probes before they are used.
    """
    d = cell.d
    if x_t.shape != (cell.Wx.shape[0],) or h_prev.shape != (d,) or c_prev.shape != (d,):
        raise ad.ShapeError("lstm_step dimensions do not match the cell")
    tape = x_t.tape
    z = ad.add(ad.add(ad.matmul(x_t, cell.Wx), ad.matmul(h_prev, cell.Uh)), cell.b)
    gates = {
        "i": ad.sigmoid(ad.slice_(z, 0, d)),
        "f": ad.sigmoid(ad.slice_(z, d, 2 * d)),
        "c": ad.tanh(ad.slice_(z, 2 * d, 3 * d)),
        "o": ad.sigmoid(ad.slice_(z, 3 * d, 4 * d)),
    }
    if probe_prefix is not None:
        for g in ("i", "f", "o"):
            tape.register_probe(gates[g], f"{probe_prefix}.{GATE_NAMES[g]}_gate.t={t}")
    c_t = ad.add(ad.mul(gates["f"], c_prev), ad.mul(gates["i"], gates["c"]))
    if probe_prefix is not None and probe_cell:
        tape.register_probe(c_t, f"{probe_prefix}.cell.t={t}")
    h_t = ad.mul(gates["o"], ad.tanh(c_t))
    return h_t, c_t, gates


def run_lstm(cell: LstmCell, X: ad.Node, reverse: bool = False, probe_prefix: Optional[str] = None,
             probe_cell: bool = False):
    """Run one direction over the rows of ``X``; returns (hidden matrix node, LstmTrace)."""
    tape = X.tape
    n, d = X.shape[0], cell.d
    h = tape.leaf(np.zeros(d))
    c = tape.leaf(np.zeros(d))
    hs = [None] * n
    rec = {k: np.zeros((n, d)) for k in ("i", "f", "o", "c~", "c", "h")}
    for t in (range(n - 1, -1, -1) if reverse else range(n)):
        h, c, gates = lstm_step(cell, ad.row(X, t), h, c, probe_prefix, t, probe_cell)
        hs[t] = h
        rec["i"][t], rec["f"][t], rec["o"][t] = gates["i"].data, gates["f"].data, gates["o"].data
        rec["c~"][t], rec["c"][t], rec["h"][t] = gates["c"].data, c.data, h.data
    probes = {}
    if probe_prefix is not None:
        names = ("input", "forget", "output") + (("cell",) if probe_cell else ())
        for name in names:
            suffix = "cell" if name == "cell" else f"{name}_gate"
            probes[name] = [f"{probe_prefix}.{suffix}.t={t}" for t in range(n)]
    trace = LstmTrace(rec["i"], rec["f"], rec["o"], rec["c~"], rec["c"], rec["h"], probes)
    return ad.stack_rows(hs), trace


def encode_bilstm(bound: BoundParams, X: ad.Node, layer: str, sentence: str, trace: bool = False,
                  probe_cell: bool = False):
    """BiLSTM over ``X`` [len x r_in] -> ([len x 2d] node, {direction: LstmTrace}).

    The backward direction reads the sequence reversed; its outputs are stored
    at their original positions so both halves of row t describe token t.
    """
    if X.shape[0] < 1:
        raise ad.ShapeError("empty sequence")
    halves, traces = [], {}
    for direction in DIRECTIONS:
        prefix = f"{sentence}.{layer}.{direction}" if trace else None
        H, tr = run_lstm(bound.cell(layer, direction), X, reverse=direction == "bwd",
                         probe_prefix=prefix, probe_cell=probe_cell)
        halves.append(H)
        traces[direction] = tr
    return ad.concat(halves, axis=1), traces


def attention_energy(u_hat: ad.Node, v_hat: ad.Node, label: Optional[str] = "energy"):
    """Dot-product similarities e[i, j] = u_hat[i] . v_hat[j], registered as a probe."""
    if u_hat.shape[1] != v_hat.shape[1]:
        raise ad.ShapeError(f"hidden sizes differ: {u_hat.shape} vs {v_hat.shape}")
    e = ad.matmul(u_hat, ad.transpose(v_hat))
    handle = u_hat.tape.register_probe(e, label) if label else None
    return e, handle


def soft_align(e: ad.Node, u_hat: ad.Node, v_hat: ad.Node):
    """Returns (u_tilde, v_tilde, alpha, beta_t) where beta_t is [m x n], rows summing to 1."""
    if e.shape != (u_hat.shape[0], v_hat.shape[0]):
        raise ad.ShapeError("energy matrix does not match the two sequences")
    alpha = ad.softmax_rows(e)
    beta_t = ad.softmax_rows(ad.transpose(e))
    return ad.matmul(alpha, v_hat), ad.matmul(beta_t, u_hat), alpha, beta_t


def project(bound: BoundParams, x_hat: ad.Node, x_tilde: ad.Node) -> ad.Node:
    """ReLU(W_p [x, x~, x - x~, x * x~] + b_p) row-wise; W_p is shared by both sentences."""
    if x_hat.shape != x_tilde.shape:
        raise ad.ShapeError(f"{x_hat.shape} vs {x_tilde.shape}")
    a = ad.concat([x_hat, x_tilde, ad.sub(x_hat, x_tilde), ad.mul(x_hat, x_tilde)], axis=1)
    return ad.relu(ad.add(ad.matmul(a, bound["projector.W"]), bound["projector.b"]))


def classify(bound: BoundParams, p_hat: ad.Node, q_hat: ad.Node, dropout=None) -> ad.Node:
    """Max and mean pooling of both sequences, tanh hidden layer, 3 output logits."""
    feature = ad.concat([ad.reduce_max_rows(p_hat), ad.reduce_mean_rows(p_hat),
                         ad.reduce_max_rows(q_hat), ad.reduce_mean_rows(q_hat)], axis=0)
    if dropout is not None:
        feature = dropout(feature)
    hidden = ad.tanh(ad.add(ad.matmul(feature, bound["classifier.W_h"]), bound["classifier.b_h"]))
    return ad.add(ad.matmul(hidden, bound["classifier.W_o"]), bound["classifier.b_o"])


def _dropout_fn(rate, rng):
    if not rate:
        return None

    def apply(node):
        keep = (rng.random(node.shape) >= rate) / (1.0 - rate)
        return ad.mul(node, node.tape.leaf(keep))

    return apply


def forward(params: EsimParams, example: EncodedExample, trace: bool = False,
            requires_grad: bool = True, probe_cell: bool = False, perturb: Optional[dict] = None,
            dropout: float = 0.0, rng=None) -> ForwardTrace:
    """Run the full model on one encoded pair, on a fresh tape.

    With ``trace`` on, the energy matrix and every input/forget/output gate
    vector of all eight LSTM runs are registered as probes. ``perturb`` maps
    probe labels to additive offsets (finite-difference use only).
    """
    trace = trace or bool(perturb)  # perturbations are injected at probe registration
    tape = ad.Tape(perturb)
    bound = BoundParams(params, tape, requires_grad=requires_grad)
    drop = _dropout_fn(dropout, rng) if dropout else None
    lstm = {}
    encoded = {}
    for sentence, ids in zip(SENTENCES, (example.premise, example.hypothesis)):
        X = bound.embed(ids, sentence)
        if drop:
            X = drop(X)
        encoded[sentence], traces = encode_bilstm(bound, X, "input_lstm", sentence, trace, probe_cell)
        for direction, tr in traces.items():
            lstm[(sentence, "input_lstm", direction)] = tr
    u_hat, v_hat = encoded["premise"], encoded["hypothesis"]
    e, _ = attention_energy(u_hat, v_hat, "energy" if trace else None)
    u_tilde, v_tilde, alpha, beta_t = soft_align(e, u_hat, v_hat)
    projected = {"premise": project(bound, u_hat, u_tilde), "hypothesis": project(bound, v_hat, v_tilde)}
    inferred = {}
    for sentence in SENTENCES:
        inferred[sentence], traces = encode_bilstm(bound, projected[sentence], "inference_lstm",
                                                   sentence, trace, probe_cell)
        for direction, tr in traces.items():
            lstm[(sentence, "inference_lstm", direction)] = tr
    logits = classify(bound, inferred["premise"], inferred["hypothesis"], drop)
    return ForwardTrace(tape, logits, "energy", e.data.copy(), alpha.data.copy(), beta_t.data.T.copy(),
                        lstm, tuple(example.premise), tuple(example.hypothesis), bound)


def predict_logits(params: EsimParams, example: EncodedExample) -> np.ndarray:
    return forward(params, example, requires_grad=False).logits.copy()


def loss_and_grads(params: EsimParams, example: EncodedExample, into: Optional[dict] = None,
                   scale: float = 1.0, dropout: float = 0.0, rng=None):
    """Cross-entropy of one labelled example; gradients are added into ``into``."""
    tr = forward(params, example, dropout=dropout, rng=rng)
    loss = ad.cross_entropy(tr.logits_node, example.label)
    tr.tape.backward(loss)
    grads = tr.bound.gradients(into, scale)
    return float(loss.data), tr.predicted, grads
