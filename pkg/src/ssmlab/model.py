"""Stacked SSM classifier models: layers, forward pass, serialization.

A StackedModel is an embedding (for token inputs), a list of diagonal-LTI
or selective SSM layers with pointwise smooth activation and optional
residual connections, and a mean-pool + linear readout.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .core import (
    ContinuousSsm,
    DiscreteSsm,
    GateOverflowError,
    SelectiveSsm,
    StateTrajectory,
    hippo_legs,
    zoh_discretize,
)

__all__ = [
    "LtiLayer",
    "SelectiveLayer",
    "StackedModel",
    "ForwardResult",
    "forward_model",
    "embed_tokens",
    "save_model",
    "load_model",
    "model_to_json",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

MAGIC = b"SSMLAB1\x00"
FORMAT_VERSION = 1


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def zoh_real(log_neg_a: np.ndarray, step: float):
    """Real-eigenvalue ZOH pieces used by trainable layers.

    Returns (a, s, a_bar, phi) with a = -exp(log_neg_a), s = step*a,
    a_bar = exp(s) and phi = (exp(s)-1)/s; b_bar = phi[:, None]*b.
    """
    a = -np.exp(np.minimum(log_neg_a, 30.0))  # cap keeps runaway SGD steps finite
    s = step * a
    a_bar = np.exp(s)
    small = np.abs(s) < 1e-8
    phi = np.where(small, 1.0 + s / 2.0 + s * s / 6.0, np.expm1(s) / np.where(small, 1.0, s))
    return a, s, a_bar, phi


class LtiLayer:
    """Trainable diagonal MIMO LTI layer (continuous params, ZOH each forward)."""

    kind = "lti"

    def __init__(self, n_state: int, d_io: int, step: float = 0.01, rng=None,
                 residual: bool = True, activation: bool = True, feedthrough: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_state = n_state
        self.d_io = d_io
        self.step = float(step)
        self.residual = bool(residual)
        self.activation = bool(activation)
        self.feedthrough = bool(feedthrough)
        # spectrum init from the scaled-Legendre diagonal: a_n = -(2n+1)
        self.log_neg_a = np.log(2.0 * np.arange(n_state) + 1.0)
        # fixed per-mode input gain 1 - a_bar(init): balances the gradient
        # curvature across slow and fast modes so one plain-SGD rate fits all
        _, _, a_bar0, _ = zoh_real(self.log_neg_a, self.step)
        self.input_scale = 1.0 - a_bar0
        self.b = rng.standard_normal((n_state, d_io)) / np.sqrt(d_io)
        self.c = rng.standard_normal((d_io, n_state)) / np.sqrt(n_state)
        self.d = np.zeros((d_io, d_io))

    def effective_b(self) -> np.ndarray:
        return self.input_scale[:, None] * self.b

    def discretize(self) -> DiscreteSsm:
        a, _, _, _ = zoh_real(self.log_neg_a, self.step)
        cont = ContinuousSsm(a_diag=a, b=self.effective_b(), c=self.c, d=self.d)
        return zoh_discretize(cont, self.step)

    def parameters(self):
        out = [("log_neg_a", self.log_neg_a), ("b", self.b), ("c", self.c)]
        if self.feedthrough:
            out.append(("d", self.d))
        return out

    def config(self):
        return {"kind": self.kind, "n_state": self.n_state, "d_io": self.d_io,
                "step": self.step, "residual": self.residual,
                "activation": self.activation, "feedthrough": self.feedthrough}


class SelectiveLayer:
    """Trainable input-gated layer; gates shared across per-channel state banks."""

    kind = "selective"

    def __init__(self, n_state: int, d_io: int, rng=None, residual: bool = True,
                 activation: bool = True, feedthrough: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_state = n_state
        self.d_io = d_io
        self.residual = bool(residual)
        self.activation = bool(activation)
        self.feedthrough = bool(feedthrough)
        # a_log spread so resting gates (delta = softplus(0)) give slow-to-fast decay
        self.rho = np.log(np.geomspace(0.005, 0.2, n_state))
        self.w_delta = rng.standard_normal((n_state, d_io)) * (0.5 / np.sqrt(d_io))
        self.w_b = rng.standard_normal((n_state, d_io)) / np.sqrt(d_io)
        self.c = rng.standard_normal((d_io, n_state)) / np.sqrt(n_state)
        self.d = np.zeros((d_io, d_io))

    @property
    def a_log(self) -> np.ndarray:
        return np.exp(self.rho)

    def as_selective_ssm(self) -> SelectiveSsm:
        return SelectiveSsm(a_log=self.a_log, w_delta=self.w_delta, w_b=self.w_b,
                            c=self.c, d=self.d)

    def parameters(self):
        out = [("rho", self.rho), ("w_delta", self.w_delta), ("w_b", self.w_b), ("c", self.c)]
        if self.feedthrough:
            out.append(("d", self.d))
        return out

    def config(self):
        return {"kind": self.kind, "n_state": self.n_state, "d_io": self.d_io,
                "residual": self.residual, "activation": self.activation,
                "feedthrough": self.feedthrough}


class StackedModel:
    """Embedding + stacked SSM layers + mean-pool linear readout."""

    def __init__(self, layers, d_model: int, n_out: int = 2, vocab: int | None = None,
                 alphabet: str | None = None, rng=None, seed: int | None = None,
                 readout: str = "mean"):
        rng = rng if rng is not None else np.random.default_rng(seed or 0)
        if not layers:
            raise ValueError("need at least one layer")
        for lyr in layers:
            if lyr.d_io != d_model:
                raise ValueError("layer width does not match d_model")
        if readout not in ("mean", "last"):
            raise ValueError("readout must be 'mean' or 'last'")
        if alphabet is not None:
            vocab = len(alphabet)
        self.layers = list(layers)
        self.d_model = d_model
        self.n_out = n_out
        self.alphabet = alphabet
        self.readout = readout
        self.embedding = rng.standard_normal((vocab, d_model)) if vocab else None
        self.w_out = rng.standard_normal((d_model, n_out)) / np.sqrt(d_model)
        self.b_out = np.zeros(n_out)
        self.seed = seed

    @classmethod
    def build(cls, n_layers: int = 4, n_state: int = 128, d_model: int = 16,
              n_out: int = 2, alphabet: str | None = "ACGT", step: float = 0.01,
              layer_kind: str = "lti", residual: bool = True, activation: bool = True,
              feedthrough: bool = True, seed: int = 0, readout: str = "mean",
              vocab: int | None = None):
        """Default classifier: 4 diagonal layers, binary readout, configurable sizes."""
        rng = np.random.default_rng(seed)
        layers = []
        for _ in range(n_layers):
            if layer_kind == "lti":
                layers.append(LtiLayer(n_state, d_model, step=step, rng=rng,
                                       residual=residual, activation=activation,
                                       feedthrough=feedthrough))
            elif layer_kind == "selective":
                layers.append(SelectiveLayer(n_state, d_model, rng=rng,
                                             residual=residual, activation=activation,
                                             feedthrough=feedthrough))
            else:
                raise ValueError(f"unknown layer kind {layer_kind!r}")
        return cls(layers, d_model=d_model, n_out=n_out, alphabet=alphabet, rng=rng,
                   seed=seed, readout=readout, vocab=vocab)

    def parameters(self):
        """Flat (name, array) list; arrays are the live parameter buffers."""
        out = []
        if self.embedding is not None:
            out.append(("embedding", self.embedding))
        for i, lyr in enumerate(self.layers):
            out.extend((f"layers.{i}.{n}", p) for n, p in lyr.parameters())
        out.append(("w_out", self.w_out))
        out.append(("b_out", self.b_out))
        return out

    def n_parameters(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def copy(self) -> "StackedModel":
        clone = _model_from_config(self.config())
        for (_, dst), (_, src) in zip(clone.parameters(), self.parameters()):
            dst[...] = src
        return clone

    def config(self):
        return {"d_model": self.d_model, "n_out": self.n_out, "alphabet": self.alphabet,
                "vocab": None if self.embedding is None else int(self.embedding.shape[0]),
                "seed": self.seed, "readout": self.readout,
                "layers": [lyr.config() for lyr in self.layers]}


def _model_from_config(cfg) -> StackedModel:
    layers = []
    for lc in cfg["layers"]:
        if lc["kind"] == "lti":
            layers.append(LtiLayer(lc["n_state"], lc["d_io"], step=lc["step"],
                                   residual=lc["residual"], activation=lc["activation"],
                                   feedthrough=lc["feedthrough"]))
        else:
            layers.append(SelectiveLayer(lc["n_state"], lc["d_io"],
                                         residual=lc["residual"], activation=lc["activation"],
                                         feedthrough=lc["feedthrough"]))
    return StackedModel(layers, d_model=cfg["d_model"], n_out=cfg["n_out"],
                        vocab=cfg["vocab"], alphabet=cfg["alphabet"], seed=cfg["seed"],
                        readout=cfg.get("readout", "mean"))


def embed_tokens(model: StackedModel, tokens) -> np.ndarray:
    """Map token ids (or alphabet symbols) to embedding vectors; (T, D)."""
    if model.embedding is None:
        raise ValueError("model has no embedding table")
    if isinstance(tokens, str):
        if model.alphabet is None:
            raise ValueError("model has no alphabet for symbol input")
        lut = {ch: i for i, ch in enumerate(model.alphabet)}
        try:
            ids = np.array([lut[ch] for ch in tokens], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"unknown token {exc.args[0]!r}") from None
    else:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= model.embedding.shape[0]):
            raise ValueError("token id outside embedding table")
    if ids.ndim != 1 or ids.shape[0] < 1:
        raise ValueError("need a non-empty 1-D token sequence")
    return model.embedding[ids]


@dataclass
class ForwardResult:
    logits: np.ndarray
    trajectories: list
    y_seq: np.ndarray
    final_states: list = field(default_factory=list)


def _layer_forward(lyr, x: np.ndarray, h0=None):
    """Single-sequence layer forward; returns (out, states_flat, final_state)."""
    T = x.shape[0]
    if lyr.kind == "lti":
        sysd = lyr.discretize()
        a_bar = sysd.a_bar.real
        b_bar = sysd.b_bar.real
        h = np.zeros(lyr.n_state) if h0 is None else np.asarray(h0, dtype=np.float64).copy()
        hist = np.empty((T + 1, lyr.n_state))
        hist[0] = h
        drive = x @ b_bar.T
        for t in range(T):
            h = a_bar * h + drive[t]
            hist[t + 1] = h
        y_lin = hist[1:] @ lyr.c.T + x @ lyr.d.T
        states = hist
    else:
        ssm = lyr.as_selective_ssm()
        from .core import selective_gates
        delta, a_bar_t, b_bar_t = selective_gates(ssm, x)
        h = (np.zeros((lyr.d_io, lyr.n_state)) if h0 is None
             else np.asarray(h0, dtype=np.float64).reshape(lyr.d_io, lyr.n_state).copy())
        hist = np.empty((T + 1, lyr.d_io, lyr.n_state))
        hist[0] = h
        for t in range(T):
            h = a_bar_t[t][None, :] * h + b_bar_t[t][None, :] * x[t][:, None]
            hist[t + 1] = h
        y_lin = np.einsum("tcn,cn->tc", hist[1:], lyr.c) + x @ lyr.d.T
        states = hist.reshape(T + 1, lyr.d_io * lyr.n_state)
    out = gelu(y_lin) if lyr.activation else y_lin
    if lyr.residual:
        out = out + x
    return out, states, states[-1].copy()


def forward_model(model: StackedModel, x, initial_states=None, seq_id: str = "") -> ForwardResult:
    """Deterministic forward pass returning logits and every layer's trajectory.

    ``x`` is either a token sequence (ids or alphabet string) or a finite
    (T, D) real array. ``initial_states`` optionally resumes each layer from
    stored hidden states (stateful serving).
    """
    if isinstance(x, str) or (np.asarray(x).ndim == 1 and model.embedding is not None):
        feats = embed_tokens(model, x)
    else:
        feats = np.asarray(x, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError("continuous input must be (T, D)")
        if feats.shape[0] < 1:
            raise ValueError("need T >= 1")
        if not np.all(np.isfinite(feats)):
            raise ValueError("input must be finite")
        if feats.shape[1] != model.d_model:
            raise ValueError("input width does not match model")
    trajs, finals = [], []
    cur = feats
    for i, lyr in enumerate(model.layers):
        h0 = None if initial_states is None else initial_states[i]
        cur, states, final = _layer_forward(lyr, cur, h0=h0)
        trajs.append(StateTrajectory(states=states, layer_index=i, seq_id=seq_id))
        finals.append(final)
    pooled = cur.mean(axis=0) if model.readout == "mean" else cur[-1]
    logits = pooled @ model.w_out + model.b_out
    return ForwardResult(logits=logits, trajectories=trajs, y_seq=cur, final_states=finals)


# ---------------------------------------------------------------------------
# serialization: versioned binary container, little-endian float64 + JSON header

def _array_entries(model: StackedModel):
    return [(name, np.ascontiguousarray(arr, dtype=np.float64))
            for name, arr in model.parameters()]


def save_model(model: StackedModel, path) -> None:
    """Write the versioned binary container (JSON header + LE float64 payload)."""
    entries = _array_entries(model)
    header = {"format_version": FORMAT_VERSION, "model": model.config(),
              "arrays": [{"name": n, "shape": list(a.shape)} for n, a in entries]}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(arr.astype("<f8").tobytes())


def load_model(path) -> StackedModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError("not a model container (bad magic)")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported container version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        model = _model_from_config(header["model"])
        params = dict(model.parameters())
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape)
            params[spec["name"]][...] = arr
    return model


def model_to_json(model: StackedModel) -> str:
    """Debug text dump: config plus parameter arrays as JSON lists."""
    payload = {"format_version": FORMAT_VERSION, "model": model.config(),
               "arrays": {n: a.tolist() for n, a in model.parameters()}}
    return json.dumps(payload, sort_keys=True)
