"""Composable defenses around a model: spectral input filtering (M1), session
state isolation (M2), trajectory anomaly monitoring (M3), state-entropy
monitoring (M4), the Gaussian input mechanism (M5), and spectral robustness
training (M6)."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import StateTrajectory
from .grads import CrossEntropyLoss, backward, forward_tape, grad_params
from .metrics import state_entropy
from .model import StackedModel, forward_model
from .spectral import BandstopSpec, GainProfile, bandstop_filter, gain_profile
from .training import TrainConfig, TrainingDivergedError

__all__ = [
    "SensitivityViolationError",
    "MonitorAlert",
    "m1_filter",
    "SessionStatePool",
    "TrajectoryMonitor",
    "m3_monitor",
    "EntropyMonitor",
    "m4_monitor",
    "gaussian_sigma",
    "m5_gaussian",
    "band_project",
    "band_limited_pgd",
    "m6_spectral_training",
    "alerts_to_csv",
    "write_audit_log",
]


class SensitivityViolationError(ValueError):
    """Input rows exceed the declared l2 sensitivity bound."""


@dataclass(frozen=True)
class MonitorAlert:
    t: int
    kind: str
    score: float
    threshold: float
    input_side_z: float = 0.0


def alerts_to_csv(alerts, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "kind", "score", "threshold"])
        for a in alerts:
            writer.writerow([a.t, a.kind, repr(a.score), repr(a.threshold)])


# ---------------------------------------------------------------------------
# M1: spectral input filtering

def m1_filter(u: np.ndarray, profile: GainProfile, n_sigma: float = 2.0,
              embedding: bool = False, min_half_bandwidth: float = 0.1) -> np.ndarray:
    """Attenuate input energy inside the profile's high-gain bands.

    Continuous signals go through the order-4 Butterworth bandstop per stop
    band; embedded token features are filtered by zeroing the bands' DFT
    bins (a linear projection orthogonal to the high-gain directions). With
    no band above gamma the input passes through unchanged.
    """
    u = np.asarray(u, dtype=np.float64)
    bands = profile.stop_bands(n_sigma)
    if not bands:
        return u.copy()
    if embedding:
        T = u.shape[0]
        spec = np.fft.rfft(u, axis=0)
        freqs = 2.0 * np.pi * np.arange(spec.shape[0]) / T
        keep = np.ones(spec.shape[0], dtype=bool)
        for lo, hi in bands:
            width = max((hi - lo) / 2.0, 1e-9)
            center = 0.5 * (lo + hi)
            keep &= ~((freqs >= center - width) & (freqs <= center + width))
        spec[~keep] = 0.0
        return np.fft.irfft(spec, n=T, axis=0)
    out = u
    for lo, hi in bands:
        center = 0.5 * (lo + hi)
        half = max((hi - lo) / 2.0, min_half_bandwidth)
        out = bandstop_filter(out, BandstopSpec(center=center, half_bandwidth=half))
    return out


# ---------------------------------------------------------------------------
# M2: session state isolation

def _state_hash(states) -> str:
    digest = hashlib.blake2b(digest_size=8)
    for arr in states:
        digest.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return digest.hexdigest()


class SessionStatePool:
    """Per-(user, session) hidden-state pool with audited resets.

    States never leak across keys: lookups return the key's own buffers or a
    fresh initial state, and every reset appends an audit record carrying a
    64-bit hash of the pre-reset state (full vectors are never logged).
    """

    def __init__(self, state_factory, idle_limit: float = 1800.0, clock=None):
        self._factory = state_factory
        self.idle_limit = idle_limit
        self._clock = clock if clock is not None else time.time
        self._pool = {}
        self.audit = []

    def _log(self, key, event, states) -> None:
        self.audit.append({"ts": float(self._clock()), "key": list(key),
                           "event": event, "hash": _state_hash(states)})

    def get_or_create(self, key):
        key = tuple(key)
        entry = self._pool.get(key)
        now = float(self._clock())
        if entry is None:
            states = [np.array(s, dtype=np.float64) for s in self._factory()]
            self._pool[key] = {"states": states, "last_access": now}
            self._log(key, "create", states)
            return states
        entry["last_access"] = now
        return entry["states"]

    def update(self, key, states) -> None:
        key = tuple(key)
        if key not in self._pool:
            raise KeyError(f"unknown session key {key}")
        self._pool[key]["states"] = [np.array(s, dtype=np.float64) for s in states]
        self._pool[key]["last_access"] = float(self._clock())

    def reset(self, key) -> str:
        key = tuple(key)
        entry = self._pool.get(key)
        if entry is not None:
            self._log(key, "reset", entry["states"])
        states = [np.array(s, dtype=np.float64) for s in self._factory()]
        self._pool[key] = {"states": states, "last_access": float(self._clock())}
        return _state_hash(states)

    def sweep(self):
        """Reset every entry idle for longer than idle_limit; returns the keys."""
        now = float(self._clock())
        stale = [k for k, e in self._pool.items()
                 if now - e["last_access"] > self.idle_limit]
        for key in stale:
            self._log(key, "sweep-reset", self._pool[key]["states"])
            states = [np.array(s, dtype=np.float64) for s in self._factory()]
            self._pool[key] = {"states": states, "last_access": now}
        return stale

    def process(self, key, model: StackedModel, x):
        """Run the model for this session, persisting its hidden states."""
        states = self.get_or_create(key)
        result = forward_model(model, x, initial_states=states)
        self.update(key, result.final_states)
        return result


def write_audit_log(pool: SessionStatePool, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in pool.audit:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# M3: trajectory anomaly monitor

class TrajectoryMonitor:
    """EMA z-score monitor on per-step state deltas, gated on a quiet input side.

    Tracks exponential moving mean/variance of ||h_t - h_{t-1}|| (decay
    alpha) and of the input-norm change; flags a step when the state delta's
    z-score exceeds z_threshold while the input-side change sits no more
    than input_z_threshold standard deviations above its own running mean
    (a state spike without a matching input spike).
    """

    def __init__(self, alpha: float = 0.99, z_threshold: float = 4.0,
                 input_z_threshold: float = 0.1, warmup: int = 50,
                 floor: float = 1e-8):
        self.alpha = alpha
        self.z_threshold = z_threshold
        self.input_z_threshold = input_z_threshold
        self.warmup = warmup
        self.floor = floor
        self._prev_h = None
        self._prev_unorm = None
        self._t = 0
        self._state_mean = None
        self._state_var = 0.0
        self._input_mean = None
        self._input_var = 0.0

    def _zscore(self, x, mean, var):
        return (x - mean) / (np.sqrt(max(var, 0.0)) + self.floor)

    def update(self, h_t: np.ndarray, u_t: np.ndarray):
        h_t = np.asarray(h_t, dtype=np.float64)
        unorm = float(np.linalg.norm(np.asarray(u_t, dtype=np.float64)))
        alert = None
        if self._prev_h is not None:
            sd = float(np.linalg.norm(h_t - self._prev_h))
            ic = abs(unorm - self._prev_unorm)
            if self._state_mean is None:
                self._state_mean, self._input_mean = sd, ic
            else:
                z_state = self._zscore(sd, self._state_mean, self._state_var)
                z_input = self._zscore(ic, self._input_mean, self._input_var)
                if (self._t >= self.warmup and z_state > self.z_threshold
                        and z_input < self.input_z_threshold):
                    alert = MonitorAlert(t=self._t, kind="trajectory-spike",
                                         score=float(z_state),
                                         threshold=self.z_threshold,
                                         input_side_z=float(z_input))
                a = self.alpha
                self._state_var = a * self._state_var + (1 - a) * (sd - self._state_mean) ** 2
                self._state_mean = a * self._state_mean + (1 - a) * sd
                self._input_var = a * self._input_var + (1 - a) * (ic - self._input_mean) ** 2
                self._input_mean = a * self._input_mean + (1 - a) * ic
        self._prev_h = h_t.copy()
        self._prev_unorm = unorm
        self._t += 1
        return alert


def m3_monitor(traj, inputs, alpha: float = 0.99, z_threshold: float = 4.0,
               input_z_threshold: float = 0.1, warmup: int = 50):
    """Stream a whole trajectory through the monitor; returns the alert list.

    ``traj`` holds h_0..h_T; ``inputs`` the aligned u_1..u_T (the step
    feeding h_t). Streaming order is preserved.
    """
    states = traj.states if isinstance(traj, StateTrajectory) else np.asarray(traj)
    inputs = np.asarray(inputs, dtype=np.float64)
    if states.shape[0] != inputs.shape[0] + 1:
        raise ValueError("need T+1 states for T inputs")
    mon = TrajectoryMonitor(alpha=alpha, z_threshold=z_threshold,
                            input_z_threshold=input_z_threshold, warmup=warmup)
    alerts = []
    mon.update(states[0], np.zeros_like(inputs[0]))
    for t in range(inputs.shape[0]):
        alert = mon.update(states[t + 1], inputs[t])
        if alert is not None:
            alerts.append(alert)
    return alerts


# ---------------------------------------------------------------------------
# M4: state-entropy monitor

class EntropyMonitor:
    """Rolling-window Gaussian state-entropy estimate with a hard ceiling."""

    def __init__(self, h_max: float = 5.5, window: int = 64):
        self.h_max = h_max
        self.window = window
        self._buf = deque(maxlen=window)
        self._t = 0

    def update(self, h_t: np.ndarray):
        self._buf.append(np.asarray(h_t, dtype=np.float64))
        alert = None
        if len(self._buf) == self.window:
            est = state_entropy(np.stack(self._buf), window_size=self.window)
            if est > self.h_max:
                alert = MonitorAlert(t=self._t, kind="entropy-exceeded",
                                     score=float(est), threshold=self.h_max)
        self._t += 1
        return alert


def m4_monitor(traj, window: int = 64, h_max: float = 5.5):
    """Roll the entropy monitor over a trajectory; returns the alert list."""
    states = traj.states if isinstance(traj, StateTrajectory) else np.asarray(traj)
    mon = EntropyMonitor(h_max=h_max, window=window)
    alerts = []
    for row in states:
        alert = mon.update(row)
        if alert is not None:
            alerts.append(alert)
    return alerts


# ---------------------------------------------------------------------------
# M5: Gaussian input mechanism

def gaussian_sigma(eps_dp: float, delta_dp: float, delta_f: float) -> float:
    """Noise scale delta_f * sqrt(2 ln(1.25/delta)) / eps."""
    if eps_dp <= 0 or not 0.0 < delta_dp < 1.0 or delta_f <= 0:
        raise ValueError("need eps_dp > 0, 0 < delta_dp < 1, delta_f > 0")
    return delta_f * np.sqrt(2.0 * np.log(1.25 / delta_dp)) / eps_dp


def m5_gaussian(u: np.ndarray, eps_dp: float, delta_dp: float, delta_f: float,
                seed: int = 0, audit: list | None = None) -> np.ndarray:
    """Add i.i.d. Gaussian noise at the mechanism's scale to pre-normalized rows.

    Every row must satisfy ||u_t||_2 <= delta_f (the declared sensitivity);
    the (eps, delta, sigma) triple is appended to ``audit`` when given.
    """
    u = np.asarray(u, dtype=np.float64)
    sigma = gaussian_sigma(eps_dp, delta_dp, delta_f)
    row_norms = np.linalg.norm(np.atleast_2d(u), axis=-1)
    if np.any(row_norms > delta_f * (1.0 + 1e-9)):
        raise SensitivityViolationError(
            f"row norm {row_norms.max():.4g} exceeds sensitivity {delta_f}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x0D9])))
    noised = u + sigma * rng.standard_normal(u.shape)
    if audit is not None:
        audit.append({"eps_dp": eps_dp, "delta_dp": delta_dp, "sigma": sigma})
    return noised


# ---------------------------------------------------------------------------
# M6: spectral robustness training

def band_project(delta: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Project each item's (T, D) delta onto the [lo, hi] frequency band."""
    T = delta.shape[-2]
    spec = np.fft.rfft(delta, axis=-2)
    freqs = 2.0 * np.pi * np.arange(spec.shape[-2]) / T
    mask = (freqs >= lo) & (freqs <= hi)
    if not np.any(mask):
        mask[np.argmin(np.abs(freqs - 0.5 * (lo + hi)))] = True
    shape = [1] * delta.ndim
    shape[-2] = mask.shape[0]
    spec = spec * mask.reshape(shape)
    return np.fft.irfft(spec, n=T, axis=-2)


def band_limited_pgd(model: StackedModel, x: np.ndarray, labels, epsilon: float,
                     lo: float, hi: float, steps: int = 5) -> np.ndarray:
    """Inner maximization of Eq.-style robust training: l2-ball, band-limited.

    Every iterate is re-projected onto the frequency band and renormalized
    into the l2 ball of radius epsilon (per batch item).
    """
    x = np.asarray(x, dtype=np.float64)
    B = x.shape[0]
    delta = np.zeros_like(x)
    loss = CrossEntropyLoss(labels)
    step_size = epsilon / 2.0
    for _ in range(steps):
        tape = forward_tape(model, x + delta)
        _, seeds = loss.evaluate(tape)
        d_in, _ = backward(tape, d_logits=seeds["d_logits"], want_params=False)
        norms = np.linalg.norm(d_in.reshape(B, -1), axis=1).reshape(B, 1, 1)
        delta = delta + step_size * d_in / np.maximum(norms, 1e-12)
        delta = band_project(delta, lo, hi)
        dn = np.linalg.norm(delta.reshape(B, -1), axis=1).reshape(B, 1, 1)
        delta = delta * np.minimum(1.0, epsilon / np.maximum(dn, 1e-12))
    return delta


def m6_spectral_training(model: StackedModel, dataset, cfg: TrainConfig,
                         epsilon: float, half_bandwidth: float = 0.3,
                         refresh_every: int = 50, inner_steps: int = 5,
                         profile_fn=None):
    """Adversarial training against band-limited perturbations at omega*.

    The worst frequency is re-estimated every ``refresh_every`` optimizer
    steps from the first layer's gain profile (or a custom ``profile_fn``).
    With epsilon = 0 this reduces exactly to standard training: the inner
    loop is skipped and the arithmetic matches train_classifier step for
    step.
    """
    inputs, labels = dataset
    inputs = np.asarray(inputs)
    labels = np.asarray(labels, dtype=np.int64)
    if profile_fn is None:
        def profile_fn(m):
            return gain_profile(m.layers[0].discretize(), 512)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    params = model.parameters()
    losses = []
    omega_star = None
    step_count = 0
    n = inputs.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for lo_i in range(0, n, cfg.batch_size):
            idx = order[lo_i:lo_i + cfg.batch_size]
            batch_inputs = inputs[idx]
            if epsilon > 0:
                if omega_star is None or step_count % refresh_every == 0:
                    omega_star = profile_fn(model).omega_star
                if np.issubdtype(batch_inputs.dtype, np.integer):
                    x = model.embedding[batch_inputs]
                else:
                    x = batch_inputs.astype(np.float64)
                delta = band_limited_pgd(model, x, labels[idx], epsilon,
                                         max(omega_star - half_bandwidth, 0.0),
                                         min(omega_star + half_bandwidth, np.pi),
                                         steps=inner_steps)
                # robust phase runs in embedding space, so token embeddings
                # receive no gradient here
                grads, loss_val = grad_params(model, x + delta,
                                              CrossEntropyLoss(labels[idx]))
            else:
                grads, loss_val = grad_params(model, batch_inputs,
                                              CrossEntropyLoss(labels[idx]),
                                              state_decay=cfg.lambda_decay,
                                              freeze=cfg.freeze)
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(f"loss diverged to {loss_val}")
            for name, p in params:
                p -= cfg.learning_rate * grads[name]
            epoch_loss += loss_val
            n_batches += 1
            step_count += 1
        losses.append(epoch_loss / n_batches)
    return model, losses
