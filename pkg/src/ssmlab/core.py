"""Diagonal LTI and selective state-space primitives.

Implements the continuous-time diagonal state space, its zero-order-hold
discretization, the recurrent scan, the impulse-response (convolution)
kernel, and the input-gated selective scan. Everything here is a pure
function of its inputs; systems are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DiscretizationOverflowError",
    "GateOverflowError",
    "ContinuousSsm",
    "DiscreteSsm",
    "SelectiveSsm",
    "StateTrajectory",
    "hippo_legs",
    "zoh_discretize",
    "lti_scan",
    "conv_kernel",
    "apply_kernel",
    "selective_scan",
    "expand_conjugate_pairs",
]

A_BAR_CLAMP = 1.0 - 1e-12


class DiscretizationOverflowError(FloatingPointError):
    """Discretization produced a nonfinite system."""


class InvariantViolationError(RuntimeError):
    """A proved invariant was violated numerically; treated as a hard failure."""


class GateOverflowError(FloatingPointError):
    """Selective gate values became nonfinite during a scan."""


def hippo_legs(n: int) -> np.ndarray:
    """Scaled-Legendre memory matrix of size n x n.

    Lower triangular with A[i, j] = -sqrt(2i+1) * sqrt(2j+1) for j <= i
    and zero above the diagonal; its eigenvalues are the strictly negative
    diagonal entries -(2i+1).
    """
    if n < 1:
        raise ValueError(f"matrix size must be >= 1, got {n}")
    root = np.sqrt(2.0 * np.arange(n) + 1.0)
    mat = -np.outer(root, root)
    return np.tril(mat)


def _as_2d(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {out.shape}")
    return out


@dataclass(frozen=True)
class ContinuousSsm:
    """Continuous-time diagonal system dh/dt = diag(a) h + b u, y = c h + d u.

    ``a_diag`` may be real or complex; complex eigenvalues are expected in
    conjugate pairs (with matching rows of ``b`` and columns of ``c``) so
    that input/output behaviour stays real. Stability (all real parts
    strictly negative) is enforced at construction.
    """

    a_diag: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a_diag, dtype=np.complex128))
        if a.ndim != 1:
            raise ValueError("a_diag must be a vector")
        if not np.all(np.isfinite(a)):
            raise ValueError("a_diag must be finite")
        if np.any(a.real >= 0):
            raise ValueError("unstable system: every eigenvalue needs real part < 0")
        b = _as_2d(self.b, "b")
        c = _as_2d(self.c, "c")
        d = _as_2d(self.d, "d")
        n = a.shape[0]
        if b.shape[0] != n or c.shape[1] != n:
            raise ValueError(f"b/c shapes {b.shape}/{c.shape} inconsistent with n_state={n}")
        if b.shape[1] != c.shape[0] or d.shape != (c.shape[0], b.shape[1]):
            raise ValueError("b, c, d input/output widths do not chain")
        object.__setattr__(self, "a_diag", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", d)

    @property
    def n_state(self) -> int:
        return self.a_diag.shape[0]

    @property
    def d_io(self) -> int:
        return self.b.shape[1]

    @property
    def is_real(self) -> bool:
        return bool(np.all(self.a_diag.imag == 0.0))


@dataclass(frozen=True)
class DiscreteSsm:
    """Discrete diagonal system h_t = a_bar * h_{t-1} + b_bar u_t, y_t = c h_t + d u_t."""

    a_bar: np.ndarray
    b_bar: np.ndarray
    c: np.ndarray
    d: np.ndarray
    step: float = 1.0

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a_bar, dtype=np.complex128))
        if not np.all(np.isfinite(a)):
            raise ValueError("a_bar must be finite")
        if np.any(np.abs(a) >= 1.0):
            raise ValueError("discrete instability: need |a_bar| < 1 for all modes")
        if self.step <= 0:
            raise ValueError("step must be > 0")
        b = np.asarray(self.b_bar, dtype=np.complex128)
        if b.ndim != 2:
            raise ValueError("b_bar must be 2-D")
        c = _as_2d(self.c, "c")
        d = _as_2d(self.d, "d")
        n = a.shape[0]
        if b.shape[0] != n or c.shape[1] != n:
            raise ValueError(f"b_bar/c shapes {b.shape}/{c.shape} inconsistent with n_state={n}")
        if b.shape[1] != c.shape[0] or d.shape != (c.shape[0], b.shape[1]):
            raise ValueError("b_bar, c, d input/output widths do not chain")
        object.__setattr__(self, "a_bar", a)
        object.__setattr__(self, "b_bar", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", d)

    @property
    def n_state(self) -> int:
        return self.a_bar.shape[0]

    @property
    def d_io(self) -> int:
        return self.b_bar.shape[1]

    @property
    def is_real(self) -> bool:
        return bool(np.all(self.a_bar.imag == 0.0) and np.all(self.b_bar.imag == 0.0))


@dataclass(frozen=True)
class SelectiveSsm:
    """Input-gated diagonal system (per-channel independent states).

    Per step: delta_t = softplus(w_delta @ u_t), a_bar_t = exp(-exp(delta_t) * a_log),
    b_bar_t = w_b @ u_t, and each input channel ch drives its own n-state bank:
    h_t[ch] = a_bar_t * h_{t-1}[ch] + b_bar_t * u_t[ch]. Output y_t[ch] =
    c[ch] . h_t[ch] + (d @ u_t)[ch].
    """

    a_log: np.ndarray
    w_delta: np.ndarray
    w_b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        a_log = np.atleast_1d(np.asarray(self.a_log, dtype=np.float64))
        if np.any(a_log <= 0) or not np.all(np.isfinite(a_log)):
            raise ValueError("a_log entries must be finite and > 0")
        wd = _as_2d(self.w_delta, "w_delta")
        wb = _as_2d(self.w_b, "w_b")
        c = _as_2d(self.c, "c")
        d = _as_2d(self.d, "d")
        n = a_log.shape[0]
        if wd.shape[0] != n or wb.shape[0] != n or c.shape[1] != n:
            raise ValueError("w_delta/w_b/c inconsistent with n_state")
        if wd.shape[1] != c.shape[0] or wb.shape[1] != c.shape[0] or d.shape != (c.shape[0], c.shape[0]):
            raise ValueError("projection widths do not chain")
        object.__setattr__(self, "a_log", a_log)
        object.__setattr__(self, "w_delta", wd)
        object.__setattr__(self, "w_b", wb)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", d)

    @property
    def n_state(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_io(self) -> int:
        return self.c.shape[0]


@dataclass(frozen=True)
class StateTrajectory:
    """Hidden states h_0..h_T for one layer and one input sequence.

    States are stored as real vectors; complex-mode systems stack real and
    imaginary parts so that euclidean norms match the complex-state norms.
    """

    states: np.ndarray
    layer_index: int = 0
    seq_id: str = ""

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        if states.ndim != 2:
            raise ValueError("states must be a (T+1, n) array")
        if not np.all(np.isfinite(states)):
            raise ValueError("trajectory contains nonfinite states")
        object.__setattr__(self, "states", states)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    def norms(self) -> np.ndarray:
        """Per-step euclidean state norms, length T+1."""
        return np.linalg.norm(self.states, axis=1)


def _real_states(h_hist: np.ndarray, is_real: bool) -> np.ndarray:
    if is_real:
        return np.ascontiguousarray(h_hist.real)
    return np.concatenate([h_hist.real, h_hist.imag], axis=1)


def zoh_discretize(sys: ContinuousSsm, step: float) -> DiscreteSsm:
    """Zero-order-hold discretization of a stable continuous system.

    a_bar = exp(step * a); b_bar row i = (step*a_i)^{-1} (exp(step*a_i) - 1) * b_i,
    with the small-|a| limit b_bar = step * b. Discrete magnitudes are clamped
    to 1 - 1e-12 to keep long scans strictly stable.
    """
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    s = step * sys.a_diag
    a_bar = np.exp(s)
    mag = np.abs(a_bar)
    scale = np.minimum(1.0, A_BAR_CLAMP / np.maximum(mag, 1e-300))
    a_bar = a_bar * scale
    # phi(s) = (e^s - 1)/s with a series branch near s = 0
    small = np.abs(s) < 1e-8
    phi = np.where(small, 1.0 + s / 2.0 + s**2 / 6.0, (np.exp(s) - 1.0) / np.where(small, 1.0, s))
    b_bar = phi[:, None] * sys.b
    # prescribed singular-point handling: essentially-zero eigenvalues fall
    # back to the step-scaled input map
    degenerate = np.abs(sys.a_diag) < 1e-12
    if np.any(degenerate):
        b_bar[degenerate] = step * sys.b[degenerate]
    if not (np.all(np.isfinite(a_bar)) and np.all(np.isfinite(b_bar))):
        raise DiscretizationOverflowError("zoh discretization produced nonfinite values")
    return DiscreteSsm(a_bar=a_bar, b_bar=b_bar, c=sys.c, d=sys.d, step=step)


def lti_scan(sys: DiscreteSsm, u: np.ndarray, h0: np.ndarray | None = None):
    """Unroll the exact recurrence; returns (y, trajectory with h_0..h_T)."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] < 1:
        raise ValueError("u must be a (T, D) array with T >= 1")
    if u.shape[1] != sys.d_io:
        raise ValueError(f"u has {u.shape[1]} channels, system expects {sys.d_io}")
    if not np.all(np.isfinite(u)):
        raise ValueError("u must be finite")
    n = sys.n_state
    if h0 is None:
        h = np.zeros(n, dtype=np.complex128)
    else:
        h = np.asarray(h0, dtype=np.complex128).copy()
        if h.shape != (n,) or not np.all(np.isfinite(h)):
            raise ValueError("h0 must be a finite length-n vector")
    T = u.shape[0]
    h_hist = np.empty((T + 1, n), dtype=np.complex128)
    h_hist[0] = h
    drive = u @ sys.b_bar.T
    for t in range(T):
        h = sys.a_bar * h + drive[t]
        h_hist[t + 1] = h
    y = (h_hist[1:] @ sys.c.T).real + u @ sys.d.T
    traj = StateTrajectory(states=_real_states(h_hist, sys.is_real))
    return y, traj


def conv_kernel(sys: DiscreteSsm, length: int) -> np.ndarray:
    """Impulse-response kernel K_t = c a_bar^t b_bar for t = 0..length-1.

    K_0 = c b_bar matches the scan convention where u_t already updates h_t.
    Shape (length, D, D); convolving with the input and adding d u reproduces
    lti_scan exactly.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    powers = sys.a_bar[None, :] ** np.arange(length)[:, None]  # (L, N)
    # K[t] = c @ diag(a^t) @ b_bar
    kern = np.einsum("dn,ln,ne->lde", sys.c.astype(np.complex128), powers, sys.b_bar)
    return kern.real


def apply_kernel(kernel: np.ndarray, u: np.ndarray, d: np.ndarray | None = None) -> np.ndarray:
    """Causal convolution y_t = sum_s K_s u_{t-s} (+ d u_t), truncated to len(u)."""
    u = np.asarray(u, dtype=np.float64)
    T = u.shape[0]
    L = min(kernel.shape[0], T)
    y = np.zeros((T, kernel.shape[1]))
    for s in range(L):
        y[s:] += u[: T - s] @ kernel[s].T
    if d is not None:
        y += u @ np.asarray(d, dtype=np.float64).T
    return y


def selective_gates(sys: SelectiveSsm, u: np.ndarray):
    """Per-step gate quantities (delta_t, a_bar_t, b_bar_t) for input u."""
    u = np.asarray(u, dtype=np.float64)
    z = u @ sys.w_delta.T  # (T, N)
    delta = np.logaddexp(0.0, z)  # softplus
    a_bar = np.exp(-np.exp(delta) * sys.a_log)
    b_bar = u @ sys.w_b.T
    if not (np.all(np.isfinite(delta)) and np.all(np.isfinite(a_bar)) and np.all(np.isfinite(b_bar))):
        raise GateOverflowError("selective gates produced nonfinite values")
    return delta, a_bar, b_bar


def selective_scan(sys: SelectiveSsm, u: np.ndarray, h0: np.ndarray | None = None):
    """Input-gated scan; returns (y, trajectory of flattened (D*N) states)."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] < 1:
        raise ValueError("u must be a (T, D) array with T >= 1")
    if u.shape[1] != sys.d_io:
        raise ValueError(f"u has {u.shape[1]} channels, system expects {sys.d_io}")
    if not np.all(np.isfinite(u)):
        raise ValueError("u must be finite")
    T, d_io = u.shape
    n = sys.n_state
    delta, a_bar, b_bar = selective_gates(sys, u)
    if h0 is None:
        h = np.zeros((d_io, n))
    else:
        h = np.asarray(h0, dtype=np.float64).reshape(d_io, n).copy()
        if not np.all(np.isfinite(h)):
            raise ValueError("h0 must be finite")
    h_hist = np.empty((T + 1, d_io, n))
    h_hist[0] = h
    for t in range(T):
        h = a_bar[t][None, :] * h + b_bar[t][None, :] * u[t][:, None]
        h_hist[t + 1] = h
    y = np.einsum("tcn,cn->tc", h_hist[1:], sys.c) + u @ sys.d.T
    traj = StateTrajectory(states=h_hist.reshape(T + 1, d_io * n))
    return y, traj


def expand_conjugate_pairs(a_half: np.ndarray, b_half: np.ndarray, c_half: np.ndarray):
    """Duplicate modes into (lambda, conj(lambda)) pairs with shared real b/c.

    Returns (a, b, c) where outputs of the paired system are exactly real;
    b/c entries are halved per pair so the paired system's transfer function
    equals sum_i Re-part contributions without double counting.
    """
    a_half = np.asarray(a_half, dtype=np.complex128)
    b_half = np.asarray(b_half, dtype=np.float64)
    c_half = np.asarray(c_half, dtype=np.float64)
    a = np.concatenate([a_half, np.conj(a_half)])
    b = np.concatenate([b_half, b_half], axis=0)
    c = np.concatenate([c_half, c_half], axis=1) * 0.5
    return a, b, c
