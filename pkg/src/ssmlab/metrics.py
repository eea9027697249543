"""Hidden-state integrity metrics and entropy measurements.

State integrity violation (fraction of timesteps where adversarial and clean
trajectories diverge beyond a threshold), delayed-corruption checks, the
cross-context amplification ratio, attack-vs-random output perturbation
ratios, freeze/erase rates, and token/state entropies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import StateTrajectory

__all__ = [
    "StivResult",
    "AmplificationResult",
    "PerturbationRatio",
    "stiv",
    "tau_from_trajectory",
    "trajectory_pair_stiv",
    "k_delayed",
    "xcross",
    "perturbation_ratio",
    "freeze_erase_rates",
    "token_entropy",
    "state_entropy",
    "state_entropy_histogram",
    "forgetting_rate",
]


@dataclass(frozen=True)
class StivResult:
    """Fraction of timesteps whose state diverges beyond tau."""

    value: float
    corrupted_steps: tuple
    tau: float
    tau_rule: str = "absolute"

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("stiv value must lie in [0, 1]")


@dataclass(frozen=True)
class AmplificationResult:
    """Ratio of mean output-perturbation norm to mean injected-state norm."""

    ratio: float
    numerator: float
    denominator: float
    n_samples: int
    critically_amplifying: bool = False


@dataclass(frozen=True)
class PerturbationRatio:
    """Attack-to-random output perturbation ratio with suppression bookkeeping."""

    rho: float
    suppressed: bool = False
    note: str = ""


def _states(traj) -> np.ndarray:
    return traj.states if isinstance(traj, StateTrajectory) else np.asarray(traj, dtype=np.float64)


def stiv(clean, adv, tau: float, tau_rule: str = "absolute") -> StivResult:
    """Exact state-integrity violation between two equal-length trajectories."""
    h_c = _states(clean)
    h_a = _states(adv)
    if h_c.shape != h_a.shape:
        raise ValueError(f"trajectory shapes differ: {h_c.shape} vs {h_a.shape}")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    dist = np.linalg.norm(h_a - h_c, axis=1)
    corrupted = np.flatnonzero(dist > tau)
    return StivResult(value=len(corrupted) / h_c.shape[0],
                      corrupted_steps=tuple(int(t) for t in corrupted),
                      tau=float(tau), tau_rule=tau_rule)


def tau_from_trajectory(clean, fraction: float) -> float:
    """Threshold rule tau = fraction * max_t ||h_t^clean||_2."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    norms = np.linalg.norm(_states(clean), axis=1)
    peak = float(norms.max())
    if peak == 0.0:
        raise ValueError("all-zero clean trajectory gives a zero threshold")
    return fraction * peak


def trajectory_pair_stiv(clean_trajs, adv_trajs, fraction: float = 0.1):
    """Mean per-layer StIV with the per-layer fraction-of-peak threshold rule.

    Returns (mean value, list of per-layer StivResult).
    """
    results = []
    for clean, adv in zip(clean_trajs, adv_trajs):
        tau = tau_from_trajectory(clean, fraction)
        results.append(stiv(clean, adv, tau, tau_rule=f"fraction={fraction}"))
    return float(np.mean([r.value for r in results])), results


def k_delayed(result: StivResult, trigger_window_end: int) -> bool:
    """True iff corruption persists at or beyond step k = trigger_window_end.

    The caller guarantees that the attack's modified inputs live in
    [0, k-1]; this checks the state-side condition of delayed corruption.
    """
    if trigger_window_end < 0:
        raise ValueError("k must be >= 0")
    return any(t >= trigger_window_end for t in result.corrupted_steps)


def xcross(samples, budget: float | None = None) -> AmplificationResult:
    """Ratio of means (not mean of ratios) over (state-norm, output-norm) pairs.

    Flags critical amplification when the ratio exceeds 2 at a perturbation
    budget of at most 1% of feature scale.
    """
    pairs = list(samples)
    if not pairs:
        raise ValueError("need at least one sample")
    state_norms = np.array([p[0] for p in pairs], dtype=np.float64)
    out_norms = np.array([p[1] for p in pairs], dtype=np.float64)
    denom = float(state_norms.mean())
    if denom <= 0:
        raise ValueError("undefined ratio: mean injected-state norm is zero")
    num = float(out_norms.mean())
    ratio = num / denom
    critical = bool(ratio > 2.0 and budget is not None and budget <= 0.01)
    return AmplificationResult(ratio=ratio, numerator=num, denominator=denom,
                               n_samples=len(pairs), critically_amplifying=critical)


def perturbation_ratio(adv_out_deltas, rand_out_deltas) -> PerturbationRatio:
    """rho = mean ||dy_attack|| / mean ||dy_random||.

    A zero random mean is reported as a suppressed denominator (rho
    undefined); an exactly zero attack mean follows the reporting convention
    rho = 1.0 (suppressed).
    """
    adv = np.asarray(list(adv_out_deltas), dtype=np.float64)
    rand = np.asarray(list(rand_out_deltas), dtype=np.float64)
    if adv.size == 0 or rand.size == 0:
        raise ValueError("need non-empty delta collections")
    mean_adv = float(adv.mean())
    mean_rand = float(rand.mean())
    if mean_rand == 0.0:
        return PerturbationRatio(rho=float("nan"), suppressed=True,
                                 note="random-baseline denominator is zero")
    if mean_adv == 0.0:
        return PerturbationRatio(rho=1.0, suppressed=True,
                                 note="attack output delta exactly zero")
    return PerturbationRatio(rho=mean_adv / mean_rand)


def freeze_erase_rates(traj, freeze_th: float = 0.01, erase_th: float = 0.05):
    """(SFR %, SER %): steps with tiny consecutive-state delta / tiny state norm."""
    h = _states(traj)
    if h.shape[0] < 2:
        raise ValueError("need at least one transition (T >= 1)")
    deltas = np.linalg.norm(h[1:] - h[:-1], axis=1)
    norms = np.linalg.norm(h[1:], axis=1)
    sfr = 100.0 * float(np.mean(deltas < freeze_th))
    ser = 100.0 * float(np.mean(norms < erase_th))
    return sfr, ser


def token_entropy(tokens, alphabet) -> float:
    """Empirical unigram Shannon entropy in bits/token."""
    seq = list(tokens)
    if not seq:
        raise ValueError("need a non-empty token stream")
    symbols = list(alphabet)
    counts = np.zeros(len(symbols))
    index = {s: i for i, s in enumerate(symbols)}
    for tok in seq:
        counts[index[tok]] += 1
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def state_entropy(window, window_size: int = 64, regularizer: float = 1e-6) -> float:
    """Gaussian differential entropy of a window of state vectors, in bits.

    0.5 * log2((2 pi e)^N det(Sigma + regularizer I)) with Sigma the sample
    covariance over the window.
    """
    w = np.asarray(window, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != window_size:
        raise ValueError(f"window must be ({window_size}, N)")
    if not np.all(np.isfinite(w)):
        raise ValueError("window contains nonfinite states")
    n = w.shape[1]
    cov = np.cov(w, rowvar=False).reshape(n, n) + regularizer * np.eye(n)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0 or not np.isfinite(logdet):
        raise ValueError("covariance is not positive definite")
    return float(0.5 * (n * np.log2(2.0 * np.pi * np.e) + logdet / np.log(2.0)))


def state_entropy_histogram(window, bins: int = 16) -> float:
    """Discrete plug-in entropy variant: per-dimension histograms, summed bits."""
    w = np.asarray(window, dtype=np.float64)
    total = 0.0
    for j in range(w.shape[1]):
        counts, _ = np.histogram(w[:, j], bins=bins)
        p = counts / counts.sum()
        nz = p[p > 0]
        total += float(-(nz * np.log2(nz)).sum())
    return total


def forgetting_rate(recall_outcomes) -> float:
    """Percent of sequences whose recall failed (outcome False)."""
    outcomes = list(recall_outcomes)
    if not outcomes:
        raise ValueError("need at least one outcome")
    failures = sum(1 for ok in outcomes if not ok)
    return 100.0 * failures / len(outcomes)
