"""Attack primitives: token injection, PGD output divergence, saturation
haystacks, selection subversion, and black-box model extraction.

The greedy injection scorer exploits first-layer linearity: a token edit at
position p shifts the layer-1 trajectory by a_bar^k * b_bar(dE), so candidate
scores come from cached rank-one tables instead of fresh forward passes. Full
multi-layer trajectories are recomputed only for committed edits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DiscreteSsm, conv_kernel, lti_scan
from .grads import GateObjective, forward_tape
from .metrics import freeze_erase_rates, tau_from_trajectory, trajectory_pair_stiv
from .model import StackedModel, forward_model
from .records import PerturbationRecord
from .stats import rng_for
from .training import pgd_batch

__all__ = [
    "InapplicableAttackError",
    "InfeasibleStealthError",
    "InfeasibleEntropyError",
    "RecoveryError",
    "InjectionScorer",
    "inject_targeted",
    "inject_stealth",
    "inject_random",
    "pgd_output_attack",
    "HaystackDoc",
    "make_haystack",
    "selection_subversion",
    "SystemOracle",
    "ExtractionResult",
    "ssd_extract",
    "generic_extract",
    "ssd_query_count",
    "generic_query_count",
]


class InapplicableAttackError(RuntimeError):
    """The model lacks the mechanism this attack subverts."""


class InfeasibleStealthError(RuntimeError):
    """The stealth constraint cannot be satisfied at the requested budget."""


class InfeasibleEntropyError(ValueError):
    """Requested entropy target exceeds the alphabet capacity."""


class RecoveryError(RuntimeError):
    """Extraction failed to reach the target reconstruction error."""

    def __init__(self, message: str, rel_error: float):
        super().__init__(message)
        self.rel_error = rel_error


# ---------------------------------------------------------------------------
# greedy genomic injection

class InjectionScorer:
    """Exact first-layer StIV scorer for single-token substitutions.

    Shared across sequences of one length for one model: the pair tables
    V[(orig, sub)][k] = a_bar^k * (b_bar @ dE) and their Gram matrices are
    model-level caches; per-sequence state is just the running squared-delta
    profile and cross-term matrices.
    """

    def __init__(self, model: StackedModel, seq_len: int, fraction: float = 0.1):
        if model.embedding is None:
            raise ValueError("injection attacks need a token model")
        layer0 = model.layers[0]
        if layer0.kind != "lti":
            raise ValueError("greedy scorer expects a diagonal LTI first layer")
        self.model = model
        self.T = seq_len
        self.fraction = fraction
        self.n_symbols = model.embedding.shape[0]
        disc = layer0.discretize()
        self.a_bar = disc.a_bar.real
        self.b_bar = disc.b_bar.real
        T = seq_len
        powers = self.a_bar[None, :] ** np.arange(T + 1)[:, None]     # (T+1, N)
        self.pairs = [(o, s) for o in range(self.n_symbols)
                      for s in range(self.n_symbols) if o != s]
        self.pair_index = {p: i for i, p in enumerate(self.pairs)}
        V = []
        for (o, s) in self.pairs:
            w = self.b_bar @ (model.embedding[s] - model.embedding[o])
            V.append(powers * w[None, :])
        self.V = np.stack(V)                                          # (P, T+1, N)
        self.nv = np.einsum("pkn,pkn->pk", self.V, self.V)            # (P, T+1)
        n_pairs = len(self.pairs)
        self.pair_gram = np.einsum("pkn,qln->pqkl", self.V, self.V)   # (P, P, T+1, T+1)

    def clean_layer1(self, tokens: np.ndarray):
        x = self.model.embedding[tokens]
        sysd = self.model.layers[0].discretize()
        _, traj = lti_scan(sysd, x)
        return traj

    def _strided_counts(self, nb_pad, g_pad, tau_sq):
        """counts[pair, p] of steps t >= p+1 pushed beyond tau by the candidate."""
        T = self.T
        n_pairs = len(self.pairs)
        s = nb_pad.strides[0]
        nb_view = np.lib.stride_tricks.as_strided(nb_pad[1:], shape=(T, T + 1),
                                                  strides=(s, s))
        ps, rs, cs = g_pad.strides
        g_view = np.lib.stride_tricks.as_strided(g_pad[:, 1:, :],
                                                 shape=(n_pairs, T, T + 1),
                                                 strides=(ps, rs, rs + cs))
        vals = nb_view[None, :, :] + self.nv[:, None, :] + 2.0 * g_view
        return (vals > tau_sq).sum(axis=2)

    def attack(self, tokens, budget: int, forbid_adjacent: bool = False,
               max_edits: int | None = None):
        """Greedy edit selection; returns (commits, first_layer_stiv_per_round).

        commits is the ordered list of (position, new_token). Ties break on
        the lowest position then the lowest substitute token index.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        T = self.T
        if tokens.shape != (T,):
            raise ValueError("sequence length does not match scorer")
        if budget > T:
            raise ValueError("budget exceeds sequence length")
        cap = max_edits if max_edits is not None else budget
        traj = self.clean_layer1(tokens)
        tau = tau_from_trajectory(traj, self.fraction)
        tau_sq = tau * tau
        n_pairs = len(self.pairs)

        nb_pad = np.full(2 * T + 2, -np.inf)
        nb_pad[: T + 1] = 0.0
        g_pad = np.zeros((n_pairs, 2 * T + 2, T + 1))
        edited = np.zeros(T, dtype=bool)
        commits = []
        stiv_curve = []
        cur_tokens = tokens.copy()

        for _ in range(min(budget, cap)):
            counts = self._strided_counts(nb_pad, g_pad, tau_sq)      # (P, T)
            prefix = np.cumsum(nb_pad[: T + 1] > tau_sq)              # steps 0..p
            scores = np.full((T, self.n_symbols), -1, dtype=np.int64)
            for j, (o, s) in enumerate(self.pairs):
                rows = np.flatnonzero((tokens == o) & ~edited)
                scores[rows, s] = counts[j, rows] + prefix[rows]
            if forbid_adjacent and commits:
                blocked = np.zeros(T, dtype=bool)
                for p, _ in commits:
                    blocked[max(0, p - 1): p + 2] = True
                scores[blocked, :] = -1
            flat = int(np.argmax(scores))
            best = int(scores.reshape(-1)[flat])
            if best < 0:
                raise InfeasibleStealthError(
                    "no admissible candidate left under the stealth constraint")
            p, sub = divmod(flat, self.n_symbols)
            j = self.pair_index[(int(tokens[p]), sub)]
            # commit: fold the pair's contribution into nb and the cross terms
            diag = np.diagonal(g_pad[j], offset=-(p + 1))[: T - p]
            nb_pad[p + 1: T + 1] += self.nv[j, : T - p] + 2.0 * diag
            g_pad[:, p + 1: T + 1, :] += self.pair_gram[j, :, : T - p, :]
            edited[p] = True
            cur_tokens[p] = sub
            commits.append((p, sub))
            stiv_curve.append(best / (T + 1))
        return commits, stiv_curve


def apply_commits(tokens, commits, budget: int | None = None) -> np.ndarray:
    out = np.asarray(tokens, dtype=np.int64).copy()
    use = commits if budget is None else commits[:budget]
    for p, sub in use:
        out[p] = sub
    return out


def _record_for_edits(model, tokens, edited, strategy, budget, fraction=0.1):
    clean = forward_model(model, np.asarray(tokens, dtype=np.int64))
    adv = forward_model(model, np.asarray(edited, dtype=np.int64))
    value, per_layer = trajectory_pair_stiv(clean.trajectories, adv.trajectories,
                                            fraction)
    positions = tuple(int(i) for i in np.flatnonzero(np.asarray(tokens) != np.asarray(edited)))
    return PerturbationRecord(
        strategy=strategy, budget=budget, positions=positions,
        output_delta_norm=float(np.linalg.norm(adv.logits - clean.logits)),
        extras={"edited_tokens": np.asarray(edited, dtype=np.int64),
                "stiv": value,
                "stiv_per_layer": [r.value for r in per_layer],
                "clean_trajectories": clean.trajectories,
                "adv_trajectories": adv.trajectories})


def inject_targeted(model: StackedModel, seq, budget: int,
                    fraction: float = 0.1) -> PerturbationRecord:
    """Greedy state-corruption injection maximizing first-layer StIV."""
    tokens = np.asarray(seq, dtype=np.int64)
    scorer = InjectionScorer(model, tokens.shape[0], fraction)
    commits, _ = scorer.attack(tokens, budget)
    edited = apply_commits(tokens, commits)
    return _record_for_edits(model, tokens, edited, "targeted", budget, fraction)


def inject_stealth(model: StackedModel, seq, budget: int,
                   similarity_floor: float = 0.5,
                   fraction: float = 0.1) -> PerturbationRecord:
    """Greedy injection under the edit-similarity constraint.

    With a positive floor, edits keep (1 - edits/len) >= floor and no two
    modified positions may be adjacent; floor 0 disables the constraint and
    reduces to the targeted strategy.
    """
    tokens = np.asarray(seq, dtype=np.int64)
    T = tokens.shape[0]
    constrained = similarity_floor > 0.0
    if constrained:
        max_by_floor = int(np.floor((1.0 - similarity_floor) * T))
        max_by_adjacency = (T + 1) // 2
        if budget > min(max_by_floor, max_by_adjacency):
            raise InfeasibleStealthError(
                f"budget {budget} infeasible under floor {similarity_floor}")
    scorer = InjectionScorer(model, T, fraction)
    commits, _ = scorer.attack(tokens, budget, forbid_adjacent=constrained)
    edited = apply_commits(tokens, commits)
    return _record_for_edits(model, tokens, edited, "stealth", budget, fraction)


def inject_random(seq, budget: int, seed: int, n_symbols: int = 4) -> PerturbationRecord:
    """Uniform baseline: budget distinct positions, uniform non-identical tokens."""
    tokens = np.asarray(seq, dtype=np.int64)
    if budget > tokens.shape[0]:
        raise ValueError("budget exceeds sequence length")
    rng = rng_for(seed, 0x7A41D)
    positions = rng.choice(tokens.shape[0], size=budget, replace=False)
    edited = tokens.copy()
    for p in positions:
        choices = [s for s in range(n_symbols) if s != tokens[p]]
        edited[p] = choices[rng.integers(0, len(choices))]
    return PerturbationRecord(
        strategy="random", budget=budget,
        positions=tuple(int(p) for p in sorted(positions)),
        extras={"edited_tokens": edited})


def pgd_output_attack(model: StackedModel, u, epsilon: float,
                      steps: int = 20) -> PerturbationRecord:
    """PGD maximizing output divergence ||y_adv - y_clean||_2 (embedding space)."""
    if np.asarray(u).ndim == 1 or isinstance(u, str):
        from .model import embed_tokens
        x = embed_tokens(model, u)
    else:
        x = np.asarray(u, dtype=np.float64)
    delta, v0, v1 = pgd_batch(model, x[None, ...], epsilon, steps=steps)
    return PerturbationRecord(
        strategy="pgd-output", budget=float(epsilon), delta=delta[0],
        objective_initial=float(v0[0]), objective_final=float(v1[0]),
        output_delta_norm=float(v1[0]))


# ---------------------------------------------------------------------------
# saturation haystacks

MODE_TARGETS = {"benign": 4.2, "low": 1.8, "high": 6.2}


@dataclass
class HaystackDoc:
    tokens: np.ndarray
    needle: np.ndarray
    needle_start: int
    mode: str
    target_bits: float
    measured_bits: float


def _entropy_of_geometric(ratio: float, k: int) -> float:
    if ratio >= 1.0:
        return np.log2(k)
    w = ratio ** np.arange(k)
    p = w / w.sum()
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def _geometric_for_entropy(target: float, k: int) -> np.ndarray:
    lo, hi = 1e-9, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _entropy_of_geometric(mid, k) < target:
            lo = mid
        else:
            hi = mid
    w = hi ** np.arange(k)
    return w / w.sum()


def make_haystack(T: int, needle, position_fraction: float, mode: str = "benign",
                  target_bits: float | None = None, alphabet_size: int = 128,
                  seed: int = 0, tolerance: float = 0.2) -> HaystackDoc:
    """Token document with entropy-targeted filler and a verbatim needle.

    The filler is sampled i.i.d. from a geometric distribution tuned so the
    empirical unigram entropy lands within ``tolerance`` bits/token of the
    target (benign 4.2 / low 1.8 / high 6.2 by default); the needle is
    spliced verbatim at floor(position_fraction * T).
    """
    needle = np.asarray(needle, dtype=np.int64)
    if needle.shape[0] >= T:
        raise ValueError("needle must be shorter than the document")
    if mode not in MODE_TARGETS:
        raise ValueError(f"unknown mode {mode!r}")
    target = MODE_TARGETS[mode] if target_bits is None else float(target_bits)
    cap = np.log2(alphabet_size)
    if target > cap:
        raise InfeasibleEntropyError(
            f"target {target} bits/token exceeds alphabet capacity {cap:.2f}")
    if needle.size and needle.max() >= alphabet_size:
        raise ValueError("needle tokens outside the alphabet")
    probs = _geometric_for_entropy(target, alphabet_size)
    start = int(np.floor(position_fraction * T))
    start = min(start, T - needle.shape[0])
    rng = rng_for(seed, 0x4A57)
    alphabet = np.arange(alphabet_size)
    best = None
    for _ in range(64):
        tokens = rng.choice(alphabet_size, size=T, p=probs)
        perm = rng.permutation(alphabet_size)  # decouple token identity from rank
        tokens = perm[tokens]
        tokens[start: start + needle.shape[0]] = needle
        counts = np.bincount(tokens, minlength=alphabet_size)
        p = counts / counts.sum()
        nz = p[p > 0]
        measured = float(-(nz * np.log2(nz)).sum())
        err = abs(measured - target)
        if best is None or err < best[0]:
            best = (err, tokens, measured)
        if err <= tolerance * 0.75:
            break
    err, tokens, measured = best
    if err > tolerance:
        raise InfeasibleEntropyError(
            f"could not hit {target} bits/token (best {measured:.2f})")
    return HaystackDoc(tokens=tokens, needle=needle, needle_start=start,
                       mode=mode, target_bits=target, measured_bits=measured)


# ---------------------------------------------------------------------------
# selection subversion

def gate_l1_sum(model: StackedModel, x) -> float:
    """Sum over selective layers and steps of ||delta_t||_1 for input x."""
    tape = forward_tape(model, np.asarray(x, dtype=np.float64)[None, ...])
    total = None
    for cache in tape.caches:
        if cache.kind != "selective":
            continue
        v = cache.delta.sum()
        total = v if total is None else total + v
    if total is None:
        raise InapplicableAttackError("model has no selective layers")
    return float(total)


def selection_subversion(model: StackedModel, u, epsilon: float, mode: str,
                         steps: int = 40) -> PerturbationRecord:
    """Gate-sum PGD: minimize (freeze) or maximize (erase) sum ||delta_t||_1.

    Uses epsilon/4 step size over ``steps`` iterations. Raises
    InapplicableAttackError against pure-LTI models, mirroring the null
    result such an attack must produce without input-dependent gating.
    """
    if not any(lyr.kind == "selective" for lyr in model.layers):
        raise InapplicableAttackError(
            "no selective-scan mechanism to subvert in a pure LTI model")
    if mode not in ("freeze", "erase"):
        raise ValueError("mode must be 'freeze' or 'erase'")
    if np.asarray(u).ndim == 1 or isinstance(u, str):
        from .model import embed_tokens
        x = embed_tokens(model, u)
    else:
        x = np.asarray(u, dtype=np.float64)
    sign = -1.0 if mode == "freeze" else 1.0
    objective = GateObjective(sign=sign)
    delta, v0, v1 = pgd_batch(model, x[None, ...], epsilon, steps=steps,
                              step_size=epsilon / 4.0, objective=objective)
    clean_gate = gate_l1_sum(model, x)
    adv_gate = gate_l1_sum(model, x + delta[0])
    adv_res = forward_model(model, x + delta[0])
    sel_trajs = [t for t, lyr in zip(adv_res.trajectories, model.layers)
                 if lyr.kind == "selective"]
    rates = [freeze_erase_rates(t) for t in sel_trajs]
    sfr = float(np.mean([r[0] for r in rates]))
    ser = float(np.mean([r[1] for r in rates]))
    return PerturbationRecord(
        strategy=f"selection-{mode}", budget=float(epsilon), delta=delta[0],
        objective_initial=float(v0[0]), objective_final=float(v1[0]),
        extras={"gate_sum_clean": clean_gate, "gate_sum_adv": adv_gate,
                "sfr": sfr, "ser": ser})


# ---------------------------------------------------------------------------
# black-box extraction

def ssd_query_count(n: int) -> int:
    """Schedule size under the counting model: n^2 for even n (2n at n=1)."""
    return 2 * n * max(1, n // 2)


def generic_query_count(n: int) -> int:
    return n ** 3


class SystemOracle:
    """Final-output (logit) access to a hidden single-channel diagonal system."""

    def __init__(self, sys: DiscreteSsm, noise_std: float = 0.0, seed: int = 0):
        if sys.d_io != 1:
            raise ValueError("oracle wraps single-channel systems")
        if np.any(sys.d != 0.0):
            raise ValueError("oracle systems carry no feedthrough")
        self.sys = sys
        self.noise_std = noise_std
        self._rng = rng_for(seed, 0x0AC1E)
        self.query_count = 0

    def __call__(self, u: np.ndarray) -> float:
        y, _ = lti_scan(self.sys, np.asarray(u, dtype=np.float64).reshape(-1, 1))
        self.query_count += 1
        out = float(y[-1, 0])
        if self.noise_std:
            out += self.noise_std * float(self._rng.standard_normal())
        return out

    def batch(self, U: np.ndarray) -> np.ndarray:
        """Vectorized final outputs for (Q, T) input sequences.

        For a zero-feedthrough LTI system the final output is exactly the
        reversed input dotted with the impulse response, so the whole batch
        is one matrix-vector product.
        """
        U = np.asarray(U, dtype=np.float64)
        kern = conv_kernel(self.sys, U.shape[1])[:, 0, 0]
        self.query_count += U.shape[0]
        out = U[:, ::-1] @ kern
        if self.noise_std:
            out = out + self.noise_std * self._rng.standard_normal(out.shape)
        return out


@dataclass
class ExtractionResult:
    a_bar_est: np.ndarray
    b_est: np.ndarray
    c_est: np.ndarray
    query_count: int
    rel_error: float
    method: str
    markov_measured: np.ndarray = field(default=None, repr=False)
    markov_realized: np.ndarray = field(default=None, repr=False)


def _realize_from_markov(markov: np.ndarray, n: int):
    """Minimal realization (Ho-Kalman style) from Markov parameters K_0..K_{2n-1}."""
    h0 = np.empty((n, n))
    h1 = np.empty((n, n))
    for i in range(n):
        h0[i] = markov[i: i + n]
        h1[i] = markov[i + 1: i + 1 + n]
    u_m, s, vt = np.linalg.svd(h0)
    rank = int(np.sum(s > max(s[0], 1e-300) * 1e-10))
    rank = max(rank, 1)
    sr = np.sqrt(s[:rank])
    obs = u_m[:, :rank] * sr[None, :]
    ctrl = sr[:, None] * vt[:rank, :]
    a_mat = (u_m[:, :rank] / sr[None, :]).T @ h1 @ (vt[:rank, :].T / sr[None, :])
    b_vec = ctrl[:, 0]
    c_vec = obs[0, :]
    # diagonal (1-semiseparable) form via eigendecomposition, up to similarity
    eigvals, w = np.linalg.eig(a_mat)
    b_diag = np.linalg.solve(w, b_vec.astype(np.complex128))
    c_diag = c_vec.astype(np.complex128) @ w
    realized = np.empty(2 * n)
    x = b_diag
    for k in range(2 * n):
        realized[k] = float(np.real(c_diag @ x))
        x = eigvals * x
    return eigvals, b_diag, c_diag, realized


def _finish_extraction(markov, n, delta_target, query_count, method,
                       noise_rel: float = 0.0):
    """Realize, score, and gate the extraction.

    The reported error combines realization self-consistency with the
    measurement-noise level estimated from the schedule itself (repeat
    spread or regression residuals), since the true system is unobservable.
    """
    eigvals, b_diag, c_diag, realized = _realize_from_markov(markov, n)
    scale = np.linalg.norm(markov)
    fit_rel = float(np.linalg.norm(realized - markov) / scale) if scale > 0 else 0.0
    rel = max(fit_rel, float(noise_rel))
    if rel > delta_target:
        raise RecoveryError(
            f"{method} extraction reached {rel:.3e} > target {delta_target}", rel)
    return ExtractionResult(a_bar_est=eigvals, b_est=b_diag, c_est=c_diag,
                            query_count=query_count, rel_error=rel, method=method,
                            markov_measured=markov, markov_realized=realized)


def ssd_extract(oracle, n_state: int, delta_target: float = 0.01) -> ExtractionResult:
    """Structured extraction: impulse schedule reading Markov parameters.

    Each impulse sequence of length k+1 returns K_k = c a_bar^k b_bar from
    final-output access; every parameter is measured max(1, n/2) times
    (averaging oracle noise), so the schedule size is the closed-form count
    n^2 for even n. Recovery is Hankel factorization into diagonal form.
    """
    if n_state < 1:
        raise ValueError("n_state must be >= 1")
    repeats = max(1, n_state // 2)
    markov = np.zeros(2 * n_state)
    sems = np.zeros(2 * n_state)
    queries = 0
    use_batch = hasattr(oracle, "batch")
    for k in range(2 * n_state):
        u = np.zeros(k + 1)
        u[0] = 1.0
        if use_batch:
            vals = np.asarray(oracle.batch(np.tile(u, (repeats, 1))))
            queries += repeats
        else:
            vals = np.asarray([oracle(u) for _ in range(repeats)])
            queries += repeats
        markov[k] = float(vals.mean())
        if repeats > 1:
            sems[k] = float(vals.std(ddof=1)) / np.sqrt(repeats)
    assert queries == ssd_query_count(n_state)
    scale = max(np.linalg.norm(markov), 1e-300)
    noise_rel = float(np.linalg.norm(sems)) / scale
    return _finish_extraction(markov, n_state, delta_target, queries, "ssd",
                              noise_rel=noise_rel)


def generic_extract(oracle, n_state: int, delta_target: float = 0.01,
                    seed: int = 0) -> ExtractionResult:
    """Unstructured baseline: n^3 random probes, least-squares Markov recovery."""
    if n_state < 1:
        raise ValueError("n_state must be >= 1")
    n_queries = generic_query_count(n_state)
    L = 2 * n_state
    rng = rng_for(seed, 0x6E8E1C)
    gram = np.zeros((L, L))
    moment = np.zeros(L)
    y_sq = 0.0
    queries = 0
    chunk = max(1, min(n_queries, 1 << 15))
    use_batch = hasattr(oracle, "batch")
    done = 0
    while done < n_queries:
        m = min(chunk, n_queries - done)
        U = rng.standard_normal((m, L))
        if use_batch:
            y = np.asarray(oracle.batch(U), dtype=np.float64)
        else:
            y = np.array([oracle(u) for u in U])
        X = U[:, ::-1]  # y_final = sum_k K_k u[L-1-k]
        gram += X.T @ X
        moment += X.T @ y
        y_sq += float(y @ y)
        queries += m
        done += m
    markov = np.linalg.solve(gram, moment)
    assert queries == n_queries
    # regression residual noise -> parameter uncertainty via (X'X)^{-1}
    ss_res = max(y_sq - 2.0 * markov @ moment + markov @ gram @ markov, 0.0)
    sigma_sq = ss_res / max(n_queries - L, 1)
    param_var = sigma_sq * np.trace(np.linalg.inv(gram))
    scale = max(np.linalg.norm(markov), 1e-300)
    noise_rel = float(np.sqrt(max(param_var, 0.0))) / scale
    return _finish_extraction(markov, n_state, delta_target, queries, "generic",
                              noise_rel=noise_rel)
