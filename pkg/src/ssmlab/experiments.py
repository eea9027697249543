"""Experiment orchestration: the pilot reproductions (genomic injection,
coupling-vs-PGD, extraction scaling) plus the saturation/subversion harnesses
and defense validation, with seed-level variance reporting throughout."""

from __future__ import annotations

import time

import numpy as np

from .attacks import (
    InapplicableAttackError,
    InjectionScorer,
    SystemOracle,
    apply_commits,
    generic_extract,
    generic_query_count,
    ssd_extract,
    ssd_query_count,
)
from .core import DiscreteSsm, lti_scan
from .datasets import gen_genomic_dataset, gen_recall_dataset
from .defenses import (
    SessionStatePool,
    gaussian_sigma,
    m1_filter,
    m3_monitor,
    m4_monitor,
    m5_gaussian,
    m6_spectral_training,
)
from .grads import GateObjective, forward_tape
from .metrics import perturbation_ratio
from .model import StackedModel, forward_model
from .reporting import ExperimentReport
from .spectral import gain_profile, spectral_perturbation
from .stats import (
    DEFAULT_SEEDS,
    bootstrap_ci,
    holm_bonferroni,
    loglog_ols,
    permutation_test,
    rng_for,
)
from .training import TrainConfig, pgd_batch, predict_logits, train_classifier

__all__ = ["default_config", "run_experiment", "run_e1", "run_e2", "run_e3",
           "run_e4", "run_e5", "run_mvalidation", "EXPERIMENTS"]


DEFAULTS = {
    "e1": {
        "n_train": 1000, "n_test": 360, "length": 200, "n_eval": 360,
        "budgets": [3, 10, 20, 30, 50], "stealth_budgets": [3, 10, 20, 30, 50],
        "paper_stealth_budgets": [3, 50],
        "tau_fraction": 0.1, "tau_sweep": [0.05, 0.1, 0.2],
        "n_layers": 4, "n_state": 128, "d_model": 16, "step": 0.01,
        "epochs": 6, "learning_rate": 0.08, "batch_size": 100,
        "similarity_floor": 0.5, "n_perm": 2000, "n_boot": 2000,
    },
    "e2": {
        "n_train": 600, "n_test": 200, "length": 128,
        "eps_grid": [0.005, 0.01, 0.02, 0.05], "pgd_steps": 20,
        "n_layers": 4, "n_state": 64, "d_model": 8, "step": 0.02,
        "epochs": 5, "learning_rate": 0.002, "batch_size": 64,
        "lambda_tight": 0.5,
    },
    "e3": {
        "lengths": [1000, 2000, 4000], "modes": ["benign", "low", "high"],
        "positions": [0.1, 0.3, 0.5], "n_docs": 12,
        "train_docs": 96, "train_length": 1000, "train_epochs": 2,
        "alphabet_size": 128, "n_layers": 2, "n_state": 8, "d_model": 8,
        "learning_rate": 0.02, "batch_size": 16,
    },
    "e4": {
        "n_train": 400, "n_eval": 48, "length": 200,
        "eps_grid": [0.01, 0.02], "pgd_steps": 40,
        "n_layers": 2, "n_state": 16, "d_model": 8,
        "epochs": 3, "learning_rate": 0.02, "batch_size": 64,
        "freeze_th": 0.01, "erase_th": 0.05,
    },
    "e5": {
        "n_grid": [64, 128, 256, 512, 1024], "exec_sizes": [8, 64],
        "deltas": [0.05, 0.01],
    },
    "mval": {
        "n_streams": 200, "stream_len": 600, "spike_sigma": 10.0,
        "m4_sweep": [5.0, 5.5, 6.0], "m5_draws": 1_000_000,
        "m2_pairs": 1000, "m1_tone_len": 2048,
        "clean_model": {"n_layers": 2, "n_state": 32, "d_model": 8,
                        "length": 120, "n_train": 300, "n_test": 120,
                        "epochs": 4, "learning_rate": 0.08, "batch_size": 64},
    },
}

EXPERIMENTS = tuple(DEFAULTS)


def default_config(experiment: str, seeds=None, overrides=None) -> dict:
    if experiment not in DEFAULTS:
        raise ValueError(f"unknown experiment {experiment!r}")
    cfg = {"experiment": experiment, "seeds": list(seeds or DEFAULT_SEEDS)}
    cfg.update(DEFAULTS[experiment])
    for key, value in (overrides or {}).items():
        if key not in cfg and key not in ("seeds", "experiment"):
            raise ValueError(f"unknown config key {key!r} for {experiment}")
        cfg[key] = value
    if not cfg["seeds"]:
        raise ValueError("need at least one seed")
    return cfg


def run_experiment(experiment: str, cfg: dict | None = None) -> ExperimentReport:
    cfg = cfg or default_config(experiment)
    runner = {"e1": run_e1, "e2": run_e2, "e3": run_e3, "e4": run_e4,
              "e5": run_e5, "mval": run_mvalidation}[experiment]
    return runner(cfg)


# ---------------------------------------------------------------------------
# shared helpers

def _layer_stats(model: StackedModel, tokens: np.ndarray, chunk: int = 64):
    """Per-layer (peaks (L, B), state histories) for batched token sequences."""
    hists = None
    for lo in range(0, tokens.shape[0], chunk):
        tape = forward_tape(model, None, tokens=tokens[lo:lo + chunk])
        part = [c.hist.reshape(c.hist.shape[0], c.hist.shape[1], -1)
                for c in tape.caches]
        if hists is None:
            hists = [[p] for p in part]
        else:
            for acc, p in zip(hists, part):
                acc.append(p)
    return [np.concatenate(acc, axis=0) for acc in hists]


def _stiv_samples(clean_hists, adv_hists, fraction: float):
    """Mean-over-layers StIV per sequence from cached state histories."""
    values = None
    for hc, ha in zip(clean_hists, adv_hists):
        deltas = np.linalg.norm(ha - hc, axis=2)          # (B, T+1)
        peaks = np.linalg.norm(hc, axis=2).max(axis=1)    # (B,)
        tau = fraction * peaks
        vals = (deltas > tau[:, None]).mean(axis=1)
        values = vals if values is None else values + vals
    return values / len(clean_hists)


def _build_e1_model(cfg, seed):
    return StackedModel.build(n_layers=cfg["n_layers"], n_state=cfg["n_state"],
                              d_model=cfg["d_model"], alphabet="ACGT",
                              step=cfg["step"], seed=seed)


# ---------------------------------------------------------------------------
# E1: genomic injection and state integrity violation

def run_e1(cfg: dict) -> ExperimentReport:
    started = time.time()
    budgets = list(cfg["budgets"])
    max_budget = max(budgets)
    fraction = cfg["tau_fraction"]
    samples = {}           # (strategy, budget) -> list over seeds of (B,) arrays
    accs = []
    tau_sweep_stats = {}   # fraction -> dict(strategy -> pooled means)

    for seed in cfg["seeds"]:
        data = gen_genomic_dataset(n=cfg["n_train"], length=cfg["length"],
                                   seed=seed, n_test=cfg["n_test"])
        model = _build_e1_model(cfg, seed)
        tc = TrainConfig(learning_rate=cfg["learning_rate"], epochs=cfg["epochs"],
                         batch_size=cfg["batch_size"], seed=seed)
        result = train_classifier(model, data.train, tc)
        accs.append(result.final_accuracy)

        tokens = data.test_tokens[: cfg["n_eval"]]
        n_eval = tokens.shape[0]
        scorer = InjectionScorer(model, cfg["length"], fraction)
        targeted = [scorer.attack(tokens[i], max_budget)[0] for i in range(n_eval)]
        stealth = [scorer.attack(tokens[i], max_budget, forbid_adjacent=True)[0]
                   for i in range(n_eval)]
        clean_hists = _layer_stats(model, tokens)

        for budget in budgets:
            adv_sets = {
                "targeted": np.stack([apply_commits(tokens[i], targeted[i], budget)
                                      for i in range(n_eval)]),
                "stealth": np.stack([apply_commits(tokens[i], stealth[i], budget)
                                     for i in range(n_eval)]),
                "random": np.stack([_random_edit(tokens[i], budget,
                                                 seed * 100_000 + budget * 1000 + i)
                                    for i in range(n_eval)]),
            }
            for strategy, adv_tokens in adv_sets.items():
                adv_hists = _layer_stats(model, adv_tokens)
                vals = _stiv_samples(clean_hists, adv_hists, fraction)
                samples.setdefault((strategy, budget), []).append(vals)
                if budget == 30:
                    for frac in cfg["tau_sweep"]:
                        v = _stiv_samples(clean_hists, adv_hists, frac)
                        tau_sweep_stats.setdefault(frac, {}).setdefault(
                            strategy, []).append(float(v.mean()))

    rows = []
    p_values = []
    mean_by = {}
    for budget in budgets:
        pooled = {s: np.concatenate(samples[(s, budget)]) for s in
                  ("targeted", "stealth", "random")}
        seed_means = {s: [float(v.mean()) for v in samples[(s, budget)]]
                      for s in pooled}
        p = permutation_test(pooled["targeted"], pooled["random"],
                             n_perm=cfg["n_perm"], seed=budget)
        p_values.append(p)
        mean_by[budget] = {s: float(pooled[s].mean()) for s in pooled}
        for strategy in ("targeted", "stealth", "random"):
            ci = bootstrap_ci(pooled[strategy], n_resamples=cfg["n_boot"],
                              seed=budget)
            rows.append({
                "budget": budget, "strategy": strategy,
                "stiv_mean": float(pooled[strategy].mean()),
                "ci_low": ci.lower, "ci_high": ci.upper, "ci_method": ci.method,
                "seed_means": seed_means[strategy],
                "seed_std": float(np.std(seed_means[strategy])),
                "paper_cell": not (strategy == "stealth"
                                   and budget not in cfg["paper_stealth_budgets"]),
            })
    rejected = holm_bonferroni(p_values, alpha=0.05)
    ratio_rows = []
    for i, budget in enumerate(budgets):
        ratio_rows.append({
            "budget": budget,
            "tr_ratio": mean_by[budget]["targeted"] / max(mean_by[budget]["random"], 1e-12),
            "p_targeted_vs_random": p_values[i],
            "holm_rejected": bool(rejected[i]),
        })
    pearson_r = float(np.corrcoef(budgets,
                                  [mean_by[b]["targeted"] for b in budgets])[0, 1])
    tau_rows = []
    for frac in cfg["tau_sweep"]:
        t = float(np.mean(tau_sweep_stats[frac]["targeted"]))
        r = float(np.mean(tau_sweep_stats[frac]["random"]))
        tau_rows.append({"tau_fraction": frac, "budget": 30,
                         "tr_ratio": t / max(r, 1e-12)})

    report = ExperimentReport(
        experiment="e1",
        config=cfg,
        rows=rows,
        notes=[
            "stealth rows outside the source table's populated budgets are "
            "extension rows (paper_cell=false)",
            f"train accuracy per seed: {[round(a, 4) for a in accs]}",
            f"pearson_r targeted-vs-budget: {pearson_r:.4f}",
        ],
        derived={"ratio_rows": ratio_rows, "tau_rows": tau_rows,
                 "pearson_r": pearson_r,
                 "train_accuracies": accs},
    )
    report.finalize_provenance(started)
    return report


def _random_edit(seq, budget, seed):
    from .attacks import inject_random
    return inject_random(seq, budget, seed=seed).extras["edited_tokens"]


# ---------------------------------------------------------------------------
# E2: PGD output divergence under loose/tight state coupling

def _build_e2_model(cfg, seed):
    # coupling experiment isolates the state path: no residual bypass and no
    # direct feedthrough, so suppressed states mean suppressed gains
    return StackedModel.build(n_layers=cfg["n_layers"], n_state=cfg["n_state"],
                              d_model=cfg["d_model"], alphabet="ACGT",
                              step=cfg["step"], residual=False, feedthrough=False,
                              seed=seed)


def run_e2(cfg: dict) -> ExperimentReport:
    started = time.time()
    rows_acc = {}
    for seed in cfg["seeds"]:
        data = gen_genomic_dataset(n=cfg["n_train"], length=cfg["length"],
                                   seed=seed, n_test=cfg["n_test"])
        models = {}
        for name, lam in (("loose", 0.0), ("tight", cfg["lambda_tight"])):
            model = _build_e2_model(cfg, seed)
            tc = TrainConfig(learning_rate=cfg["learning_rate"], epochs=cfg["epochs"],
                             batch_size=cfg["batch_size"], seed=seed,
                             lambda_decay=lam)
            train_classifier(model, data.train, tc)
            models[name] = model
        tokens = data.test_tokens[: cfg["n_test"]]
        for name, model in models.items():
            x = model.embedding[tokens]
            clean_logits = predict_logits(model, tokens)
            for eps in cfg["eps_grid"]:
                _, _, vals = pgd_batch(model, x, eps, steps=cfg["pgd_steps"])
                rng = rng_for(seed, 0xE2, int(eps * 1e6))
                signs = rng.choice([-1.0, 1.0], size=x.shape)
                rand_logits = predict_logits(model, x + eps * signs)
                rand_norms = np.linalg.norm(rand_logits - clean_logits, axis=1)
                key = (name, eps)
                acc = rows_acc.setdefault(key, {"pgd": [], "rand": []})
                acc["pgd"].append(vals)
                acc["rand"].append(rand_norms)

    rows = []
    for (name, eps), acc in sorted(rows_acc.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        pgd_all = np.concatenate(acc["pgd"])
        rand_all = np.concatenate(acc["rand"])
        ratio = perturbation_ratio(pgd_all, rand_all)
        rows.append({
            "epsilon": eps, "coupling": name,
            "pgd_dy_mean": float(pgd_all.mean()),
            "rand_dy_mean": float(rand_all.mean()),
            "rho": ratio.rho, "suppressed": ratio.suppressed,
            "seed_pgd_means": [float(v.mean()) for v in acc["pgd"]],
        })
    report = ExperimentReport(
        experiment="e2", config=cfg, rows=rows,
        notes=["rho is the attack-to-random output perturbation ratio "
               "(n per condition = n_test x seeds)"])
    report.finalize_provenance(started)
    return report


# ---------------------------------------------------------------------------
# E3: saturation haystacks and needle recall (harness only)

def run_e3(cfg: dict) -> ExperimentReport:
    started = time.time()
    seed0 = cfg["seeds"][0]
    model = StackedModel.build(n_layers=cfg["n_layers"], n_state=cfg["n_state"],
                               d_model=cfg["d_model"], alphabet=None,
                               vocab=cfg["alphabet_size"], layer_kind="selective",
                               readout="last", seed=seed0)
    train = gen_recall_dataset(cfg["train_docs"], cfg["train_length"], "benign",
                               0.3, seed=seed0, alphabet_size=cfg["alphabet_size"])
    tc = TrainConfig(learning_rate=cfg["learning_rate"], epochs=cfg["train_epochs"],
                     batch_size=cfg["batch_size"], seed=seed0)
    train_result = train_classifier(model, train.data, tc)

    rows = []
    for length in cfg["lengths"]:
        for mode in cfg["modes"]:
            for pos in cfg["positions"]:
                ds = gen_recall_dataset(cfg["n_docs"], length, mode, pos,
                                        seed=seed0 + length,
                                        alphabet_size=cfg["alphabet_size"])
                target = {"benign": 4.2, "low": 1.8, "high": 6.2}[mode]
                ent_err = np.abs(ds.measured_bits - target).max()
                needle_ok = all(
                    ds.tokens[i, ds.needle_starts[i]] == ds.marker
                    for i in range(cfg["n_docs"]))
                preds = predict_logits(model, ds.tokens).argmax(axis=1)
                outcomes = (preds == ds.labels).tolist()
                from .metrics import forgetting_rate
                rows.append({
                    "length": length, "mode": mode, "position_fraction": pos,
                    "entropy_target": target,
                    "entropy_max_abs_err": float(ent_err),
                    "needle_verbatim": bool(needle_ok),
                    "forgetting_rate_pct": forgetting_rate(outcomes),
                    "n_docs": cfg["n_docs"],
                })
    report = ExperimentReport(
        experiment="e3", config=cfg, rows=rows,
        notes=["HARNESS-ONLY: forgetting rates are measured properties of the "
               "artifact's own recall model; no reference values exist to "
               "reproduce",
               f"recall-model train accuracy: {train_result.final_accuracy:.3f}"])
    report.finalize_provenance(started)
    return report


# ---------------------------------------------------------------------------
# E4: selection subversion

def _gate_sums_from_tape(tape):
    total = None
    for cache in tape.caches:
        if cache.kind != "selective":
            continue
        v = cache.delta.sum(axis=(1, 2))
        total = v if total is None else total + v
    return total


def _freeze_erase_from_tape(tape, freeze_th, erase_th):
    sfr_layers, ser_layers = [], []
    for cache in tape.caches:
        if cache.kind != "selective":
            continue
        hist = cache.hist.reshape(cache.hist.shape[0], cache.hist.shape[1], -1)
        deltas = np.linalg.norm(hist[:, 1:] - hist[:, :-1], axis=2)
        norms = np.linalg.norm(hist[:, 1:], axis=2)
        sfr_layers.append((deltas < freeze_th).mean(axis=1) * 100.0)
        ser_layers.append((norms < erase_th).mean(axis=1) * 100.0)
    return np.mean(sfr_layers, axis=0), np.mean(ser_layers, axis=0)


def run_e4(cfg: dict) -> ExperimentReport:
    started = time.time()
    seed0 = cfg["seeds"][0]
    data = gen_genomic_dataset(n=cfg["n_train"], length=cfg["length"], seed=seed0,
                               n_test=max(cfg["n_eval"], 64))
    model = StackedModel.build(n_layers=cfg["n_layers"], n_state=cfg["n_state"],
                               d_model=cfg["d_model"], alphabet="ACGT",
                               layer_kind="selective", seed=seed0)
    tc = TrainConfig(learning_rate=cfg["learning_rate"], epochs=cfg["epochs"],
                     batch_size=cfg["batch_size"], seed=seed0)
    train_classifier(model, data.train, tc)

    tokens = data.test_tokens[: cfg["n_eval"]]
    labels = data.test_labels[: cfg["n_eval"]]
    x = model.embedding[tokens]
    clean_tape = forward_tape(model, x)
    clean_gates = _gate_sums_from_tape(clean_tape)
    clean_sfr, clean_ser = _freeze_erase_from_tape(clean_tape, cfg["freeze_th"],
                                                   cfg["erase_th"])
    clean_acc = float((clean_tape.logits.argmax(axis=1) == labels).mean())

    rows = []
    for eps in cfg["eps_grid"]:
        runs = {}
        for mode, sign in (("freeze", -1.0), ("erase", 1.0)):
            delta, _, _ = pgd_batch(model, x, eps, steps=cfg["pgd_steps"],
                                    step_size=eps / 4.0,
                                    objective=GateObjective(sign=sign))
            runs[mode] = delta
        rng = rng_for(seed0, 0xE4, int(eps * 1e6))
        runs["random"] = eps * rng.choice([-1.0, 1.0], size=x.shape)
        for mode in ("freeze", "erase", "random"):
            tape = forward_tape(model, x + runs[mode])
            gates = _gate_sums_from_tape(tape)
            sfr, ser = _freeze_erase_from_tape(tape, cfg["freeze_th"], cfg["erase_th"])
            acc = float((tape.logits.argmax(axis=1) == labels).mean())
            rows.append({
                "attack": mode, "epsilon": eps,
                "sfr_pct": float(sfr.mean()), "ser_pct": float(ser.mean()),
                "acc_drop_pct": 100.0 * (clean_acc - acc),
                "gate_sum_mean": float(gates.mean()),
                "gate_sum_clean_mean": float(clean_gates.mean()),
                "gate_sum_decreased": bool(gates.mean() < clean_gates.mean()),
            })

    # the pure-LTI null: the attack has no gate to subvert
    lti_model = StackedModel.build(n_layers=2, n_state=cfg["n_state"],
                                   d_model=cfg["d_model"], alphabet="ACGT",
                                   seed=seed0)
    from .attacks import selection_subversion
    try:
        selection_subversion(lti_model, tokens[0], cfg["eps_grid"][0], "freeze")
        lti_note = "unexpected: attack ran against a pure LTI model"
        inapplicable = False
    except InapplicableAttackError as exc:
        lti_note = f"pure-LTI run inapplicable as expected: {exc}"
        inapplicable = True
    rows.append({"attack": "freeze", "epsilon": cfg["eps_grid"][0],
                 "sfr_pct": float("nan"), "ser_pct": float("nan"),
                 "acc_drop_pct": float("nan"), "gate_sum_mean": float("nan"),
                 "gate_sum_clean_mean": float("nan"), "gate_sum_decreased": False,
                 "target_model": "pure-lti", "inapplicable": inapplicable})

    report = ExperimentReport(
        experiment="e4", config=cfg, rows=rows,
        notes=[lti_note,
               f"clean baseline: sfr={clean_sfr.mean():.3f}% "
               f"ser={clean_ser.mean():.3f}% acc={clean_acc:.3f}"])
    report.finalize_provenance(started)
    return report


# ---------------------------------------------------------------------------
# E5: extraction query complexity

def run_e5(cfg: dict) -> ExperimentReport:
    started = time.time()
    seed0 = cfg["seeds"][0]
    rows = []
    for n in cfg["n_grid"]:
        rows.append({
            "n_state": n,
            "ssd_queries": ssd_query_count(n),
            "generic_queries": generic_query_count(n),
            "speedup": generic_query_count(n) // ssd_query_count(n),
            "executed": n in cfg["exec_sizes"],
        })
    exec_rows = []
    for n in cfg["exec_sizes"]:
        rng = rng_for(seed0, 0xE5, n)
        hidden = DiscreteSsm(a_bar=rng.uniform(0.1, 0.95, n),
                             b_bar=rng.standard_normal((n, 1)),
                             c=rng.standard_normal((1, n)),
                             d=np.zeros((1, 1)))
        loosest = max(cfg["deltas"])
        for method, fn in (("ssd", ssd_extract), ("generic", generic_extract)):
            oracle = SystemOracle(hidden, seed=seed0)
            res = fn(oracle, n, delta_target=loosest)
            for delta in cfg["deltas"]:
                exec_rows.append({
                    "n_state": n, "method": method, "delta_target": delta,
                    "queries": res.query_count, "rel_error": res.rel_error,
                    "achieved": bool(res.rel_error <= delta),
                })
    fit_ssd = loglog_ols([(r["n_state"], r["ssd_queries"]) for r in rows])
    fit_gen = loglog_ols([(r["n_state"], r["generic_queries"]) for r in rows])
    report = ExperimentReport(
        experiment="e5", config=cfg, rows=rows,
        notes=["query counts above the executed sizes follow the schedule "
               "counting model (one oracle call = one sequence evaluation); "
               "recovery is executed at the desk-scale sizes",
               f"alpha_ssd={fit_ssd.slope:.6f} r2={fit_ssd.r_squared:.6f} "
               f"ci={fit_ssd.slope_ci}",
               f"alpha_generic={fit_gen.slope:.6f} r2={fit_gen.r_squared:.6f} "
               f"ci={fit_gen.slope_ci}"],
        derived={
            "exec_rows": exec_rows,
            "alpha_ssd": fit_ssd.slope, "alpha_ssd_ci": list(fit_ssd.slope_ci),
            "r2_ssd": fit_ssd.r_squared,
            "alpha_generic": fit_gen.slope,
            "alpha_generic_ci": list(fit_gen.slope_ci),
            "r2_generic": fit_gen.r_squared,
        })
    report.finalize_provenance(started)
    return report


# ---------------------------------------------------------------------------
# M-validation: defense measurements

def _resonant_test_system(radius=0.95, angle=np.pi / 3):
    lam = radius * np.exp(1j * angle)
    return DiscreteSsm(a_bar=np.array([lam, np.conj(lam)]),
                       b_bar=np.array([[1.0], [1.0]]),
                       c=np.array([[0.5, 0.5]]), d=[[0.0]])


def _piecewise_inputs(rng, steps, dim, segment=20):
    levels = rng.standard_normal((steps // segment + 1, dim))
    return np.repeat(levels, segment, axis=0)[:steps]


def run_mvalidation(cfg: dict) -> ExperimentReport:
    started = time.time()
    seed0 = cfg["seeds"][0]
    rows = []
    notes = []

    # M1: bandstop vs the worst-frequency tone on an LTI test system
    sysd = _resonant_test_system()
    prof = gain_profile(sysd)
    tone = spectral_perturbation(prof.omega_star, 0.01, cfg["m1_tone_len"], 1)
    y_raw, _ = lti_scan(sysd, tone)
    y_filt, _ = lti_scan(sysd, m1_filter(tone, prof))
    energy_reduction = 100.0 * (1.0 - np.sum(y_filt**2) / np.sum(y_raw**2))
    const = np.full((cfg["m1_tone_len"], 1), 1.0)
    dc_err = float(np.max(np.abs(m1_filter(const, prof) - const)))
    rows.append({"mitigation": "m1", "metric": "attack_energy_reduction_pct",
                 "value": float(energy_reduction)})
    rows.append({"mitigation": "m1", "metric": "dc_passthrough_abs_err",
                 "value": dc_err})

    # M1 clean-task cost on a trained classifier (embedding-space projection)
    mc = cfg["clean_model"]
    data = gen_genomic_dataset(n=mc["n_train"], length=mc["length"], seed=seed0,
                               n_test=mc["n_test"])
    clf = StackedModel.build(n_layers=mc["n_layers"], n_state=mc["n_state"],
                             d_model=mc["d_model"], alphabet="ACGT", seed=seed0)
    train_classifier(clf, data.train,
                     TrainConfig(learning_rate=mc["learning_rate"],
                                 epochs=mc["epochs"], batch_size=mc["batch_size"],
                                 seed=seed0))
    prof_clf = gain_profile(clf.layers[0].discretize(), 1024)
    acc_plain = float((predict_logits(clf, data.test_tokens).argmax(axis=1)
                       == data.test_labels).mean())
    filtered = np.stack([m1_filter(clf.embedding[t], prof_clf, embedding=True)
                         for t in data.test_tokens])
    acc_filt = float((predict_logits(clf, filtered).argmax(axis=1)
                      == data.test_labels).mean())
    rows.append({"mitigation": "m1", "metric": "clean_accuracy_drop_abs",
                 "value": acc_plain - acc_filt})

    # M2: cross-session isolation over adversarial session pairs
    iso_model = StackedModel.build(n_layers=2, n_state=8, d_model=4,
                                   alphabet="ACGT", step=0.05, seed=seed0)

    def factory():
        return [np.zeros(lyr.n_state) if lyr.kind == "lti"
                else np.zeros((lyr.d_io, lyr.n_state)) for lyr in iso_model.layers]

    rng = rng_for(seed0, 0x32AB)
    bleed = 0
    for i in range(cfg["m2_pairs"]):
        victim_seq = rng.integers(0, 4, 12)
        adv_seq = rng.integers(0, 4, 12)
        solo = SessionStatePool(factory)
        ref = solo.process(("victim", i), iso_model, victim_seq).logits
        shared = SessionStatePool(factory)
        shared.process(("adversary", i), iso_model, adv_seq)
        out = shared.process(("victim", i), iso_model, victim_seq).logits
        bleed += not np.array_equal(ref, out)
    rows.append({"mitigation": "m2", "metric": "cross_session_bleed_count",
                 "value": float(bleed)})

    # M3: TPR/FPR on injected spike streams vs benign streams
    n_streams = cfg["n_streams"]
    length = cfg["stream_len"]
    tp = fp = 0
    for i in range(n_streams):
        srng = rng_for(seed0, 0x33, i)
        deltas = srng.standard_normal((length, 6))
        states = np.concatenate([np.zeros((1, 6)), np.cumsum(deltas, axis=0)])
        inputs = _piecewise_inputs(srng, length, 3)
        spike_t = int(srng.integers(100, length - 50))
        spike = srng.standard_normal(6)
        spike *= cfg["spike_sigma"] * np.sqrt(6) / np.linalg.norm(spike)
        spiked = states.copy()
        spiked[spike_t:] += spike
        hits = m3_monitor(spiked, inputs)
        tp += any(abs(a.t - spike_t) <= 2 for a in hits)
        fp += bool(m3_monitor(states, inputs))
    rows.append({"mitigation": "m3", "metric": "tpr_pct",
                 "value": 100.0 * tp / n_streams})
    rows.append({"mitigation": "m3", "metric": "fpr_pct",
                 "value": 100.0 * fp / n_streams})

    # M4: threshold sweep on a saturation-style stream
    srng = rng_for(seed0, 0x34)
    sat_states = srng.standard_normal((400, 4)) * 1.6
    for h_max in cfg["m4_sweep"]:
        alerts = m4_monitor(sat_states, h_max=h_max)
        rows.append({"mitigation": "m4", "metric": f"alerts_at_hmax_{h_max}",
                     "value": float(len(alerts))})

    # M5: empirical noise scale over many draws
    sigma = gaussian_sigma(1.0, 1e-5, 1.0)
    draws = cfg["m5_draws"]
    cols = max(1, draws // 1000)
    noised = m5_gaussian(np.zeros((1000, cols)), 1.0, 1e-5, 1.0, seed=seed0)
    rows.append({"mitigation": "m5", "metric": "sigma_rel_err",
                 "value": float(abs(np.std(noised) - sigma) / sigma)})

    # M6: spectral robustness training (hypothesis measurement, not a gate)
    m6_model = StackedModel.build(n_layers=2, n_state=16, d_model=8,
                                  alphabet="ACGT", step=0.02, residual=False,
                                  feedthrough=False, seed=seed0)
    m6_data = gen_genomic_dataset(n=200, length=96, seed=seed0, n_test=64)
    pre_model = m6_model.copy()

    def attack_norm(model):
        prof_m = gain_profile(model.layers[0].discretize(), 512)
        x = model.embedding[m6_data.test_tokens[:48]]
        tone = spectral_perturbation(prof_m.omega_star, 0.05, 96, model.d_model)
        base = predict_logits(model, x)
        hit = predict_logits(model, x + tone[None, ...])
        return float(np.linalg.norm(hit - base, axis=1).mean())

    pre = attack_norm(pre_model)
    m6_spectral_training(m6_model, m6_data.train,
                         TrainConfig(learning_rate=0.02, epochs=3, batch_size=50,
                                     seed=seed0),
                         epsilon=0.3, refresh_every=2)
    post = attack_norm(m6_model)
    rows.append({"mitigation": "m6", "metric": "spectral_attack_dy_reduction_pct",
                 "value": 100.0 * (1.0 - post / max(pre, 1e-12))})
    notes.append("m6 reduction is a measured hypothesis check, not a gate")

    report = ExperimentReport(experiment="mval", config=cfg, rows=rows, notes=notes)
    report.finalize_provenance(started)
    return report
