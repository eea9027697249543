import numpy as np
import pytest

from ssmlab.grads import (
    CrossEntropyLoss,
    GateObjective,
    OutputDivergence,
    SquaredErrorLoss,
    backward,
    forward_tape,
    grad_input,
    grad_params,
    state_penalty,
)
from ssmlab.model import LtiLayer, SelectiveLayer, StackedModel
from ssmlab.training import pgd


def small_model(seed=0, kinds=("lti", "selective"), d=3, n=4, vocab=None,
                residual=True, activation=True, feedthrough=True):
    rng = np.random.default_rng(seed)
    layers = []
    for kind in kinds:
        if kind == "lti":
            layers.append(LtiLayer(n, d, step=0.1, rng=rng, residual=residual,
                                   activation=activation, feedthrough=feedthrough))
        else:
            layers.append(SelectiveLayer(n, d, rng=rng, residual=residual,
                                         activation=activation, feedthrough=feedthrough))
    return StackedModel(layers, d_model=d, n_out=2, vocab=vocab, rng=rng)


def batch_loss_value(model, batch, loss, state_decay=0.0):
    arr = np.asarray(batch)
    if arr.ndim == 2 and np.issubdtype(arr.dtype, np.integer):
        tape = forward_tape(model, None, tokens=arr)
    else:
        tape = forward_tape(model, arr.astype(np.float64))
    values, _ = loss.evaluate(tape)
    total = float(values.mean())
    if state_decay:
        total += state_decay * state_penalty(tape)
    return total


def fd_input_grad(model, x, loss, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        tp = forward_tape(model, xp[None, ...])
        tm = forward_tape(model, xm[None, ...])
        vp, _ = loss.evaluate(tp)
        vm, _ = loss.evaluate(tm)
        g[idx] = (vp.sum() - vm.sum()) / (2 * h)
    return g


def fd_param_grads(model, batch, loss, state_decay=0.0, h=1e-5):
    grads = {}
    for name, p in model.parameters():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            vp = batch_loss_value(model, batch, loss, state_decay)
            flat[i] = orig - h
            vm = batch_loss_value(model, batch, loss, state_decay)
            flat[i] = orig
            gflat[i] = (vp - vm) / (2 * h)
        grads[name] = g
    return grads


def rel_err(analytic, fd):
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(fd)), 1e-8)
    return np.max(np.abs(analytic - fd)) / scale


class TestGradInput:
    def test_zero_readout_gives_zero_gradient(self):
        model = small_model(kinds=("lti",))
        model.w_out[...] = 0.0
        x = np.random.default_rng(0).standard_normal((10, 3))
        g = grad_input(model, x, CrossEntropyLoss([1]))
        assert np.all(g == 0.0)

    def test_fd_agreement_two_layer(self):
        model = small_model(seed=1)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((12, 3))
        loss = CrossEntropyLoss([0])
        g = grad_input(model, x, loss)
        g_fd = fd_input_grad(model, x, loss)
        assert rel_err(g, g_fd) < 1e-4

    def test_fd_agreement_divergence_objective(self):
        model = small_model(seed=3, kinds=("lti", "lti"))
        rng = np.random.default_rng(4)
        x = rng.standard_normal((8, 3))
        ref = forward_tape(model, x[None]).logits + 0.5
        loss = OutputDivergence(ref)
        g = grad_input(model, x, loss)
        g_fd = fd_input_grad(model, x, loss)
        assert rel_err(g, g_fd) < 1e-4

    def test_fd_agreement_gate_objective(self):
        model = small_model(seed=5, kinds=("selective", "selective"))
        rng = np.random.default_rng(6)
        x = rng.standard_normal((9, 3))
        loss = GateObjective(sign=1.0)
        g = grad_input(model, x, loss)
        g_fd = fd_input_grad(model, x, loss)
        assert rel_err(g, g_fd) < 1e-4

    def test_lti_linearity_in_output_error(self):
        # squared-error gradient through a pure LTI path scales exactly with
        # the output-error scale
        model = small_model(seed=7, kinds=("lti",), activation=False, residual=False)
        rng = np.random.default_rng(8)
        x = rng.standard_normal((10, 3))
        logits = forward_tape(model, x[None]).logits[0]
        target = logits - np.array([0.3, -0.2])
        g1 = grad_input(model, x, SquaredErrorLoss(target))
        g3 = grad_input(model, x, SquaredErrorLoss(logits - 3.0 * np.array([0.3, -0.2])))
        assert np.allclose(3.0 * g1, g3, rtol=1e-12, atol=1e-12)


class TestGradParams:
    def test_fd_agreement_mixed_model(self):
        model = small_model(seed=10)
        rng = np.random.default_rng(11)
        batch = rng.standard_normal((3, 7, 3))
        labels = np.array([0, 1, 1])
        loss = CrossEntropyLoss(labels)
        grads, _ = grad_params(model, batch, loss)
        fd = fd_param_grads(model, batch, loss)
        for name in fd:
            assert rel_err(grads[name], fd[name]) < 1e-4, name

    def test_fd_agreement_with_state_decay(self):
        model = small_model(seed=12, kinds=("lti", "selective"))
        rng = np.random.default_rng(13)
        batch = rng.standard_normal((2, 6, 3))
        loss = CrossEntropyLoss([1, 0])
        grads, _ = grad_params(model, batch, loss, state_decay=0.5)
        fd = fd_param_grads(model, batch, loss, state_decay=0.5)
        for name in fd:
            assert rel_err(grads[name], fd[name]) < 1e-4, name

    def test_fd_agreement_token_model_embedding(self):
        model = small_model(seed=14, kinds=("lti",), vocab=4)
        rng = np.random.default_rng(15)
        batch = rng.integers(0, 4, (3, 8))
        loss = CrossEntropyLoss([0, 1, 0])
        grads, _ = grad_params(model, batch, loss)
        fd = fd_param_grads(model, batch, loss)
        for name in fd:
            assert rel_err(grads[name], fd[name]) < 1e-4, name

    def test_duplicate_batch_mean_invariance(self):
        model = small_model(seed=16)
        rng = np.random.default_rng(17)
        batch = rng.standard_normal((2, 5, 3))
        labels = [0, 1]
        g1, v1 = grad_params(model, batch, CrossEntropyLoss(labels))
        g2, v2 = grad_params(model, np.concatenate([batch, batch]),
                             CrossEntropyLoss(labels + labels))
        assert np.isclose(v1, v2)
        for name in g1:
            assert np.allclose(g1[name], g2[name], atol=1e-13)

    def test_freeze_masks_embedding_block(self):
        model = small_model(seed=18, kinds=("lti",), vocab=4)
        batch = np.random.default_rng(19).integers(0, 4, (2, 6))
        grads, _ = grad_params(model, batch, CrossEntropyLoss([0, 1]),
                               freeze=("embedding",))
        assert np.all(grads["embedding"] == 0.0)


class TestPgd:
    def test_zero_epsilon(self):
        model = small_model(seed=20, kinds=("lti",))
        x = np.random.default_rng(21).standard_normal((8, 3))
        rec = pgd(model, x, epsilon=0.0, steps=5, step_size=0.1)
        assert np.all(rec.delta == 0.0)
        assert rec.output_delta_norm == 0.0

    def test_single_step_is_fgsm(self):
        model = small_model(seed=22, kinds=("lti", "lti"))
        rng = np.random.default_rng(23)
        x = rng.standard_normal((10, 3))
        eps = 0.05
        ref = forward_tape(model, x[None]).logits
        obj = OutputDivergence(ref + np.array([0.7, -0.4]))
        g = grad_input(model, x, obj)
        rec = pgd(model, x, epsilon=eps, steps=1, step_size=eps, objective=obj)
        assert np.allclose(rec.delta, eps * np.sign(g))

    def test_projection_contract(self):
        model = small_model(seed=24)
        x = np.random.default_rng(25).standard_normal((12, 3))
        rec = pgd(model, x, epsilon=0.01, steps=7)
        assert np.max(np.abs(rec.delta)) <= 0.01 + 1e-15

    def test_final_objective_not_worse(self):
        model = small_model(seed=26)
        x = np.random.default_rng(27).standard_normal((12, 3))
        rec = pgd(model, x, epsilon=0.02, steps=10)
        assert rec.objective_final >= rec.objective_initial
