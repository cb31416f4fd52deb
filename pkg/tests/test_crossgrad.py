import dataclasses
import inspect

import numpy as np
import pytest

from domainshift import crossgrad as cg, reweighting as rw, synth
from domainshift.model import ConfigurationError, ModelParams, fd_gradient, input_grad, loss_and_grad


def _batch(rng, n=20, m=3, C=2, k=3):
    return rng.normal(size=(n, m)), rng.integers(0, C, size=n), np.arange(n) % k


def _dual(rng, m=3, C=2, k=3):
    label = ModelParams.init(m, C, (), 0)
    domain = ModelParams.init(m, k, (4,), 1)
    return cg.DualParams(label.with_flat(rng.normal(size=label.n_params)),
                         domain.with_flat(rng.normal(size=domain.n_params)))


def test_perturb_examples(rng):
    X = rng.normal(size=(4, 2))
    assert cg.perturb(X, rng.normal(size=X.shape), 0.0) is X
    np.testing.assert_array_equal(cg.perturb(X, np.zeros_like(X), 3.0), X)
    np.testing.assert_array_equal(cg.perturb(np.array([[1.0, 1.0]]), np.array([[0.5, -0.5]]), 2.0), [[2.0, 0.0]])


def test_input_grad_examples(rng):
    X = rng.normal(size=(5, 3))
    y = rng.integers(0, 2, size=5)
    np.testing.assert_array_equal(cg.input_grad(ModelParams.zeros(3, 2), X, y), np.zeros_like(X))
    p = ModelParams.zeros(3, 2).with_flat(rng.normal(size=8))
    W = p.W
    z = X @ W.T + p.b
    prob = np.exp(z - z.max(axis=1, keepdims=True))
    prob /= prob.sum(axis=1, keepdims=True)
    closed = (prob - np.eye(2)[y]) @ W / len(X)
    np.testing.assert_allclose(input_grad(p, X, y), closed, rtol=1e-12, atol=1e-15)
    fd = fd_gradient(lambda v: loss_and_grad(p, v.reshape(X.shape), y)[0], X.ravel())
    assert np.linalg.norm(input_grad(p, X, y).ravel() - fd) / max(1.0, np.linalg.norm(fd)) <= 1e-5


def test_example_input_grad_is_per_example(rng):
    X, y, _ = _batch(rng, n=6)
    p = _dual(rng).label
    rows = np.vstack([input_grad(p, X[i : i + 1], y[i : i + 1]) for i in range(len(X))])
    np.testing.assert_allclose(cg.example_input_grad(p, X, y), rows, rtol=1e-12, atol=1e-15)


def test_perturbation_magnitude(rng):
    X, _, D = _batch(rng)
    dual = _dual(rng)
    g = cg.example_input_grad(dual.domain, X, D)
    X_d = cg.perturb(X, g, 0.7)
    assert np.linalg.norm(X_d - X) == pytest.approx(0.7 * np.linalg.norm(g), rel=1e-12)


@pytest.mark.parametrize("eps,alpha", [(0.0, 0.5), (1.0, 0.0)])
def test_step_degenerates_to_independent_erm_steps(rng, eps, alpha):
    X, Y, D = _batch(rng)
    dual = _dual(rng)
    cfg = cg.CrossGradConfig(eps_label=eps, eps_domain=eps, alpha_label=alpha, alpha_domain=alpha, lr=0.3)
    new, _ = cg.crossgrad_step(dual, X, Y, D, cfg)
    weights = rw.erm_weights(np.bincount(D, minlength=3))
    for old, out, targets in ((dual.label, new.label, Y), (dual.domain, new.domain, D)):
        grads = np.vstack([loss_and_grad(old, X[D == i], targets[D == i])[1] for i in range(3)])
        np.testing.assert_array_equal(out.flat(), rw.weighted_step(old.flat(), weights, grads, 0.3))


def test_step_is_simultaneous(rng):
    X, Y, D = _batch(rng)
    dual = _dual(rng)
    cfg = cg.CrossGradConfig(eps_label=0.4, eps_domain=0.6, alpha_label=0.3, alpha_domain=0.8, lr=0.2)
    new, _ = cg.crossgrad_step(dual, X, Y, D, cfg)
    weights = rw.erm_weights(np.bincount(D, minlength=3))
    # both perturbations from the parameters at the start of the step
    X_d = X + 0.4 * cg.example_input_grad(dual.domain, X, D)
    X_l = X + 0.6 * cg.example_input_grad(dual.label, X, Y)

    def expected(p, targets, X_aug, mix):
        g = np.vstack([(1 - mix) * loss_and_grad(p, X[D == i], targets[D == i])[1]
                       + mix * loss_and_grad(p, X_aug[D == i], targets[D == i])[1] for i in range(3)])
        return p.flat() - 0.2 * (weights @ g)

    np.testing.assert_allclose(new.label.flat(), expected(dual.label, Y, X_d, 0.3), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(new.domain.flat(), expected(dual.domain, D, X_l, 0.8), rtol=1e-12, atol=1e-14)


def test_networks_read_only_their_own_targets():
    assert "D" not in inspect.signature(cg.label_update).parameters
    assert "Y" not in inspect.signature(cg.domain_update).parameters


def test_train_with_zero_eps_matches_erm_bitwise():
    train, _ = synth.gen_noise_simple(3, test_size=5)
    erm = rw.train("ERM", train, rw.CGDConfig(seed=3, epochs=50), keep_thetas=True)
    run = cg.crossgrad_train(train, cg.CrossGradConfig(eps_label=0.0, eps_domain=0.0, epochs=50, seed=3),
                             keep_thetas=True)
    assert len(run.theta_trace) == len(erm.theta_trace) == 51
    for a, b in zip(run.theta_trace, erm.theta_trace):
        np.testing.assert_array_equal(a, b)


def test_train_with_zero_alpha_matches_erm_bitwise():
    train, _ = synth.gen_noise_simple(4, test_size=5)
    erm = rw.train("ERM", train, rw.CGDConfig(seed=4, epochs=30))
    run = cg.crossgrad_train(train, cg.CrossGradConfig(alpha_label=0.0, alpha_domain=0.0, epochs=30, seed=4))
    np.testing.assert_array_equal(run.params.flat(), erm.params.flat())


def test_train_reports_label_net_and_is_deterministic():
    train, test = synth.generate(synth.SynthTask("dg_example", seed=0))
    cfg = cg.CrossGradConfig(epochs=20)
    a = cg.crossgrad_train(train, cfg, test=test)
    b = cg.crossgrad_train(train, dataclasses.replace(cfg), test=test)
    np.testing.assert_array_equal(a.params.flat(), b.params.flat())
    assert a.params.n_classes == train.n_classes
    assert a.extra["domain_params"].n_classes == train.n_domains
    assert a.test_accs.shape == (test.n_domains,)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        cg.CrossGradConfig(eps_label=-1.0)
    with pytest.raises(ConfigurationError):
        cg.CrossGradConfig(alpha_domain=1.5)
    with pytest.raises(ConfigurationError):
        cg.CrossGradConfig(lr=0.0)
