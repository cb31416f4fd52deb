import numpy as np
import pytest

from domainshift import csd, oracles, reweighting as rw, synth
from domainshift.model import ConfigurationError, DomainDataset, fd_gradient

IDEAL = np.array([[1, 1, -0.5], [1, 1, 1], [1, 1, 1]], dtype=float).T
SCALED = np.array([[2, 2, -1], [1, 1, 1], [1, 1, 1]], dtype=float).T


def _span_dist(A, b):
    return np.linalg.norm(oracles.projector(A) - oracles.projector(np.asarray(b, dtype=float)[:, None]))


def test_objective_examples(rng):
    dec = csd.svd_decompose(IDEAL, 1)
    assert csd.decomposition_objective(IDEAL, dec) == pytest.approx(0.0, abs=1e-28)
    W = rng.normal(size=(3, 3))
    zero = csd.Decomposition(np.zeros(3), np.zeros((3, 1)), np.zeros((3, 1)))
    assert csd.decomposition_objective(W, zero) == pytest.approx(np.sum(W * W), rel=1e-15)
    dec = csd.Decomposition(rng.normal(size=3), rng.normal(size=(3, 1)), rng.normal(size=(3, 1)))
    brute = 0.0
    for i in range(3):
        for j in range(3):
            brute += (W[i, j] - dec.w_c[i] - dec.W_s[i, 0] * dec.Gamma[j, 0]) ** 2
    assert csd.decomposition_objective(W, dec) == pytest.approx(brute, rel=1e-13)
    with pytest.raises(ConfigurationError):
        csd.decomposition_objective(np.zeros((4, 3)), dec)


def test_ideal_decomposition_recovered():
    dec = csd.svd_decompose(IDEAL, 1)
    np.testing.assert_allclose(dec.w_c, [1, 1, 0], atol=1e-8)
    assert _span_dist(dec.W_s, [0, 0, 1]) <= 1e-8
    # Gamma up to the scale absorbed into W_s
    np.testing.assert_allclose(dec.W_s @ dec.Gamma.T, np.outer([0, 0, 1], [-0.5, 1, 1]), atol=1e-12)
    assert not dec.non_unique


def test_row_scaled_decomposition_recovered():
    dec = csd.svd_decompose(SCALED, 1)
    np.testing.assert_allclose(dec.w_c, [1, 1, 1], atol=1e-8)
    assert _span_dist(dec.W_s, [0.5, 0.5, -1]) <= 1e-8
    np.testing.assert_allclose(dec.W_s @ dec.Gamma.T, np.outer([0.5, 0.5, -1], [2, 0, 0]), atol=1e-12)


def test_random_4x4_rank1_not_worse_than_oracle(rng):
    W = rng.normal(size=(4, 4))
    ours = csd.decomposition_objective(W, csd.svd_decompose(W, 1))
    _, best = oracles.decomposition_oracle(W, 1, restarts=50, seed=1)
    assert ours <= best + 1e-6


def test_oracle_gradient_matches_finite_differences(rng):
    W = rng.normal(size=(4, 5))
    z = rng.normal(size=4 + 4 * 2 + 5 * 2)
    _, g = oracles.constrained_objective(z, W, 2)
    fd = fd_gradient(lambda v: oracles.constrained_objective(v, W, 2)[0], z)
    assert np.linalg.norm(g - fd) / max(1.0, np.linalg.norm(fd)) <= 1e-5


def test_invariants_on_random_banks(rng):
    for _ in range(30):
        m = int(rng.integers(3, 9))
        D = int(rng.integers(2, m + 1))
        k = int(rng.integers(0, D))
        W = rng.normal(size=(m, D))
        dec = csd.svd_decompose(W, k)
        assert np.abs(dec.w_c @ dec.W_s).max(initial=0.0) <= 1e-8
        # same rank-(k+1) matrix before and after the re-split
        mean = W.mean(axis=1)
        U, s, Vt = np.linalg.svd(W - np.outer(mean, np.ones(D)), full_matrices=False)
        M = np.outer(mean, np.ones(D)) + (U[:, :k] * s[:k]) @ Vt[:k]
        assert np.linalg.norm(M - dec.matrix()) <= 1e-10
        # residual is the tail of the centred spectrum
        assert np.sqrt(csd.decomposition_objective(W, dec)) == pytest.approx(np.sqrt(np.sum(s[k:] ** 2)), abs=1e-10)


def test_rank_out_of_range():
    with pytest.raises(ConfigurationError):
        csd.svd_decompose(IDEAL, 3)
    with pytest.raises(ConfigurationError):
        csd.svd_decompose(IDEAL, -1)


def test_degenerate_rank_warns_and_flags():
    W = np.outer([1.0, 2.0, 0.0], np.ones(4))
    with pytest.warns(csd.NonUniqueDecompositionWarning):
        dec = csd.svd_decompose(W, 2)
    assert dec.non_unique
    np.testing.assert_allclose(dec.w_c, [1, 2, 0], atol=1e-12)


def test_sign_convention_is_deterministic(rng):
    W = rng.normal(size=(5, 4))
    a = csd.svd_decompose(W, 2)
    b = csd.svd_decompose(W.copy(), 2)
    np.testing.assert_array_equal(a.W_s, b.W_s)
    U, _, _ = csd.signed_svd(W)
    for j in range(U.shape[1]):
        assert U[np.flatnonzero(np.abs(U[:, j]) > 1e-12)[0], j] > 0


def test_common_mean_examples(rng):
    np.testing.assert_allclose(csd.common_mean(IDEAL), [1, 1, 0.5])
    v = rng.normal(size=4)
    np.testing.assert_allclose(csd.common_mean(np.outer(v, np.ones(3))), v, atol=1e-15)
    W = rng.normal(size=(4, 5))
    np.testing.assert_allclose(csd.svd_decompose(W, 0).w_c, csd.common_mean(W), atol=1e-12)


def test_common_pinv_examples(rng):
    w = csd.common_pinv(IDEAL)
    np.testing.assert_allclose(w, [1, 1, 0], atol=1e-12)
    np.testing.assert_allclose(IDEAL.T @ w, 2.0 * np.ones(3), atol=1e-12)
    v = np.array([0.5, -1.0, 2.0])
    np.testing.assert_allclose(csd.common_pinv(np.outer(v, np.ones(2))), v, atol=1e-12)
    W = rng.normal(size=(3, 3))
    np.testing.assert_allclose(csd.svd_decompose(W, 2).w_c, csd.common_pinv(W), atol=1e-8)
    with pytest.raises(csd.DegenerateInputError):
        csd.common_pinv(np.array([[1.0, -1.0]]))


def test_project_orthogonal_examples(rng):
    np.testing.assert_allclose(csd.project_orthogonal([1, 1, 0], [[0], [0], [1]]), [1, 1, 0])
    np.testing.assert_allclose(csd.project_orthogonal([1, 0], [[1], [0]]), [0, 0], atol=1e-15)
    np.testing.assert_allclose(csd.project_orthogonal([1, 1], [[1], [0]]), [0, 1], atol=1e-15)
    E = rng.normal(size=(5, 2))
    out = csd.project_orthogonal(rng.normal(size=5), E)
    assert np.abs(out @ E).max() <= 1e-10
    with pytest.raises(ConfigurationError):
        csd.project_orthogonal([1, 0, 0], [[1, 2], [0, 0], [0, 0]])


def _constructed(rng, m=5, D=4, k=2):
    e_c = rng.normal(size=m)
    E_s = rng.normal(size=(m, k))
    Gamma = rng.normal(size=(D, k))
    return e_c, E_s, np.outer(e_c, np.ones(D)) + E_s @ Gamma.T


def test_lemma_check_examples(rng):
    e_c, E_s, W = _constructed(rng)
    dec = csd.svd_decompose(W, 2)
    assert csd.lemma_check(W, dec, e_c, E_s)
    np.testing.assert_allclose(dec.w_c, csd.project_orthogonal(e_c, E_s), atol=1e-10)
    assert _span_dist(dec.W_s, E_s[:, 0]) > 0  # E_s is 2-d; compare full spans below
    assert np.linalg.norm(oracles.projector(dec.W_s) - oracles.projector(E_s)) <= 1e-8
    # un-projected common part does not reproduce W
    bad = csd.Decomposition(e_c, dec.W_s, dec.Gamma)
    assert not csd.lemma_check(W, bad, e_c, E_s)
    # rotating the specific basis keeps the check true
    Q, _ = np.linalg.qr(rng.normal(size=(2, 2)))
    rot = csd.Decomposition(dec.w_c, dec.W_s @ Q, dec.Gamma @ Q)
    assert csd.lemma_check(W, rot, e_c, E_s)
    # a valid but non-orthogonal reparametrisation fails both sides, so the iff still holds
    c = rng.normal(size=2)
    shifted = csd.Decomposition(dec.w_c + dec.W_s @ c, dec.W_s, dec.Gamma - np.outer(np.ones(4), c))
    assert csd.lemma_check(W, shifted, e_c, E_s)


def test_lemma_check_holds_on_constructed_instances(rng):
    for _ in range(100):
        m = int(rng.integers(3, 9))
        k = int(rng.integers(1, m - 1))
        D = int(rng.integers(k + 1, 9))
        e_c, E_s, W = _constructed(rng, m, D, k)
        assert csd.lemma_check(W, csd.svd_decompose(W, k), e_c, E_s)


def test_orthonormality_penalty_examples(rng):
    assert csd.orthonormality_penalty([1.0, 0.0], [[0.0], [1.0]]) == pytest.approx(0.0)
    assert csd.orthonormality_penalty([1.0, 0.0], [[1.0], [0.0]]) == pytest.approx(2.0)
    w_c = rng.normal(size=(3, 4))
    W_s = rng.normal(size=(3, 4, 2))
    direct = 0.0
    for y in range(3):
        What = np.column_stack([w_c[y], W_s[y]])
        E = np.eye(3) - What.T @ What
        direct += sum(E[i, j] ** 2 for i in range(3) for j in range(3))
    assert csd.orthonormality_penalty(w_c, W_s) == pytest.approx(direct, rel=1e-13)
    assert csd.orthonormality_penalty(w_c, W_s) >= 0


@pytest.mark.parametrize("hidden", [(), (3,)])
def test_csd_loss_gradient_matches_finite_differences(rng, hidden):
    X = rng.normal(size=(12, 3))
    y = rng.integers(0, 3, size=12)
    d = np.arange(12) % 3
    data = DomainDataset(X, y, d, 3, 3)
    p = csd.CSDParams.init(3, 3, 3, 2, hidden, seed=2)
    p = p.with_flat(rng.normal(scale=0.5, size=p.flat().size))
    _, g = csd.csd_loss_and_grad(p, data, 0.7, 1.3)
    fd = fd_gradient(lambda v: csd.csd_loss_and_grad(p.with_flat(v), data, 0.7, 1.3)[0], p.flat())
    assert np.linalg.norm(g - fd) / max(1.0, np.linalg.norm(fd)) <= 1e-5


def test_rank_zero_without_penalties_matches_erm():
    train, _ = synth.gen_noise_simple(1, test_size=5)
    erm = rw.train("ERM", train, rw.CGDConfig(epochs=100))
    run = csd.csd_train(train, csd.CSDTrainConfig(k=0, lam=0.0, kappa=0.0, epochs=100))
    np.testing.assert_allclose(run.params.flat(), erm.params.flat(), rtol=1e-10, atol=1e-12)


def test_csd_train_returns_common_model_and_trace():
    train, test = synth.generate(synth.SynthTask("dg_example", seed=0))
    run = csd.csd_train(train, csd.CSDTrainConfig(epochs=30), test=test)
    full = run.extra["csd_params"]
    np.testing.assert_array_equal(run.params.W, full.w_c)
    assert run.extra["objective_trace"].shape == (30,)
    assert run.test_accs.shape == (3,)
    assert len(run.extra["decompositions"]) == 2


def test_csd_config_validation():
    with pytest.raises(ConfigurationError):
        csd.CSDTrainConfig(k=-1)
    with pytest.raises(ConfigurationError):
        csd.CSDTrainConfig(lam=-0.1)
    train, _ = synth.generate(synth.SynthTask("dg_example", seed=0))
    with pytest.raises(ConfigurationError):
        csd.csd_train(train, csd.CSDTrainConfig(k=2, epochs=1))
