import numpy as np
import pytest

from lnm import nn
from lnm.data import ClassHistogram
from lnm.errors import ConfigError, DegenerateFitError, DomainError, VolumeDegeneracyError
from lnm.methods import primitives as prim
from lnm.rng import Stream


def test_rce_perfect_match_is_zero():
    p = np.array([[0.0, 1.0, 0.0]])
    assert prim.rce_loss(p, p)[0] == 0.0


def test_rce_hand_values():
    # p = [0.5, 0.5] vs one-hot class 0 with clamp -4: -(0.5*0 + 0.5*(-4)) = 2
    p = np.array([[0.5, 0.5]])
    q = np.array([[1.0, 0.0]])
    assert prim.rce_loss(p, q)[0] == pytest.approx(2.0)
    # fully wrong one-hot prediction: -(1 * (-4)) = 4
    p = np.array([[0.0, 1.0]])
    assert prim.rce_loss(p, q)[0] == pytest.approx(4.0)


def test_sce_reduces_and_matches_components():
    rng = Stream(0).generator()
    p = rng.dirichlet(np.ones(3), size=6)
    y = rng.integers(0, 3, size=6)
    alpha_only = prim.sce_loss(p, y, alpha=0.1, beta=0.0)
    assert np.allclose(alpha_only, 0.1 * nn.cross_entropy(p, y))
    one_hot = np.zeros((6, 3))
    one_hot[np.arange(6), y] = 1.0
    full = prim.sce_loss(p, y, alpha=0.1, beta=1.0)
    assert np.allclose(full, 0.1 * nn.cross_entropy(p, y) + prim.rce_loss(p, one_hot))


def test_sce_perfect_prediction_zero():
    p = np.array([[1.0, 0.0]])
    assert prim.sce_loss(p, np.array([0]))[0] == pytest.approx(0.0, abs=1e-10)


def test_smooth_labels():
    out = prim.smooth_labels(np.array([3]), 0.1, 10)
    assert out[0, 3] == pytest.approx(0.91)
    assert out[0, 0] == pytest.approx(0.01)
    assert out.sum() == pytest.approx(1.0)
    assert np.array_equal(prim.smooth_labels(np.array([1]), 0.0, 3),
                          np.array([[0.0, 1.0, 0.0]]))


def test_entropy_values():
    assert prim.entropy_reg(np.full((1, 4), 0.25))[0] == pytest.approx(np.log(4))
    assert prim.entropy_reg(np.array([[1.0, 0.0]]))[0] == pytest.approx(0.0, abs=1e-9)
    assert prim.entropy_reg(np.array([[0.9, 0.1]]))[0] == pytest.approx(0.3251, abs=1e-4)


def test_keep_schedule():
    assert prim.keep_schedule(0, 0.5) == 1.0
    assert prim.keep_schedule(10, 0.5) == 0.5
    assert prim.keep_schedule(99, 0.5) == 0.5
    assert prim.keep_schedule(5, 0.2) == pytest.approx(0.9)


def test_small_loss_select():
    losses = np.array([0.1, 5.0, 0.2, 4.0])
    assert list(prim.small_loss_select(losses, 1.0)) == [0, 1, 2, 3]
    assert list(prim.small_loss_select(losses, 0.5)) == [0, 2]
    # ties break toward the lower index
    assert list(prim.small_loss_select(np.array([1.0, 1.0, 1.0]), 1 / 3)) == [0]
    with pytest.raises(DomainError):
        prim.small_loss_select(np.array([]), 0.5)


def test_small_loss_select_perfect_on_separated_losses():
    rng = Stream(1).generator()
    clean = rng.uniform(0.0, 0.5, size=60)
    noisy = rng.uniform(1.0, 2.0, size=40)
    losses = np.concatenate([clean, noisy])
    picks = prim.small_loss_select(losses, 0.6)
    assert np.all(picks < 60)
    assert picks.size == 60


def test_sym_kl():
    p = np.array([[0.9, 0.1]])
    q = np.array([[0.1, 0.9]])
    assert prim.sym_kl(p, p)[0] == pytest.approx(0.0)
    assert prim.sym_kl(p, q)[0] == pytest.approx(2 * 0.8 * np.log(9), abs=1e-9)
    assert prim.sym_kl(p, q)[0] == prim.sym_kl(q, p)[0]


def test_sym_kl_grads_match_finite_differences():
    rng = Stream(2).generator()
    p = rng.dirichlet(np.ones(4), size=3)
    q = rng.dirichlet(np.ones(4), size=3)
    dp, dq = prim.sym_kl_prob_grads(p, q)
    eps = 1e-7
    for r in range(3):
        for c in range(4):
            for arr, grad in ((p, dp), (q, dq)):
                orig = arr[r, c]
                arr[r, c] = orig + eps
                up = prim.sym_kl(p, q)[r]
                arr[r, c] = orig - eps
                down = prim.sym_kl(p, q)[r]
                arr[r, c] = orig
                assert grad[r, c] == pytest.approx((up - down) / (2 * eps), rel=1e-4, abs=1e-6)


def test_gmm2_recovers_bimodal_split():
    rng = Stream(3).generator()
    low = rng.normal(0.1, 0.02, size=500)
    high = rng.normal(0.9, 0.02, size=500)
    losses = np.concatenate([low, high])
    means, w = prim.gmm2_fit(losses)
    # oracle: where the true cluster centers land after min-max normalization
    lo, hi = losses.min(), losses.max()
    assert means[0] == pytest.approx((0.1 - lo) / (hi - lo), abs=0.05)
    assert means[1] == pytest.approx((0.9 - lo) / (hi - lo), abs=0.05)
    assert (w[:500] > 0.9).all()
    assert (w[500:] < 0.1).all()


def test_gmm2_posterior_monotone_in_loss():
    rng = Stream(4).generator()
    losses = np.concatenate([rng.normal(0.2, 0.05, 300), rng.normal(0.8, 0.05, 300)])
    _, w = prim.gmm2_fit(losses)
    order = np.argsort(losses, kind="stable")
    assert (np.diff(w[order]) <= 1e-12).all()


def test_gmm2_permutation_equivariant():
    rng = Stream(5).generator()
    losses = np.concatenate([rng.normal(0.2, 0.05, 50), rng.normal(0.8, 0.05, 50)])
    perm = rng.permutation(100)
    _, w = prim.gmm2_fit(losses)
    _, w_perm = prim.gmm2_fit(losses[perm])
    assert np.allclose(w[perm], w_perm)


def test_gmm2_degenerate():
    with pytest.raises(DegenerateFitError):
        prim.gmm2_fit(np.full(20, 0.3))
    with pytest.raises(DomainError):
        prim.gmm2_fit(np.arange(5, dtype=float))


def test_sharpen():
    p = np.array([[0.3, 0.7]])
    assert np.allclose(prim.sharpen(p, 1.0), p)
    out = prim.sharpen(np.array([[0.8, 0.2]]), 0.5)
    assert np.allclose(out, [[0.64 / 0.68, 0.04 / 0.68]])
    assert out[0, 0] == pytest.approx(0.941, abs=1e-3)
    uniform = np.full((1, 5), 0.2)
    assert np.allclose(prim.sharpen(uniform, 0.25), uniform)


def test_mixup_contracts():
    rng = Stream(6).generator()
    x1 = rng.normal(size=(32, 4))
    x2 = rng.normal(size=(32, 4))
    q1 = rng.dirichlet(np.ones(3), size=32)
    q2 = rng.dirichlet(np.ones(3), size=32)
    xm, qm, lam = prim.mixup(x1, q1, x2, q2, rng, 4.0)
    assert (lam >= 0.5).all()
    assert np.allclose(qm.sum(axis=1), 1.0)
    assert np.allclose(xm, lam[:, None] * x1 + (1 - lam[:, None]) * x2)


def test_class_thresholds_equal_counts():
    out = prim.class_thresholds(ClassHistogram(np.array([50, 50, 50])), 0.9, 0.5)
    assert np.allclose(out, 0.9)


def test_class_thresholds_hand_example():
    out = prim.class_thresholds(ClassHistogram(np.array([10, 1000])), 0.9, 0.5)
    assert out[0] == pytest.approx(0.9)
    assert out[1] == pytest.approx(0.5, abs=1e-9)


def test_class_thresholds_monotone():
    counts = np.array([10, 100, 55, 1000, 10000])
    out = prim.class_thresholds(ClassHistogram(counts), 0.9, 0.5)
    order = np.argsort(counts)
    assert (np.diff(out[order]) <= 1e-12).all()
    assert (out <= 0.9).all() and (out >= 0.5 - 1e-9).all()
    with pytest.raises(DomainError):
        prim.class_thresholds(ClassHistogram(np.array([0, 5])), 0.9, 0.5)


def test_cdr_partition_counts_and_zeros():
    rng = Stream(7).generator()
    model = nn.init_mlp([3, 4, 2], rng)
    grads = nn.backward(model, rng.normal(size=(6, 3)), rng.integers(0, 2, 6), "ce")
    for rho in (0.25, 0.5, 1.0):
        mask_w, mask_b = prim.cdr_partition(grads, model, rho)
        marked = sum(m.sum() for m in mask_w) + sum(m.sum() for m in mask_b)
        total = sum(w.size for w in model.weights) + sum(b.size for b in model.biases)
        assert marked == int(np.ceil(rho * total))
    # zero-score parameters (bias at init is 0) never critical below rho=1
    mask_w, mask_b = prim.cdr_partition(grads, model, 0.5)
    zero_scores = [np.abs(g * b) == 0 for g, b in zip(grads.biases, model.biases)]
    for z, m in zip(zero_scores, mask_b):
        assert not np.any(m[z])


def test_volmin_loss_identity_reduces_to_ce():
    rng = Stream(8).generator()
    p = rng.dirichlet(np.ones(3), size=10)
    y = rng.integers(0, 3, size=10)
    val = prim.volmin_loss(p, np.eye(3), y, vol_weight=1e-4)
    assert val == pytest.approx(float(nn.cross_entropy(p, y).mean()))  # log det I = 0


def test_volmin_degenerate_matrix():
    p = np.full((10, 2), 0.5)
    singular = np.array([[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(VolumeDegeneracyError):
        prim.volmin_loss(p, singular, np.zeros(10, dtype=int))


def test_volmin_free_grad_matches_finite_differences():
    rng = Stream(9).generator()
    k = 3
    p = rng.dirichlet(np.ones(k), size=12)
    y = rng.integers(0, k, size=12)
    free = rng.normal(size=(k, k)) + 2 * np.eye(k)
    grad = prim.volmin_free_grad(p, free, y, vol_weight=1e-3)
    eps = 1e-6
    for i in range(k):
        for j in range(k):
            orig = free[i, j]
            free[i, j] = orig + eps
            up = prim.volmin_loss(p, prim.transition_from_free(free), y, 1e-3)
            free[i, j] = orig - eps
            down = prim.volmin_loss(p, prim.transition_from_free(free), y, 1e-3)
            free[i, j] = orig
            assert grad[i, j] == pytest.approx((up - down) / (2 * eps), rel=1e-4, abs=1e-8)


def test_transition_from_free_row_stochastic():
    rng = Stream(10).generator()
    t = prim.transition_from_free(rng.normal(size=(5, 5)))
    assert np.abs(t.sum(axis=1) - 1.0).max() < 1e-9


def test_trevision_fixed_point_on_oracle_posteriors():
    # when train posteriors literally equal rows of T, the estimate is T
    t = np.array([[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.05, 0.15, 0.8]])
    probs = np.repeat(t, 100, axis=0)
    estimate = prim.trevision_estimate(probs, 97.0)
    assert np.allclose(estimate, t, atol=1e-12)
    assert np.allclose(estimate.sum(axis=1), 1.0)


def test_trevision_percentile_domain():
    with pytest.raises(ConfigError):
        prim.trevision_estimate(np.full((10, 2), 0.5), 50.0)
