import math

import numpy as np
import pytest

import fedstyle.autodiff as ad
from fedstyle import gradcheck, losses, oracles


def test_nt_xent_single_pair_is_exactly_zero():
    z1 = np.array([[1.0, 0.0]])
    z2 = np.array([[0.5, 0.5]])
    assert float(losses.nt_xent(z1, z2, tau=0.07).data) == 0.0


def test_nt_xent_hand_case_b2():
    # z1 = z2 = identity rows at tau=1: every anchor sees one positive at
    # similarity 1 and two negatives at 0, so loss = log(2 + e) - 1
    z = np.eye(2)
    expected = math.log(2.0 + math.e) - 1.0
    got = float(losses.nt_xent(z, z.copy(), tau=1.0).data)
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(oracles.nt_xent_reference(z, z, tau=1.0), abs=1e-12)


@pytest.mark.parametrize("b", [1, 2, 3, 4])
def test_nt_xent_matches_bruteforce(b):
    rng = np.random.default_rng(100 + b)
    for _ in range(5):
        z1 = rng.standard_normal((b, 6))
        z2 = rng.standard_normal((b, 6))
        got = float(losses.nt_xent(z1, z2, tau=0.07).data)
        want = oracles.nt_xent_reference(z1, z2, tau=0.07)
        assert abs(got - want) < 1e-10


def test_nt_xent_row_permutation_invariance():
    rng = np.random.default_rng(5)
    z1 = rng.standard_normal((4, 8))
    z2 = rng.standard_normal((4, 8))
    perm = rng.permutation(4)
    a = float(losses.nt_xent(z1, z2, tau=0.2).data)
    b = float(losses.nt_xent(z1[perm], z2[perm], tau=0.2).data)
    assert a == pytest.approx(b, abs=1e-10)


def test_nt_xent_row_rescale_invariance():
    rng = np.random.default_rng(6)
    z1 = rng.standard_normal((3, 5))
    z2 = rng.standard_normal((3, 5))
    scaled = z1.copy()
    scaled[1] *= 37.0
    a = float(losses.nt_xent(z1, z2, tau=0.07).data)
    b = float(losses.nt_xent(scaled, z2, tau=0.07).data)
    assert a == pytest.approx(b, rel=1e-9)


def test_nt_xent_rejects_bad_tau():
    with pytest.raises(ValueError):
        losses.nt_xent(np.ones((2, 2)), np.ones((2, 2)), tau=0.0)


def test_style_infonce_b1_no_positives_is_zero():
    z = np.random.default_rng(0).standard_normal((2, 4))
    assert float(losses.style_infonce(z, [0, 1], tau=0.07).data) == 0.0


@pytest.mark.parametrize("b", [1, 2, 3, 4])
def test_style_infonce_matches_bruteforce(b):
    rng = np.random.default_rng(200 + b)
    labels = np.array([0] * b + [1] * b)
    for _ in range(5):
        z = rng.standard_normal((2 * b, 5))
        got = float(losses.style_infonce(z, labels, tau=0.07).data)
        want = oracles.style_infonce_reference(z, labels, tau=0.07)
        assert abs(got - want) < 1e-10


def test_style_infonce_hand_case_b2():
    z = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [-0.1, 0.9]])
    labels = [0, 0, 1, 1]
    got = float(losses.style_infonce(z, labels, tau=1.0).data)
    want = oracles.style_infonce_reference(z, labels, tau=1.0)
    assert got == pytest.approx(want, abs=1e-10)


def test_style_infonce_row_rescale_invariance():
    rng = np.random.default_rng(7)
    z = rng.standard_normal((6, 4))
    labels = np.array([0, 0, 0, 1, 1, 1])
    scaled = z.copy()
    scaled[2] *= 0.001
    a = float(losses.style_infonce(z, labels, tau=0.07).data)
    b = float(losses.style_infonce(scaled, labels, tau=0.07).data)
    assert a == pytest.approx(b, rel=1e-9)


def test_style_infonce_requires_balanced_two_styles():
    z = np.ones((4, 3))
    with pytest.raises(ValueError, match="two styles"):
        losses.style_infonce(z, [0, 0, 0, 1], tau=0.07)
    with pytest.raises(ValueError, match="two styles"):
        losses.style_infonce(z, [0, 1, 2, 2], tau=0.07)


def test_style_infonce_minimization_separates_toy_styles():
    # directly optimizing free embeddings should push same-style cosine
    # above cross-style within 200 steps
    rng = np.random.default_rng(11)
    z = ad.parameter(rng.standard_normal((8, 4)))
    labels = np.array([0] * 4 + [1] * 4)

    def separation():
        zn = z.data / np.linalg.norm(z.data, axis=1, keepdims=True)
        sims = zn @ zn.T
        same = labels[:, None] == labels[None, :]
        np.fill_diagonal(same, False)
        cross = ~(labels[:, None] == labels[None, :])
        return sims[same].mean() - sims[cross].mean()

    for _ in range(200):
        with ad.record():
            loss = losses.style_infonce(z, labels, tau=0.5)
            ad.backward(loss)
        ad.sgd_step([z], lr=0.5)
    assert separation() > 0.5


def test_simsiam_perfect_alignment_is_minus_one():
    z = np.random.default_rng(1).standard_normal((4, 6))
    assert float(losses.simsiam_loss(z, z, z, z).data) == pytest.approx(-1.0, abs=1e-12)


def test_simsiam_orthogonal_is_zero():
    p = np.array([[1.0, 0.0], [0.0, 1.0]])
    z = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert float(losses.simsiam_loss(p, z, p, z).data) == pytest.approx(0.0, abs=1e-12)


def test_simsiam_range_property():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p1, z2, p2, z1 = (rng.standard_normal((3, 5)) for _ in range(4))
        val = float(losses.simsiam_loss(p1, z2, p2, z1).data)
        assert -1.0 - 1e-12 <= val <= 1.0 + 1e-12


def test_simsiam_stop_gradient_is_exact():
    rng = np.random.default_rng(3)
    p1 = ad.parameter(rng.standard_normal((3, 4)))
    p2 = ad.parameter(rng.standard_normal((3, 4)))
    z1 = ad.parameter(rng.standard_normal((3, 4)))
    z2 = ad.parameter(rng.standard_normal((3, 4)))
    with ad.record():
        loss = losses.simsiam_loss(p1, z2, p2, z1)
        ad.backward(loss)
    assert z1.grad is None and z2.grad is None
    assert p1.grad is not None and np.any(p1.grad != 0.0)


def test_simsiam_matches_reference():
    rng = np.random.default_rng(4)
    p1, z2, p2, z1 = (rng.standard_normal((5, 7)) for _ in range(4))
    got = float(losses.simsiam_loss(p1, z2, p2, z1).data)
    want = oracles.simsiam_reference(p1, z2, p2, z1)
    assert got == pytest.approx(want, abs=1e-12)


def test_fedstyle_total_lambda_zero_is_clean_loss():
    rng = np.random.default_rng(8)
    z1, z2 = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    clean = float(losses.nt_xent(z1, z2, tau=0.07).data)
    total = float(losses.fedstyle_total((ad.constant(z1), ad.constant(z2)), None,
                                        lam=0.0, variant="simclr", tau=0.07).data)
    assert total == clean


def test_fedstyle_total_lambda_one_same_inputs_doubles():
    rng = np.random.default_rng(9)
    z1, z2 = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    clean = float(losses.nt_xent(z1, z2, tau=0.07).data)
    pair = (ad.constant(z1), ad.constant(z2))
    total = float(losses.fedstyle_total(pair, pair, lam=1.0, variant="simclr", tau=0.07).data)
    assert total == pytest.approx(2.0 * clean, abs=1e-12)


def test_fedstyle_total_half_lambda_arithmetic():
    rng = np.random.default_rng(10)
    c1, c2 = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    i1, i2 = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    clean = float(losses.nt_xent(c1, c2, tau=0.1).data)
    infused = float(losses.nt_xent(i1, i2, tau=0.1).data)
    total = float(losses.fedstyle_total((ad.constant(c1), ad.constant(c2)),
                                        (ad.constant(i1), ad.constant(i2)),
                                        lam=0.5, variant="simclr", tau=0.1).data)
    assert total == pytest.approx(clean + 0.5 * infused, abs=1e-12)


def test_fedstyle_total_rejects_unknown_variant():
    z = ad.constant(np.ones((2, 3)))
    with pytest.raises(ValueError, match="variant"):
        losses.fedstyle_total((z, z), (z, z), lam=0.5, variant="byol", tau=0.07)


def test_loss_graphs_pass_gradient_checks():
    rng = np.random.default_rng(77)
    for _ in range(5):
        vals = [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]
        gradcheck.check(lambda t: losses.nt_xent(t[0], t[1], tau=0.07), vals, tol=1e-5)
        labels = np.array([0, 0, 1, 1])
        gradcheck.check(lambda t: losses.style_infonce(t[0], labels, tau=0.07),
                        [rng.standard_normal((4, 4))], tol=1e-5)
