import warnings

import numpy as np
import pytest

from deepmc.dynamics import (DENSE_LIMIT, adam_factors, apply_preconditioner_gd, apply_preconditioner_net,
                             balanced_net, preconditioner_adam, preconditioner_gd, predict_velocity,
                             validate_against_trainer)
from deepmc.exceptions import InvalidInputError, UnsupportedSizeError
from deepmc.experiments import oracle_instance
from deepmc.models import DeepLinearNet, end_product
from deepmc.penalties import PenaltySpec
from deepmc.spectral import vec


def _random_net(rng, n, depth):
    return DeepLinearNet([rng.standard_normal((n, n)) for _ in range(depth)])


def test_depth1_preconditioner_is_identity():
    w = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(preconditioner_gd(w, 1).p_matrix, np.eye(12))


def test_depth2_identity_gives_twice_identity():
    np.testing.assert_allclose(preconditioner_gd(np.eye(2), 2).p_matrix, 2 * np.eye(4), atol=1e-14)


@pytest.mark.parametrize("n, depth, seed", [(3, 3, 0), (3, 2, 1), (4, 3, 2), (4, 4, 3)])
def test_preconditioner_eigenstructure(n, depth, seed):
    w = np.random.default_rng(seed).standard_normal((n, n))
    p = preconditioner_gd(w, depth).p_matrix
    u, s, vt = np.linalg.svd(w)
    expected = []
    for r in range(n):
        for rr in range(n):
            lam = sum(s[r] ** (2 * (depth - j) / depth) * s[rr] ** (2 * (j - 1) / depth)
                      for j in range(1, depth + 1))
            # eigenvector vec(u_rr v_r^T) under column-major vectorisation
            x = vec(np.outer(u[:, rr], vt[r]))
            np.testing.assert_allclose(p @ x, lam * x, atol=1e-8)
            expected.append(lam)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(p)), np.sort(expected), atol=1e-8)


def test_matrix_free_matches_dense():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((3, 5))
    x = rng.standard_normal((3, 5))
    for depth in (1, 2, 3):
        dense = preconditioner_gd(w, depth).p_matrix @ vec(x)
        np.testing.assert_allclose(vec(apply_preconditioner_gd(w, depth, x)), dense, atol=1e-10)


def test_layered_operator_equals_p_w_on_balanced_nets():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((4, 4))
    net = balanced_net(w, 3, seed=1)
    np.testing.assert_allclose(end_product(net), w, atol=1e-12)
    x = rng.standard_normal((4, 4))
    np.testing.assert_allclose(apply_preconditioner_net(net, x), apply_preconditioner_gd(w, 3, x), atol=1e-10)


def test_balanced_net_is_balanced():
    net = balanced_net(np.random.default_rng(6).standard_normal((5, 5)), 4, seed=2)
    for a, b in zip(net.layers[:-1], net.layers[1:]):
        np.testing.assert_allclose(b.T @ b, a @ a.T, atol=1e-10)


def test_dense_size_limit():
    side = int(np.sqrt(DENSE_LIMIT)) + 1
    with pytest.raises(UnsupportedSizeError):
        preconditioner_gd(np.ones((side, side)), 2)


def test_adam_depth1_reductions():
    rng = np.random.default_rng(7)
    net = DeepLinearNet([rng.standard_normal((3, 2))])
    ones = preconditioner_adam(net, factors=[np.ones((3, 2))])
    np.testing.assert_allclose(ones.p_matrix, np.eye(6))
    s = rng.uniform(0.5, 2.0, (3, 2))
    np.testing.assert_allclose(preconditioner_adam(net, factors=[s]).p_matrix, np.diag(vec(s)))


def test_adam_preconditioner_psd_depth2():
    rng = np.random.default_rng(4)
    net = _random_net(rng, 3, 2)
    grads = [rng.standard_normal((3, 3)) for _ in range(2)]
    var = [rng.uniform(0, 1, (3, 3)) for _ in range(2)]
    p = preconditioner_adam(net, grads, var).p_matrix
    ev = np.linalg.eigvalsh(p)
    assert ev[0] >= -1e-8 * ev[-1]
    np.testing.assert_allclose(p, p.T, atol=1e-12)


def test_adam_product_form_reduces_to_gd_for_unit_factors():
    rng = np.random.default_rng(8)
    net = balanced_net(rng.standard_normal((3, 3)), 3, seed=0)
    ones = [np.ones((3, 3))] * 3
    prod = preconditioner_adam(net, factors=ones, form="product").p_matrix
    exact = preconditioner_adam(net, factors=ones).p_matrix
    gd = preconditioner_gd(end_product(net), 3).p_matrix
    np.testing.assert_allclose(prod, gd, atol=1e-10)
    np.testing.assert_allclose(exact, gd, atol=1e-10)


def test_adam_factor_validation():
    with pytest.raises(InvalidInputError):
        adam_factors([np.ones(2)], [-np.ones(2)])
    with pytest.raises(InvalidInputError):
        adam_factors([np.zeros(2)], [np.zeros(2)])
    np.testing.assert_allclose(adam_factors([np.array([3.0])], [np.array([16.0])])[0], [0.2])


def test_gd_depth1_velocity():
    rng = np.random.default_rng(9)
    w = rng.standard_normal((4, 3))
    g = rng.standard_normal((4, 3))
    pred = predict_velocity("gd", w, g)
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    np.testing.assert_allclose(pred.sv_velocities, -np.einsum("ik,ij,kj->k", u, g, vt), atol=1e-14)
    np.testing.assert_allclose(pred.w_velocity, -g)


def test_penalised_depth1_velocity_on_diag34():
    # u_r^T grad R v_r = (1 - (nuc / fro^2) sigma_r) / fro; at sigma = (4, 3) this is (-0.024, 0.032)
    lam = 0.5
    pred = predict_velocity("gd_penalty", np.diag([3.0, 4.0]), np.zeros((2, 2)), PenaltySpec("ratio", lam))
    np.testing.assert_allclose(pred.sv_velocities, [lam * 0.024, -lam * 0.032], atol=1e-15)
    # the Frobenius norm is conserved at depth 1 (ratio penalty is 0-homogeneous)
    assert abs(np.dot([4.0, 3.0], pred.sv_velocities)) < 1e-15


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_penalised_sv_velocity_closed_form(depth):
    lam = 0.3
    w = np.diag([2.5, 1.5, 0.5])
    pred = predict_velocity("gd_penalty", w, np.zeros((3, 3)), PenaltySpec("ratio", lam), depth=depth)
    s = np.array([2.5, 1.5, 0.5])
    fro, nuc = np.linalg.norm(s), s.sum()
    expected = -lam * depth * s ** (2 * (depth - 1) / depth) * (1 - nuc / fro**2 * s) / fro
    np.testing.assert_allclose(pred.sv_velocities, expected, atol=1e-14)
    # velocity of the singular values follows from the matrix velocity to first order
    h = 1e-7
    fd = (np.linalg.svd(w + h * pred.w_velocity, compute_uv=False) - s) / h
    np.testing.assert_allclose(fd, expected, rtol=1e-5, atol=1e-9)


def test_adam_unit_factors_match_gd():
    rng = np.random.default_rng(10)
    net = balanced_net(rng.standard_normal((4, 4)), 3, seed=3)
    g = rng.standard_normal((4, 4))
    ones = [np.ones((4, 4))] * 3
    a = predict_velocity("adam_penalty", net, g, PenaltySpec("ratio", 0.0), adam_factors=ones)
    b = predict_velocity("gd", end_product(net), g, depth=3)
    np.testing.assert_allclose(a.w_velocity, b.w_velocity, atol=1e-10)
    np.testing.assert_allclose(a.sv_velocities, b.sv_velocities, atol=1e-10)


def test_degenerate_spectrum_warns():
    with pytest.warns(RuntimeWarning):
        pred = predict_velocity("gd_penalty", np.eye(3), np.zeros((3, 3)), PenaltySpec("ratio", 0.1))
    assert pred.degenerate


def test_predict_velocity_validation():
    with pytest.raises(InvalidInputError):
        predict_velocity("sgd_nesterov", np.eye(2), np.zeros((2, 2)))
    with pytest.raises(InvalidInputError):
        predict_velocity("gd_penalty", np.eye(2), np.zeros((2, 2)))
    with pytest.raises(InvalidInputError):
        predict_velocity("adam", np.eye(2), np.zeros((2, 2)), depth=2)


@pytest.mark.parametrize("regime", ["gd", "gd_penalty", "adam", "adam_penalty"])
def test_trainer_agreement_small(regime):
    net, data = oracle_instance(6, 3, seed=0)
    pen = PenaltySpec("ratio", 0.5)
    rep = validate_against_trainer(regime, net, data, 1e-5, penalty=pen)
    bound = 1e-2 if regime.startswith("gd") else 0.2
    assert rep.max_deviation[0] < bound
    assert all(1.8 < r < 2.2 for r in rep.richardson_ratios)
    assert rep.psd_margin >= -1e-8
    assert "max_deviation" in rep.to_dict()


def test_validation_rejects_large_step():
    net, data = oracle_instance(4, 2, seed=0)
    with pytest.raises(InvalidInputError):
        validate_against_trainer("gd", net, data, alpha=1e-3)
