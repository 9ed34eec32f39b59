import numpy as np
import pytest
from hypothesis import given, strategies as st

from deepmc.exceptions import ConfigError, DegenerateSpectrumError
from deepmc.penalties import PenaltySpec, parse_penalty, penalty_gradient, penalty_value, sigma_derivative
from deepmc.spectral import svd

SPECS = [
    PenaltySpec("ratio", 1.0),
    PenaltySpec("nuclear", 1.0),
    PenaltySpec("schatten", 1.0, "1/2"),
    PenaltySpec("schatten", 1.0, "2/3"),
    PenaltySpec("schatten_ratio", 1.0, "1/2", "2/3"),
    PenaltySpec("schatten_ratio", 1.0, "1/3", "2/3"),
    PenaltySpec("schatten_ratio", 1.0, "1/3", "1/2"),
]


def _random_well_conditioned(rng, n=5, lo=0.1):
    q1, _ = np.linalg.qr(rng.standard_normal((n, n)))
    q2, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q1 * rng.uniform(lo + 0.05, 3.0, n)) @ q2.T


def _fd_grad(f, w, h=1e-6):
    g = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        e = np.zeros_like(w)
        e[idx] = h
        g[idx] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def test_ratio_values():
    u = np.arange(1.0, 5.0)
    assert penalty_value(PenaltySpec("ratio"), np.outer(u, u[::-1])) == pytest.approx(1.0)
    assert penalty_value(PenaltySpec("ratio"), np.eye(4)) == pytest.approx(2.0)
    assert penalty_value(PenaltySpec("ratio"), np.diag([3.0, 4.0])) == pytest.approx(1.4)


def test_ratio_gradient_diag34_frozen():
    # (1 - (nuc / fro^2) sigma_i) / fro at sigma = (4, 3): (-0.024, 0.032), confirmed by central differences
    w = np.diag([3.0, 4.0])
    g = penalty_gradient(PenaltySpec("ratio"), w).gradient
    np.testing.assert_allclose(g, np.diag([0.032, -0.024]), atol=1e-15)
    fd = _fd_grad(lambda x: penalty_value(PenaltySpec("ratio"), x), w)
    np.testing.assert_allclose(g, fd, atol=1e-9)


def test_ratio_gradient_is_not_the_unnormalised_form():
    # the expression U V^T - (nuc / fro) U S V^T over fro^2 gives diag(-0.128, -0.184) and fails FD
    w = np.diag([3.0, 4.0])
    wrong = (np.eye(2) - 1.4 * w) / 25.0
    fd = _fd_grad(lambda x: penalty_value(PenaltySpec("ratio"), x), w)
    assert np.abs(wrong - fd).max() > 0.1


def test_nuclear_and_none():
    np.testing.assert_array_equal(penalty_gradient(PenaltySpec("nuclear", 1), np.eye(3)).gradient, np.eye(3))
    w = np.random.default_rng(0).standard_normal((3, 4))
    ev = penalty_gradient(PenaltySpec("none"), w)
    assert ev.value == 0.0
    np.testing.assert_array_equal(ev.gradient, np.zeros((3, 4)))


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.token)
def test_gradients_match_central_differences(spec):
    rng = np.random.default_rng(20)
    for _ in range(20):
        w = _random_well_conditioned(rng)
        g = penalty_gradient(spec, w).gradient
        fd = _fd_grad(lambda x: penalty_value(spec, x), w)
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.token)
def test_orthogonal_invariance(spec):
    rng = np.random.default_rng(3)
    w = rng.standard_normal((4, 6))
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    p, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    assert penalty_value(spec, q @ w @ p) == pytest.approx(penalty_value(spec, w), abs=1e-10)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.token)
def test_gradient_from_svd_matches_gradient_from_matrix(spec):
    w = np.random.default_rng(8).standard_normal((5, 3))
    a, b = penalty_gradient(spec, w), penalty_gradient(spec, svd(w))
    assert a.value == b.value
    np.testing.assert_allclose(a.gradient, b.gradient, atol=1e-14)


@given(st.floats(1e-3, 1e3))
def test_ratio_is_scale_free(c):
    w = np.random.default_rng(1).standard_normal((4, 4))
    spec = PenaltySpec("ratio")
    assert penalty_value(spec, c * w) == pytest.approx(penalty_value(spec, w), rel=1e-12)
    # 0-homogeneous: the gradient is orthogonal to W
    assert abs(np.sum(penalty_gradient(spec, w).gradient * w)) < 1e-12


def test_quasi_norm_clamps_tiny_singular_values():
    spec = PenaltySpec("schatten", 1.0, 0.5)
    d = sigma_derivative(spec, np.array([1.0, 0.0]))
    assert np.all(np.isfinite(d))


def test_ratio_at_zero_raises():
    with pytest.raises(DegenerateSpectrumError):
        penalty_value(PenaltySpec("ratio"), np.zeros((3, 3)))


@pytest.mark.parametrize("text", ["ratio", "nuclear", "none", "schatten:1/2", "schatten_ratio:1/3:2/3"])
def test_parse_round_trip(text):
    spec = parse_penalty(text, 0.5)
    assert spec.token == text
    assert parse_penalty(spec.token, 0.5) == spec


@pytest.mark.parametrize("bad", [dict(kind="l2"), dict(kind="ratio", lam=-1), dict(kind="schatten"),
                                 dict(kind="schatten_ratio", p=0.7, q=0.5), dict(kind="schatten", p="x")])
def test_bad_specs(bad):
    with pytest.raises(ConfigError):
        PenaltySpec(**bad)


def test_active_flag():
    assert not PenaltySpec("ratio", 0.0).active
    assert not PenaltySpec("none", 1.0).active
    assert PenaltySpec("ratio", 0.1).active
