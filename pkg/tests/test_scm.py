import itertools

import numpy as np
import pytest

from caflow import scm
from caflow.errors import ContractError, DomainError


def brute_do(model, h):
    """Graph surgery by explicit enumeration over every assignment."""
    nc, n0, na, n1, ny = model.cardinalities
    out = np.zeros(ny)
    for c, a, j, y in itertools.product(range(nc), range(na), range(n1), range(ny)):
        out[y] += model.p_c[c] * model.p_hca[h, a] * model.p_h1[a, c, j] * model.p_y[j, y]
    return out


def brute_joint(model):
    nc, n0, na, n1, ny = model.cardinalities
    out = np.zeros((n0, ny))
    for c, h, a, j, y in itertools.product(range(nc), range(n0), range(na), range(n1), range(ny)):
        out[h, y] += (model.p_c[c] * model.p_h0[c, h] * model.p_hca[h, a]
                      * model.p_h1[a, c, j] * model.p_y[j, y])
    return out


def uniform(*shape):
    return np.full(shape, 1.0 / shape[-1])


def test_validation_rejects_bad_tables():
    good = scm.DiscreteSCM.random(np.random.default_rng(0), (2, 2, 2, 2, 2))
    with pytest.raises(ContractError, match="sum to 1"):
        scm.DiscreteSCM(good.p_c * 2, good.p_h0, good.p_hca, good.p_h1, good.p_y)
    with pytest.raises(ContractError):
        scm.DiscreteSCM(good.p_c, good.p_h0, good.p_hca, good.p_h1[:, :1], good.p_y)
    bad = good.p_h0.copy()
    bad[0] = [1.5, -0.5]
    with pytest.raises(ContractError, match="negative"):
        scm.DiscreteSCM(good.p_c, bad, good.p_hca, good.p_h1, good.p_y)


def test_observational_matches_enumeration():
    m = scm.DiscreteSCM.random(np.random.default_rng(1), (3, 2, 4, 3, 2))
    np.testing.assert_allclose(scm.observational(m), brute_joint(m), atol=1e-15)


def test_deterministic_chain_hand_enumeration():
    # uniform binary C copied into H0, H0 copied into Hca, H1 = Hca xor C, Y = H1
    eye = np.eye(2)
    p_h1 = np.zeros((2, 2, 2))
    for a, c in itertools.product(range(2), range(2)):
        p_h1[a, c, a ^ c] = 1.0
    m = scm.DiscreteSCM(uniform(2), eye, eye, p_h1, eye)
    # H0 = C, so H1 = C xor C = 0 always
    np.testing.assert_allclose(scm.observational(m), [[0.5, 0.0], [0.5, 0.0]])
    # do(H0 = h): Hca = h and C stays uniform, so Y = h xor C is uniform
    np.testing.assert_allclose(scm.interventional(m, 0), [0.5, 0.5])
    np.testing.assert_allclose(brute_do(m, 1), [0.5, 0.5])


def test_single_level_confounder_reduces_to_conditional():
    base = scm.DiscreteSCM.random(np.random.default_rng(2), (1, 3, 3, 3, 2))
    cond = scm.observational_conditional(base)
    for h in range(3):
        np.testing.assert_allclose(scm.interventional(base, h), cond[h], atol=1e-12)
        np.testing.assert_allclose(scm.front_door(base, h), cond[h], atol=1e-12)


def test_uniform_tables_make_y_independent():
    m = scm.DiscreteSCM(uniform(3), uniform(3, 2), uniform(2, 2), uniform(2, 3, 2), uniform(2, 4))
    np.testing.assert_allclose(scm.observational_conditional(m), uniform(2, 4), atol=1e-15)


def test_y_independent_of_h1_gives_fixed_distribution():
    rng = np.random.default_rng(3)
    m = scm.DiscreteSCM.random(rng, (2, 2, 2, 3, 3))
    row = np.array([0.2, 0.3, 0.5])
    m = scm.DiscreteSCM(m.p_c, m.p_h0, m.p_hca, m.p_h1, np.tile(row, (3, 1)))
    for h in range(2):
        np.testing.assert_allclose(scm.interventional(m, h), row, atol=1e-15)


def test_random_binary_interventional_matches_surgery():
    m = scm.DiscreteSCM.random(np.random.default_rng(4), (2, 2, 2, 2, 2))
    for h in range(2):
        np.testing.assert_allclose(scm.interventional(m, h), brute_do(m, h), atol=1e-15)


def test_deterministic_mediator_formula():
    rng = np.random.default_rng(5)
    base = scm.DiscreteSCM.random(rng, (3, 3, 3, 3, 2))
    eye = np.eye(3)
    p_h1 = np.broadcast_to(eye[:, None, :], (3, 3, 3)).copy()
    m = scm.DiscreteSCM(base.p_c, base.p_h0, eye, p_h1, base.p_y)
    cond = scm.observational_conditional(m)
    p_h0 = scm.observational(m).sum(axis=1)
    for h in range(3):
        # with H1 = Hca = H0, P(y | h1, h') is defined only where h' = h1
        expected = sum(p_h0[k] * cond[h] for k in range(3))
        np.testing.assert_allclose(scm.front_door(m, h), expected, atol=1e-12)


def test_interventional_domain():
    m = scm.DiscreteSCM.random(np.random.default_rng(6), (2, 2, 2, 2, 2))
    for bad in (-1, 2, 0.5, "0"):
        with pytest.raises(DomainError):
            scm.interventional(m, bad)
        with pytest.raises(DomainError):
            scm.front_door(m, bad)


def test_front_door_equals_surgery_on_random_models():
    rng = np.random.default_rng(7)
    for _ in range(100):
        cards = tuple(int(k) for k in rng.integers(2, 5, size=5))
        m = scm.DiscreteSCM.random(rng, cards)
        for h in range(cards[1]):
            fd, do = scm.front_door(m, h), brute_do(m, h)
            assert scm.total_variation(fd, do) < 1e-10
            assert np.all(fd >= 0) and abs(fd.sum() - 1) < 1e-12


def test_confounding_is_real():
    """Observational and interventional answers differ on a typical model."""
    m = scm.DiscreteSCM.random(np.random.default_rng(8), (3, 3, 3, 3, 3), concentration=0.3)
    cond = scm.observational_conditional(m)
    gaps = [scm.total_variation(cond[h], scm.interventional(m, h)) for h in range(3)]
    assert max(gaps) > 1e-3


def test_verify_front_door_reports_tiny_gap():
    assert scm.verify_front_door(n_models=20, seed=1) < 1e-10
