"""Discrete structural causal model and exact front-door identification.

Graph::

    C -> H0 -> Hca -> H1 -> Y
    C ------------->  H1

C is latent. All quantities are computed by exact enumeration. The
front-door estimate uses only the observational joint over (H0, Hca, H1, Y)
and is checked against graph surgery on the full model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError, DomainError

ROW_TOL = 1e-12


@dataclass
class DiscreteSCM:
    """Conditional probability tables of the graph above.

    ``p_c[c]``, ``p_h0[c, h0]``, ``p_hca[h0, a]``, ``p_h1[a, c, h1]`` and
    ``p_y[h1, y]``. The absence of a ``C -> Hca`` table makes that edge
    structurally impossible.
    """

    p_c: np.ndarray
    p_h0: np.ndarray
    p_hca: np.ndarray
    p_h1: np.ndarray
    p_y: np.ndarray

    def __post_init__(self):
        self.p_c = np.asarray(self.p_c, dtype=np.float64)
        self.p_h0 = np.asarray(self.p_h0, dtype=np.float64)
        self.p_hca = np.asarray(self.p_hca, dtype=np.float64)
        self.p_h1 = np.asarray(self.p_h1, dtype=np.float64)
        self.p_y = np.asarray(self.p_y, dtype=np.float64)
        self.validate()

    @property
    def cardinalities(self):
        """Sizes of (C, H0, Hca, H1, Y)."""
        return (self.p_c.shape[0], self.p_h0.shape[1], self.p_hca.shape[1],
                self.p_h1.shape[2], self.p_y.shape[1])

    def validate(self):
        nc = self.p_c.shape[0]
        shapes_ok = (
            self.p_c.ndim == 1 and self.p_h0.ndim == 2 and self.p_hca.ndim == 2
            and self.p_h1.ndim == 3 and self.p_y.ndim == 2
            and self.p_h0.shape[0] == nc
            and self.p_hca.shape[0] == self.p_h0.shape[1]
            and self.p_h1.shape[:2] == (self.p_hca.shape[1], nc)
            and self.p_y.shape[0] == self.p_h1.shape[2]
        )
        if not shapes_ok:
            raise ContractError(
                "tables do not match C->H0->Hca->H1->Y, C->H1: "
                f"{self.p_c.shape}, {self.p_h0.shape}, {self.p_hca.shape}, "
                f"{self.p_h1.shape}, {self.p_y.shape}")
        for name in ("p_c", "p_h0", "p_hca", "p_h1", "p_y"):
            table = getattr(self, name)
            if np.any(table < 0):
                raise ContractError(f"{name} has negative entries")
            if np.max(np.abs(table.sum(axis=-1) - 1.0)) > ROW_TOL:
                raise ContractError(f"{name} rows do not sum to 1")

    @classmethod
    def random(cls, rng, cards=None, concentration=1.0):
        """Draw every table row from a symmetric Dirichlet."""
        if cards is None:
            cards = tuple(int(k) for k in rng.integers(2, 5, size=5))
        nc, n0, na, n1, ny = cards

        def rows(*shape):
            t = rng.dirichlet(np.full(shape[-1], concentration), size=shape[:-1])
            return t / t.sum(axis=-1, keepdims=True)

        return cls(rows(nc), rows(nc, n0), rows(n0, na), rows(na, nc, n1), rows(n1, ny))


def full_joint(scm):
    """Observational joint ``P[h0, hca, h1, y]`` with C marginalised."""
    return kernels.scm_joint(scm.p_c, scm.p_h0, scm.p_hca, scm.p_h1, scm.p_y)


def observational(scm):
    """Observational joint ``P[h0, y]``."""
    return full_joint(scm).sum(axis=(1, 2))


def observational_conditional(scm):
    """Rows ``P(Y | H0 = h)``; rows with zero mass are left as zeros."""
    joint = observational(scm)
    mass = joint.sum(axis=1, keepdims=True)
    return np.divide(joint, mass, out=np.zeros_like(joint), where=mass > 0)


def _check_h(scm, h):
    n0 = scm.cardinalities[1]
    if not (isinstance(h, (int, np.integer)) and 0 <= h < n0):
        raise DomainError(f"h must be an integer in [0, {n0}), got {h!r}")


def interventional(scm, h):
    """Ground-truth ``P(Y | do(H0 = h))`` by deleting the ``C -> H0`` edge."""
    _check_h(scm, h)
    return kernels.scm_do(scm.p_c, scm.p_hca, scm.p_h1, scm.p_y)[h]


def _conditional(num, den):
    """``num / den`` with NaN where the conditioning cell has no mass."""
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def front_door(scm, h):
    """Front-door estimate of ``P(Y | do(H0 = h))`` from observational data.

    Computes ``sum_a P(a|h) sum_h' P(h') sum_j P(j|a,h') P(y|j,h')`` where
    ``a`` ranges over Hca and ``j`` over H1. Conditioning H1 on the raw
    feature ``h'`` is what blocks the ``Hca <- H0 <- C -> H1`` path.

    A conditional whose cell carries no observational mass is replaced by
    the same conditional without ``h'``; this only matters for degenerate
    (deterministic) mediators.
    """
    _check_h(scm, h)
    joint = full_joint(scm)                        # [h0, a, j, y]
    p_h0 = joint.sum(axis=(1, 2, 3))
    p_h0_a = joint.sum(axis=(2, 3))                # [h0, a]
    if p_h0[h] <= 0:
        raise ContractError(f"front-door needs P(H0={h}) > 0")
    p_a_given_h = p_h0_a[h] / p_h0[h]

    # P(j | a, h') and its h'-free fallback P(j | a)
    p_h0_a_j = joint.sum(axis=3)                   # [h0, a, j]
    p_j_given_ah = _conditional(p_h0_a_j, p_h0_a[:, :, None])
    p_a = p_h0_a.sum(axis=0)
    p_j_given_a = _conditional(p_h0_a_j.sum(axis=0), p_a[:, None])
    p_j_given_ah = np.where(np.isnan(p_j_given_ah), p_j_given_a[None], p_j_given_ah)

    # P(y | j, h') and its fallback P(y | j)
    p_h0_j_y = joint.sum(axis=1)                   # [h0, j, y]
    p_h0_j = p_h0_j_y.sum(axis=2, keepdims=True)
    p_y_given_jh = _conditional(p_h0_j_y, p_h0_j)
    p_j_y = p_h0_j_y.sum(axis=0)
    p_y_given_j = _conditional(p_j_y, p_j_y.sum(axis=1, keepdims=True))
    p_y_given_jh = np.where(np.isnan(p_y_given_jh), p_y_given_j[None], p_y_given_jh)

    # sum over a, h', j; NaN cells left here only ever get zero weight
    out = np.einsum("a,k,kaj,kjy->y", p_a_given_h, p_h0,
                    np.nan_to_num(p_j_given_ah), np.nan_to_num(p_y_given_jh))
    if abs(out.sum() - 1.0) > 1e-9:
        raise ContractError("front-door conditionals undefined: a mediator cell has no mass")
    return out


def total_variation(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def verify_front_door(n_models=100, seed=0, min_card=2, max_card=4):
    """Compare front-door and surgery on random SCMs; returns the max TV gap."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_models):
        cards = tuple(int(k) for k in rng.integers(min_card, max_card + 1, size=5))
        scm = DiscreteSCM.random(rng, cards)
        for h in range(cards[1]):
            worst = max(worst, total_variation(front_door(scm, h), interventional(scm, h)))
    return worst
