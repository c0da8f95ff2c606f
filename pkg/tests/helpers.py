"""Finite-difference gradient checking shared by the test modules."""

import numpy as np

from caflow import diffcore as dc

RTOL = 1e-4
FLOOR = 1e-6

# criterion number -> (title, passed, seconds, detail), printed by conftest
ACCEPTANCE = {}


class AtKink(Exception):
    """One-sided differences disagree: the point sits on a non-smooth set."""


def directional_fd(fn, leaf, direction, eps=1e-5):
    """Central difference of ``fn()`` along ``direction`` in ``leaf.data``.

    Raises :class:`AtKink` when the one-sided slopes disagree by more than
    1% of the slope, which only happens next to a ReLU or hinge corner.
    """
    base = leaf.data.copy()
    try:
        f0 = fn().item()
        leaf.data = base + eps * direction
        fp = fn().item()
        leaf.data = base - eps * direction
        fm = fn().item()
    finally:
        leaf.data = base
    right, left = (fp - f0) / eps, (f0 - fm) / eps
    central = 0.5 * (right + left)
    if abs(right - left) > 1e-2 * max(abs(central), 1e-3):
        raise AtKink
    return central


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), FLOOR)


def gradient_errors(fn, leaves, rng, eps=1e-5, entries=2):
    """Relative errors between analytic and numeric directional derivatives.

    Every leaf is probed along one random direction and along ``entries``
    single coordinates.
    """
    loss = fn()
    dc.backward(loss)
    analytic = {id(t): (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for t in leaves}
    errors = []
    for t in leaves:
        probes = [rng.normal(size=t.shape)]
        for flat in rng.choice(t.size, size=min(entries, t.size), replace=False):
            e = np.zeros(t.size)
            e[flat] = 1.0
            probes.append(e.reshape(t.shape))
        for d in probes:
            numeric = directional_fd(fn, t, d, eps)
            errors.append(relative_error(numeric, float((analytic[id(t)] * d).sum())))
    return errors


def check_gradients(fn, leaves, rng, eps=1e-5, rtol=RTOL, entries=2):
    """Return ``True`` if checked, ``False`` if the point was a kink; assert on mismatch."""
    try:
        errs = gradient_errors(fn, leaves, rng, eps, entries)
    except AtKink:
        return False
    worst = max(errs)
    assert worst < rtol, f"gradient mismatch: worst relative error {worst:.3e}"
    return True
