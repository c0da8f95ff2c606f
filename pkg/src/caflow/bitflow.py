"""Bidirectional time-conditioned flow refinement.

A running token representation is refined over ``K`` steps at times
``t = k / K``. At each step a time embedding is added to the tokens and to
the decoder queries, forward and backward predictors propose updates (the
backward one at reversed time ``1 - t``), and the two are blended by a
schedule ``alpha(t)``. Training targets interpolate linearly from a
learned prototype anchor to the encoder output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ContractError, DomainError
from .nn import Linear, Module, init_weight

ALPHA_SCHEDULES = ("linear", "cosine", "constant")


@dataclass
class FlowStep:
    t: float
    alpha: float
    delta_fwd: np.ndarray
    delta_bwd: np.ndarray
    delta_blend: np.ndarray
    loss_flow: float | None = None
    loss_cons: float | None = None


def _check_time(t):
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"time must lie in [0, 1], got {t}")


class TimeEmbedding(Module):
    """Two-layer tanh MLP from scalar ``t`` to a ``width`` vector."""

    def __init__(self, width, hidden, rng, dtype=np.float64, zero_out=False):
        super().__init__()
        self.add_child("inner", Linear(1, hidden, rng, dtype))
        self.inner.bias.data[:] = rng.normal(size=hidden).astype(dtype)
        self.add_child("outer", Linear(hidden, width, rng, dtype, zero=zero_out))

    def __call__(self, t):
        _check_time(t)
        tt = dc.Tensor(np.array([[t]], dtype=self.inner.weight.dtype))
        e = self.outer(dc.tanh(self.inner(tt)))
        return dc.reshape(e, (e.shape[-1],))


def time_embed(t, embedding):
    return embedding(t)


def condition(X, Q, e):
    """Add the time embedding to encoder tokens and decoder queries.

    ``e`` is either one ``(D',)`` vector or token-wise ``(..., M, D')``; the
    queries receive its mean over tokens.
    """
    if e.shape[-1] != X.shape[-1] or e.shape[-1] != Q.shape[-1]:
        raise ContractError(f"condition: widths differ X{X.shape}, Q{Q.shape}, e{e.shape}")
    X_t = X + e
    e_q = e if e.ndim == 1 else dc.mean(e, axis=-2, keepdims=True)
    return X_t, Q + e_q


class FlowPredictor(Module):
    """Tokens attend to the decoder queries, then a gated residual MLP.

    ``F(X, Q, s) = W_o tanh(attn(X W_q, Q W_k, Q W_v) + X W_x + s w_s + b) + b_o``
    """

    def __init__(self, width, key_dim, rng, dtype=np.float64, zero_out=True):
        super().__init__()
        self.key_dim = key_dim
        self.add_param("w_query", init_weight(rng, width, key_dim, dtype))
        self.add_param("w_key", init_weight(rng, width, key_dim, dtype))
        self.add_param("w_value", init_weight(rng, width, width, dtype))
        self.add_param("w_skip", init_weight(rng, width, width, dtype))
        self.add_param("w_time", (rng.normal(size=width)).astype(dtype))
        self.add_param("bias", np.zeros(width, dtype=dtype))
        self.add_child("out", Linear(width, width, rng, dtype, zero=zero_out))

    def __call__(self, X, Q, s):
        q = dc.matmul(X, self.w_query)
        k = dc.matmul(Q, self.w_key)
        v = dc.matmul(Q, self.w_value)
        kt = dc.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
        attn = dc.softmax(dc.matmul(q, kt) * (1.0 / math.sqrt(self.key_dim)), axis=-1)
        hidden = dc.tanh(dc.matmul(attn, v) + dc.matmul(X, self.w_skip)
                         + self.w_time * float(s) + self.bias)
        return self.out(hidden)


def predict_flows(X_t, Q_t, t, forward, backward):
    """Forward update at time ``t`` and backward update at ``1 - t``."""
    _check_time(t)
    return forward(X_t, Q_t, t), backward(X_t, Q_t, 1.0 - t)


def alpha(t, schedule="linear"):
    _check_time(t)
    if schedule == "linear":
        return float(t)
    if schedule == "cosine":
        return float(0.5 * (1.0 - math.cos(math.pi * t)))
    if schedule == "constant":
        return 0.5
    raise ConfigError(f"unknown alpha schedule {schedule!r}; expected one of {ALPHA_SCHEDULES}")


def blend(delta_fwd, delta_bwd, t, schedule="linear"):
    a = alpha(t, schedule)
    return delta_fwd * a + delta_bwd * (1.0 - a)


def flow_loss(delta, H_next, P):
    """Mean squared gap between the update and the target change ``H_next - P``."""
    return dc.mean(dc.square(delta - (H_next - P)))


def consistency_loss(delta, delta_bwd, H_next, P):
    """Cycle penalty: ``P + delta`` should reach ``H_next`` and ``H_next + delta_bwd`` return to ``P``."""
    forward_gap = dc.mean(dc.square(P + delta - H_next))
    backward_gap = dc.mean(dc.square(H_next + delta_bwd - P))
    return forward_gap + backward_gap


def bit_loss(loss_flow, loss_cons, lambda_cons):
    if lambda_cons < 0:
        raise ConfigError(f"lambda_cons must be non-negative, got {lambda_cons}")
    return loss_flow + loss_cons * lambda_cons


class BiTFlow(Module):
    def __init__(self, width, n_tokens, rng, dtype=np.float64, steps=4, lambda_cons=1.0,
                 alpha_schedule="linear", key_dim=16, time_hidden=16, zero_out=True,
                 target_grad=False, input_grad=False):
        super().__init__()
        if steps < 1:
            raise ConfigError(f"flow steps K must be >= 1, got {steps}")
        if lambda_cons < 0:
            raise ConfigError(f"lambda_cons must be non-negative, got {lambda_cons}")
        alpha(0.0, alpha_schedule)
        self.steps = steps
        self.lambda_cons = lambda_cons
        self.alpha_schedule = alpha_schedule
        self.target_grad = target_grad
        self.input_grad = input_grad
        self.add_child("time", TimeEmbedding(width, time_hidden, rng, dtype))
        self.add_child("forward", FlowPredictor(width, key_dim, rng, dtype, zero_out))
        self.add_child("backward", FlowPredictor(width, key_dim, rng, dtype, zero_out))
        self.add_param("anchor", np.zeros((n_tokens, width), dtype=dtype))

    def set_anchor(self, encodings):
        """Initialise the prototype anchor to the batch mean of ``encodings``."""
        self.anchor.data = np.asarray(encodings, dtype=self.anchor.dtype).mean(axis=0).copy()

    def refine(self, H, queries, target=None, with_loss=True, record=False):
        """Run ``K`` refinement steps starting from tokens ``H``.

        ``target`` (defaults to ``H``) is the encoder output the targets
        interpolate towards; it is treated as a constant unless the module
        was built with ``target_grad=True``. Likewise the predictors read a
        constant copy of the running tokens unless ``input_grad=True``, so
        the flow losses cannot pull the encoder towards a collapsed
        representation; the residual path still carries gradient. Returns
        the refined tokens, the step-averaged loss (or ``None``) and the
        recorded steps.
        """
        K = self.steps
        P = self.anchor
        end = H if target is None else target
        if not isinstance(end, dc.Tensor):
            end = dc.Tensor(np.asarray(end, dtype=H.dtype))
        if not self.target_grad:
            end = dc.Tensor(end.data)
            P_target = dc.Tensor(P.data)
        else:
            P_target = P
        running = H
        total = None
        steps = []
        for k in range(K):
            t = k / K
            e = self.time(t)
            X_in = running if self.input_grad else dc.Tensor(running.data)
            X_t, Q_t = condition(X_in, queries, e)
            d_fwd, d_bwd = predict_flows(X_t, Q_t, t, self.forward, self.backward)
            a = alpha(t, self.alpha_schedule)
            delta = d_fwd * a + d_bwd * (1.0 - a)
            lf = lc = None
            if with_loss:
                s = t + 1.0 / K
                H_next = P_target * (1.0 - s) + end * s
                lf = flow_loss(delta, H_next, P)
                lc = consistency_loss(delta, d_bwd, H_next, P)
                step_loss = bit_loss(lf, lc, self.lambda_cons)
                total = step_loss if total is None else total + step_loss
            if record:
                steps.append(FlowStep(t, a, d_fwd.data.copy(), d_bwd.data.copy(), delta.data.copy(),
                                      None if lf is None else lf.item(),
                                      None if lc is None else lc.item()))
            running = running + delta
        loss = None if total is None else total * (1.0 / K)
        return running, loss, steps


def refine(bitflow, H, queries, with_loss=True):
    """Module-level convenience wrapper around :meth:`BiTFlow.refine`."""
    return bitflow.refine(H, queries, with_loss=with_loss)
