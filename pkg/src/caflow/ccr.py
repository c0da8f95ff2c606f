"""Causal counterfactual regularisation.

Clips are scored against a pooled "desired" representation by scaled
dot-product attention, turned into a per-clip causal probability with a
two-way Gumbel-Softmax, and split into causal and confounding parts.
Swapping those parts between batch partners yields counterfactual
sequences that feed a triplet hinge on encoder outputs.

Every function accepts a leading batch axis: clips are ``(B, M, D)``,
logits and masks ``(B, M)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ContractError, DomainError


@dataclass
class SeparationResult:
    mask: dc.Tensor
    causal: dc.Tensor
    confound: dc.Tensor
    attention: dc.Tensor | None = None


@dataclass
class CounterfactualPair:
    cf_conf: dc.Tensor
    cf_causal: dc.Tensor
    partner_index: np.ndarray | int | None = None


def attend(desired, clips, w_query, w_key):
    """Pre-softmax attention logits of each clip against the desired query.

    ``desired`` is ``(B, D')``, ``clips`` ``(B, M, D)``; both are projected
    to the key width ``d_k`` and scored as ``q . k_m / sqrt(d_k)``.
    """
    if clips.shape[-2] < 2:
        raise ContractError(f"attend: need at least 2 clips to separate, got M={clips.shape[-2]}")
    if desired.shape[-1] != w_query.shape[0] or clips.shape[-1] != w_key.shape[0]:
        raise ContractError(
            f"attend: desired {desired.shape} / clips {clips.shape} do not match "
            f"projections {w_query.shape}, {w_key.shape}")
    d_k = w_key.shape[1]
    q = dc.matmul(desired, w_query)                               # (B, d_k)
    k = dc.matmul(clips, w_key)                                   # (B, M, d_k)
    scores = dc.matmul(k, dc.reshape(q, q.shape + (1,)))          # (B, M, 1)
    return dc.reshape(scores, scores.shape[:-1]) * (1.0 / math.sqrt(d_k))


def causal_logits(attention):
    """Per-clip causal logits ``log(M * softmax(a))`` from attention scores.

    Uniform attention gives logit 0 (mask 0.5 at ``tau = 1``); because the
    attention weights sum to one, not every clip can be marked causal.
    """
    M = attention.shape[-1]
    return dc.log_softmax(attention, axis=-1) + math.log(M)


def sample_gumbel(rng, shape, dtype=np.float64):
    """Standard Gumbel draws ``-log(-log U)``."""
    u = rng.random(shape)
    tiny = np.finfo(np.float64).tiny
    u = np.clip(u, tiny, 1.0 - 1e-16)
    return (-np.log(-np.log(u))).astype(dtype)


def gumbel_channels(logits, tau, rng=None, noise=None):
    """Two-way Gumbel-Softmax over (causal, confound) logits ``[a_m, 0]``.

    Returns ``(..., M, 2)`` channel probabilities. Noise comes from
    ``noise`` if given, else from ``rng``; with neither the relaxation is
    deterministic.
    """
    if not tau > 0:
        raise DomainError(f"gumbel temperature must be positive, got {tau}")
    pair = dc.stack([logits, dc.Tensor(np.zeros(logits.shape, dtype=logits.dtype))], axis=-1)
    if noise is None and rng is not None:
        noise = sample_gumbel(rng, pair.shape, pair.dtype)
    if noise is not None:
        pair = pair + dc.Tensor(np.asarray(noise, dtype=pair.dtype))
    return dc.softmax(pair * (1.0 / tau), axis=-1)


def gumbel_mask(logits, tau, rng=None, noise=None):
    """Per-clip causal probability ``m in [0, 1]``."""
    return gumbel_channels(logits, tau, rng=rng, noise=noise)[..., 0]


def separate(clips, mask, attention=None):
    """Split ``clips`` into ``m * H`` and ``(1 - m) * H``."""
    if clips.shape[:-1] != mask.shape:
        raise ContractError(f"separate: mask shape {mask.shape} does not match clips {clips.shape}")
    m = dc.reshape(mask, mask.shape + (1,))
    causal = clips * m
    confound = clips * (1.0 - m)
    return SeparationResult(mask, causal, confound, attention)


def make_counterfactuals(sep_i, sep_h, partner_index=None):
    """Swap causal and confounding parts between ``i`` and its partner ``h``.

    ``cf_conf`` keeps the causal part of ``i`` under ``h``'s context;
    ``cf_causal`` keeps ``i``'s context around ``h``'s causal part.
    """
    if sep_i.causal.shape != sep_h.causal.shape:
        raise ContractError(
            f"make_counterfactuals: shapes differ {sep_i.causal.shape} vs {sep_h.causal.shape}")
    cf_conf = sep_i.causal + sep_h.confound
    cf_causal = sep_i.confound + sep_h.causal
    return CounterfactualPair(cf_conf, cf_causal, partner_index)


def take_partners(sep, partners):
    """Gather the partner of every batch item into a new separation."""
    return SeparationResult(
        dc.take(sep.mask, partners, 0), dc.take(sep.causal, partners, 0),
        dc.take(sep.confound, partners, 0),
        None if sep.attention is None else dc.take(sep.attention, partners, 0))


def derangement(n, rng):
    """Uniform random permutation of ``range(n)`` without fixed points."""
    if n < 2:
        raise ContractError(f"counterfactual pairing needs a batch of at least 2, got {n}")
    while True:
        perm = rng.permutation(n)
        if np.all(perm != np.arange(n)):
            return perm


def ccr_distances(z_orig, z_cf_conf, z_cf_causal, reduction="mean"):
    """Per-item distances ``(D_pos, D_neg)``.

    The last axis is reduced by ``reduction`` (``"mean"`` gives the MSE,
    ``"sum"`` the squared Euclidean distance); any axes between the batch
    axis and the last, such as tokens, are averaged.
    """
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    if not z_orig.shape == z_cf_conf.shape == z_cf_causal.shape:
        raise ContractError(
            f"ccr_loss: encoding shapes differ {z_orig.shape}, {z_cf_conf.shape}, {z_cf_causal.shape}")
    reduce = dc.mean if reduction == "mean" else dc.sum
    d_pos = reduce(dc.square(z_orig - z_cf_conf), axis=-1)
    d_neg = reduce(dc.square(z_orig - z_cf_causal), axis=-1)
    while d_pos.ndim > 1:
        d_pos, d_neg = dc.mean(d_pos, axis=-1), dc.mean(d_neg, axis=-1)
    return d_pos, d_neg


def ccr_loss(z_orig, z_cf_conf, z_cf_causal, margin=1.0, reduction="mean"):
    """Triplet hinge ``max(0, D_pos - D_neg + margin)``, averaged over items."""
    if margin < 0:
        raise ConfigError(f"margin must be non-negative, got {margin}")
    d_pos, d_neg = ccr_distances(z_orig, z_cf_conf, z_cf_causal, reduction)
    return dc.mean(dc.relu(d_pos - d_neg + margin))


def temperature(epoch, total, tau_start=1.0, tau_end=0.1, schedule="exponential"):
    """Gumbel temperature for ``epoch`` out of ``total``; non-increasing."""
    if not 0 < tau_end <= tau_start:
        raise ConfigError(f"need 0 < tau_end <= tau_start, got {tau_end}, {tau_start}")
    if schedule == "constant" or total <= 1:
        return float(tau_start)
    frac = min(max(epoch / (total - 1), 0.0), 1.0)
    if schedule == "exponential":
        return float(tau_start * (tau_end / tau_start) ** frac)
    if schedule == "linear":
        return float(tau_start + (tau_end - tau_start) * frac)
    raise ConfigError(f"unknown temperature schedule {schedule!r}")


def mask_diagnostics(masks, causal_flags):
    """Mean mask over planted causal clips and over the remaining clips.

    Either value is ``None`` when its group is empty.
    """
    masks = np.asarray(masks, dtype=np.float64)
    flags = np.asarray(causal_flags, dtype=bool)
    on = float(masks[flags].mean()) if flags.any() else None
    off = float(masks[~flags].mean()) if (~flags).any() else None
    return on, off
