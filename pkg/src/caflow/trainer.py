"""Optimisation loop, schedules and the four-variant ablation harness."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import ccr, metrics
from . import diffcore as dc
from .errors import ConfigError, MetricError, NumericError
from .model import CaFlowModel, ModelConfig, config_hash, save_checkpoint, total_loss

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Every knob of a training run. Optimiser defaults follow the reference recipe."""

    lr: float = 1e-2
    weight_decay: float = 1e-4
    batch: int = 32
    dropout: float = 0.3
    lambda1: float = 0.02
    lambda2: float = 0.5
    tau_start: float = 1.0
    tau_end: float = 0.1
    tau_schedule: str = "exponential"
    epochs: int = 50
    seed: int = 0
    K: int = 4
    lambda_cons: float = 1.0
    margin: float = 1.0
    ccr_distance: str = "tokens"
    ccr_reduction: str = "sum"
    M: int = 16
    D: int = 8
    width: int = 64
    heads: int = 4
    n_queries: int = 4
    alpha_schedule: str = "linear"
    use_ccr: bool | None = None
    use_bit: bool | None = None
    random_start: bool = True
    dtype: str = "float32"

    def validate(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.batch < 2:
            raise ConfigError(f"batch must be >= 2 for counterfactual pairing, got {self.batch}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda_cons < 0:
            raise ConfigError("loss weights must be non-negative")
        ccr.temperature(0, 2, self.tau_start, self.tau_end, self.tau_schedule)
        self.model_config().validate()

    @property
    def ccr_enabled(self):
        return self.lambda1 > 0 if self.use_ccr is None else bool(self.use_ccr and self.lambda1 > 0)

    @property
    def bit_enabled(self):
        return self.lambda2 > 0 if self.use_bit is None else bool(self.use_bit)

    def model_config(self):
        return ModelConfig(M=self.M, D=self.D, width=self.width, heads=self.heads,
                           n_queries=self.n_queries, dropout=self.dropout,
                           flow_steps=self.K, lambda_cons=self.lambda_cons,
                           alpha_schedule=self.alpha_schedule, margin=self.margin,
                           ccr_distance=self.ccr_distance, ccr_reduction=self.ccr_reduction,
                           use_ccr=self.ccr_enabled, use_bit=self.bit_enabled, dtype=self.dtype)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_mapping(cls, mapping):
        types = {f.name: f for f in fields(cls)}
        values = {}
        for key, raw in mapping.items():
            if key not in types:
                raise ConfigError(f"unknown config field {key!r}")
            default = types[key].default
            try:
                if isinstance(default, bool) or default is None:
                    if raw is not None and not isinstance(raw, bool):
                        raise TypeError
                    values[key] = raw
                elif isinstance(default, int):
                    if isinstance(raw, bool) or float(raw) != int(raw):
                        raise TypeError
                    values[key] = int(raw)
                elif isinstance(default, float):
                    if isinstance(raw, bool):
                        raise TypeError
                    values[key] = float(raw)
                else:
                    values[key] = str(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"config field {key!r}: invalid value {raw!r}") from None
        cfg = cls(**values)
        cfg.validate()
        return cfg


# -- optimiser -----------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, weight_decay):
    """One Adam update with decoupled weight decay, in place on ``params``.

    ``params`` and ``grads`` map names to arrays. Returns ``params``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p *= p.dtype.type(1.0 - lr * weight_decay)
        p -= (lr * update).astype(p.dtype)
    return params


def lr_schedule(epoch, total):
    """Step multiplier: 1 before the halfway point, 0.1 up to three quarters, then 0.01."""
    if total <= 0:
        return 1.0
    frac = epoch / total
    if frac < 0.5:
        return 1.0
    if frac <= 0.75:
        return 0.1
    return 0.01


# -- training ------------------------------------------------------------------


@dataclass
class RunLog:
    config: dict
    config_hash: str
    initial_eval: dict | None
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    best_srcc: float | None = None
    checkpoint: str | None = None

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _streams(seed):
    names = ("shuffle", "augment", "dropout", "gumbel", "pairing")
    children = np.random.SeedSequence(seed).spawn(len(names) + 1)[1:]
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def _eval_record(model, X, y, s_min, s_max):
    if len(X) == 0:
        return None, None
    pred = model.predict(X, s_min, s_max)
    if not np.all(np.isfinite(pred)):
        raise NumericError("non-finite predictions during evaluation")
    try:
        rho = metrics.srcc(y, pred)
    except MetricError:
        rho = None
    return {"srcc": rho, "r_l2": metrics.r_l2(y, pred, s_max, s_min), "n": int(len(y))}, pred


def _roll_clips(X, offsets):
    M = X.shape[1]
    idx = (np.arange(M)[None, :] + offsets[:, None]) % M
    return np.take_along_axis(X, idx[:, :, None], axis=1)


@dataclass
class TrainResult:
    log: RunLog
    model: CaFlowModel
    predictions: np.ndarray | None


def train(config, split, out_dir=None):
    """Train on ``split.train``, evaluating on ``split.test`` after every epoch.

    The model with the best test SRCC is kept (ties keep the earliest). With
    ``out_dir`` the run log, checkpoint, eval CSV and predictions are
    written there.
    """
    config.validate()
    X, y = split.arrays("train")
    if len(X) == 0:
        raise ConfigError("training split is empty")
    if X.shape[1:] != (config.M, config.D):
        raise ConfigError(f"data clips are {X.shape[1:]}, config expects ({config.M}, {config.D})")
    Xt, yt = split.arrays("test")
    s_min, s_max = split.s_min, split.s_max
    y_norm = (y - s_min) / (s_max - s_min)

    model_cfg = config.model_config()
    model = CaFlowModel(model_cfg, seed=config.seed)
    rngs = _streams(config.seed)
    params = dict(model.named_parameters())
    arrays = {name: t.data for name, t in params.items()}
    state = AdamState()
    lam1 = config.lambda1 if model_cfg.use_ccr else 0.0
    lam2 = config.lambda2 if model_cfg.use_bit else 0.0

    initial, best_pred = _eval_record(model, Xt, yt, s_min, s_max)
    run = RunLog(config.to_dict(), config_hash(config.to_dict()), initial)
    best_state = model.state_dict()
    if initial is not None and initial["srcc"] is not None:
        run.best_epoch, run.best_srcc = -1, initial["srcc"]
    anchor_ready = False
    dtype = model.dtype

    for epoch in range(config.epochs):
        lr = config.lr * lr_schedule(epoch, config.epochs)
        tau = ccr.temperature(epoch, config.epochs, config.tau_start, config.tau_end,
                              config.tau_schedule)
        order = rngs["shuffle"].permutation(len(X))
        offsets = rngs["augment"].integers(0, config.M, size=len(X))
        Xe = _roll_clips(X, offsets) if config.random_start else X
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, len(order), config.batch):
            idx = order[start:start + config.batch]
            if len(idx) < 2:
                continue
            xb = Xe[idx].astype(dtype)
            if model_cfg.use_bit and not anchor_ready:
                model.bitflow.set_anchor(model.encode(xb).data)
                anchor_ready = True
            loss, parts = total_loss(model, xb, y_norm[idx], lam1, lam2, rngs, tau=tau)
            if not math.isfinite(parts.total):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            dc.backward(loss)
            grads = {name: t.grad for name, t in params.items() if t.grad is not None}
            adam_step(arrays, grads, state, lr, config.weight_decay)
            for t in params.values():
                t.grad = None
            sums += (parts.regression, parts.ccr, parts.bit, parts.total)
            n_batches += 1
        mean = sums / max(n_batches, 1)
        record, pred = _eval_record(model, Xt, yt, s_min, s_max)
        run.epochs.append({
            "epoch": epoch, "lr": lr, "tau": tau,
            "loss": {"regression": float(mean[0]), "ccr": float(mean[1]),
                     "bit": float(mean[2]), "total": float(mean[3]),
                     "lambda1": lam1, "lambda2": lam2},
            "eval": record,
        })
        if record is not None and record["srcc"] is not None and (
                run.best_srcc is None or record["srcc"] > run.best_srcc):
            run.best_epoch, run.best_srcc = epoch, record["srcc"]
            best_state = model.state_dict()
            best_pred = pred
        log.debug("epoch %d loss %.5f srcc %s", epoch, mean[3], record and record["srcc"])

    model.load_state_dict(best_state)
    if out_dir is not None:
        write_run(run, model, split, best_pred, out_dir)
    return TrainResult(run, model, best_pred)


def write_run(run, model, split, predictions, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.ckpt"
    run.checkpoint = ckpt.name
    save_checkpoint(model, ckpt, extra={"s_min": split.s_min, "s_max": split.s_max})
    (out / "run_log.json").write_text(run.to_json())
    if predictions is not None:
        _, yt = split.arrays("test")
        cats = [r.meta.get("category", "all") for r in split.test]
        write_predictions(out / "predictions.csv", yt, predictions, cats)
        report = metrics.evaluate(yt, predictions, split.s_min, split.s_max)
        (out / "eval.csv").write_text(report.to_csv())


def write_predictions(path, truth, pred, categories=None):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "category", "truth", "pred"])
    for i, (s, p) in enumerate(zip(truth, pred)):
        cat = "all" if categories is None else categories[i]
        writer.writerow([i, cat, repr(float(s)), repr(float(p))])
    Path(path).write_text(buf.getvalue())


# -- ablation ------------------------------------------------------------------

VARIANTS = (
    ("baseline", False, False),
    ("+CCR", True, False),
    ("+BiT", False, True),
    ("CCR+BiT", True, True),
)
ABLATION_COLUMNS = ("variant", "ccr", "bit", "srcc", "r_l2", "n")


def variant_config(config, use_ccr, use_bit):
    return replace(config,
                   lambda1=config.lambda1 if use_ccr else 0.0,
                   lambda2=config.lambda2 if use_bit else 0.0,
                   use_ccr=use_ccr, use_bit=use_bit)


def ablate(config, split, out_dir=None):
    """Train the four variants with identical seeds.

    Returns ``(reports, csv_text, results)``; ``reports`` maps variant name
    to the :class:`~caflow.metrics.EvalReport` of its selected model.
    """
    reports, results = {}, {}
    _, yt = split.arrays("test")
    for name, use_ccr, use_bit in VARIANTS:
        sub = None if out_dir is None else Path(out_dir) / name.replace("+", "plus_")
        res = train(variant_config(config, use_ccr, use_bit), split, sub)
        results[name] = res
        reports[name] = metrics.evaluate(yt, res.predictions, split.s_min, split.s_max)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_COLUMNS)
    for name, use_ccr, use_bit in VARIANTS:
        r = reports[name]
        writer.writerow([name, int(use_ccr), int(use_bit), f"{r.srcc:.6f}", f"{r.r_l2:.6f}", r.n])
    text = buf.getvalue()
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.csv").write_text(text)
    return reports, text, results
