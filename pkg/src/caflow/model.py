"""End-to-end network: temporal encoder, CCR, BiT-Flow and score head."""

from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import ccr
from . import diffcore as dc
from .bitflow import BiTFlow
from .errors import ConfigError, ContractError, FormatError
from .nn import Linear, Module, init_weight

CHECKPOINT_VERSION = 1
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


@dataclass
class ModelConfig:
    """Architecture sizes and loss options of :class:`CaFlowModel`."""

    M: int = 16
    D: int = 8
    width: int = 64
    heads: int = 4
    n_queries: int = 4
    ffn_mult: int = 2
    head_hidden: int = 64
    dropout: float = 0.3
    key_dim: int = 16
    flow_key_dim: int = 16
    time_hidden: int = 16
    flow_steps: int = 4
    lambda_cons: float = 1.0
    alpha_schedule: str = "linear"
    margin: float = 1.0
    # token-wise squared distance summed over width; "pooled" / "mean" is the plain MSE reading
    ccr_distance: str = "tokens"
    ccr_reduction: str = "sum"
    use_ccr: bool = True
    use_bit: bool = True
    flow_zero_init: bool = True
    flow_target_grad: bool = False
    flow_input_grad: bool = False
    dtype: str = "float32"

    def validate(self):
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.M < 2 or self.D < 1:
            raise ConfigError(f"need M >= 2 and D >= 1, got M={self.M}, D={self.D}")
        if self.margin < 0:
            raise ConfigError(f"margin must be non-negative, got {self.margin}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.flow_steps < 1:
            raise ConfigError(f"flow_steps must be >= 1, got {self.flow_steps}")
        if self.ccr_distance not in ("pooled", "tokens"):
            raise ConfigError(f"ccr_distance must be 'pooled' or 'tokens', got {self.ccr_distance!r}")
        if self.ccr_reduction not in ("mean", "sum"):
            raise ConfigError(f"ccr_reduction must be 'mean' or 'sum', got {self.ccr_reduction!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def hash(self):
        return config_hash(asdict(self))


def config_hash(mapping):
    blob = json.dumps(mapping, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class LossBreakdown:
    regression: float
    ccr: float
    bit: float
    total: float
    lambda1: float
    lambda2: float

    @classmethod
    def compose(cls, regression, ccr_value, bit, lambda1, lambda2):
        total = regression + lambda1 * ccr_value + lambda2 * bit
        return cls(float(regression), float(ccr_value), float(bit), float(total),
                   float(lambda1), float(lambda2))


@dataclass
class ForwardOutput:
    score: dc.Tensor                       # normalised scores, (B,)
    tokens: dc.Tensor                      # refined tokens H1, (B, M, D')
    encoded: dc.Tensor                     # encoder output, (B, M, D')
    bit_loss: dc.Tensor | None = None
    steps: list = field(default_factory=list)


class TemporalEncoder(Module):
    """Input projection, one multi-head self-attention block and an FFN."""

    def __init__(self, cfg, rng, dtype):
        super().__init__()
        w = cfg.width
        self.heads = cfg.heads
        self.add_child("embed", Linear(cfg.D, w, rng, dtype))
        self.add_child("query", Linear(w, w, rng, dtype, bias=False))
        self.add_child("key", Linear(w, w, rng, dtype, bias=False))
        self.add_child("value", Linear(w, w, rng, dtype, bias=False))
        self.add_child("proj", Linear(w, w, rng, dtype))
        self.add_param("ln1_gain", np.ones(w, dtype=dtype))
        self.add_param("ln1_bias", np.zeros(w, dtype=dtype))
        self.add_child("ffn_in", Linear(w, cfg.ffn_mult * w, rng, dtype))
        self.add_child("ffn_out", Linear(cfg.ffn_mult * w, w, rng, dtype))
        self.add_param("ln2_gain", np.ones(w, dtype=dtype))
        self.add_param("ln2_bias", np.zeros(w, dtype=dtype))

    def _split(self, x):
        B, M, W = x.shape
        return dc.transpose(dc.reshape(x, (B, M, self.heads, W // self.heads)), (0, 2, 1, 3))

    def __call__(self, clips):
        x = self.embed(clips)
        B, M, W = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(W // self.heads))
        ctx = dc.matmul(dc.softmax(scores, axis=-1), v)
        ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (B, M, W))
        x = dc.layer_norm(x + self.proj(ctx), self.ln1_gain, self.ln1_bias)
        ff = self.ffn_out(dc.relu(self.ffn_in(x)))
        return dc.layer_norm(x + ff, self.ln2_gain, self.ln2_bias)


class CaFlowModel(Module):
    def __init__(self, cfg, seed=0):
        super().__init__()
        cfg.validate()
        self.config = cfg
        dtype = np.dtype(cfg.dtype)
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        # every submodule is always built so variants share their initial weights
        self.add_child("encoder", TemporalEncoder(cfg, rng, dtype))
        self.add_param("queries", (0.1 * rng.normal(size=(cfg.n_queries, cfg.width))).astype(dtype))
        self.add_child("bitflow", BiTFlow(cfg.width, cfg.M, rng, dtype, cfg.flow_steps,
                                          cfg.lambda_cons, cfg.alpha_schedule, cfg.flow_key_dim,
                                          cfg.time_hidden, cfg.flow_zero_init,
                                          cfg.flow_target_grad, cfg.flow_input_grad))
        self.add_param("ccr_query", init_weight(rng, cfg.width, cfg.key_dim, dtype))
        self.add_param("ccr_key", init_weight(rng, cfg.D, cfg.key_dim, dtype))
        self.add_child("head_hidden", Linear(cfg.width, cfg.head_hidden, rng, dtype))
        self.add_child("head_out", Linear(cfg.head_hidden, 1, rng, dtype))
        self.head_out.bias.data[:] = 0.5
        # normalises refined tokens so flow offsets cannot swamp the head
        self.add_param("out_gain", np.ones(cfg.width, dtype=dtype))
        self.add_param("out_bias", np.zeros(cfg.width, dtype=dtype))

    # -- pieces ----------------------------------------------------------------

    def _input(self, clips):
        x = clips if isinstance(clips, dc.Tensor) else dc.Tensor(np.asarray(clips, dtype=self.dtype))
        if x.ndim == 2:
            x = dc.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1:] != (self.config.M, self.config.D):
            raise ContractError(
                f"expected clips of shape (B, {self.config.M}, {self.config.D}), got {x.shape}")
        return x

    def encode(self, clips):
        return self.encoder(self._input(clips))

    def pooled_encoding(self, clips):
        """``Z(H)``: mean over the encoder's output tokens."""
        return dc.mean(self.encode(clips), axis=1)

    def decoder_queries(self, encoded):
        if not self.config.flow_input_grad:
            encoded = dc.Tensor(encoded.data)
        return self.queries + dc.mean(encoded, axis=1, keepdims=True)

    def head(self, pooled, training, rng):
        h = dc.relu(self.head_hidden(pooled))
        h = dc.dropout(h, self.config.dropout, rng, training)
        out = self.head_out(h)
        return dc.reshape(out, (out.shape[0],))

    # -- forward ---------------------------------------------------------------

    def forward(self, clips, mode="eval", rng=None, with_flow_loss=None, record=False):
        """Encoder, optional BiT-Flow refinement, mean pooling and head.

        ``mode`` is ``"train"`` (dropout on, needs ``rng``) or ``"eval"``.
        """
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        if training and rng is None and self.config.dropout > 0:
            raise ContractError("train mode needs an explicit rng for dropout")
        x = self._input(clips)
        encoded = self.encoder(x)
        tokens, bit, steps = encoded, None, []
        if self.config.use_bit:
            want = training if with_flow_loss is None else with_flow_loss
            tokens, bit, steps = self.bitflow.refine(encoded, self.decoder_queries(encoded),
                                                     with_loss=want, record=record)
        tokens = dc.layer_norm(tokens, self.out_gain, self.out_bias)
        score = self.head(dc.mean(tokens, axis=1), training, rng)
        return ForwardOutput(score, tokens, encoded, bit, steps)

    def separation(self, clips, tokens, tau, rng=None):
        """Attention logits, Gumbel mask and causal/confound split of ``clips``."""
        x = self._input(clips)
        desired = dc.mean(tokens, axis=1)
        scores = ccr.attend(desired, x, self.ccr_query, self.ccr_key)
        mask = ccr.gumbel_mask(ccr.causal_logits(scores), tau, rng=rng)
        return ccr.separate(x, mask, attention=scores)

    def masks(self, clips, tau):
        """Deterministic (noise-free) causal masks in eval mode, ``(B, M)``."""
        out = self.forward(clips, "eval", with_flow_loss=False)
        return self.separation(clips, out.tokens, tau).mask.data

    def predict(self, clips, s_min, s_max, batch_size=256):
        """Denormalised eval-mode scores."""
        X = np.asarray(clips)
        preds = []
        for start in range(0, len(X), batch_size):
            out = self.forward(X[start:start + batch_size], "eval", with_flow_loss=False)
            preds.append(out.score.data.astype(np.float64))
        pred = np.concatenate(preds) if preds else np.zeros(0)
        return s_min + (s_max - s_min) * pred


def total_loss(model, clips, targets, lambda1, lambda2, rngs, tau=1.0, partners=None):
    """Assemble ``regression + lambda1 * ccr + lambda2 * bit`` for one batch.

    ``targets`` are normalised scores. ``rngs`` maps ``"dropout"``,
    ``"gumbel"`` and ``"pairing"`` to generators. Returns the loss tensor to
    differentiate and a float :class:`LossBreakdown`.
    """
    cfg = model.config
    x = model._input(clips)
    B = x.shape[0]
    use_ccr = cfg.use_ccr and lambda1 > 0
    if use_ccr and B < 2:
        raise ContractError("CCR pairs each video with another from the same batch; need batch >= 2")
    y = dc.Tensor(np.asarray(targets, dtype=model.dtype).reshape(B))
    out = model.forward(x, "train", rng=rngs.get("dropout"),
                        with_flow_loss=cfg.use_bit and lambda2 > 0)
    reg = dc.mse(out.score, y)
    loss = reg
    ccr_value = bit_value = 0.0
    if use_ccr:
        if partners is None:
            partners = ccr.derangement(B, rngs["pairing"])
        sep = model.separation(x, out.tokens, tau, rng=rngs.get("gumbel"))
        pair = ccr.make_counterfactuals(sep, ccr.take_partners(sep, partners), partners)
        z_orig = out.encoded
        z_cf = model.encoder(dc.concat([pair.cf_conf, pair.cf_causal], axis=0))
        if cfg.ccr_distance == "pooled":
            z_orig, z_cf = dc.mean(z_orig, axis=1), dc.mean(z_cf, axis=1)
        z_conf, z_causal = z_cf[:B], z_cf[B:]
        l_ccr = ccr.ccr_loss(z_orig, z_conf, z_causal, cfg.margin, cfg.ccr_reduction)
        loss = loss + l_ccr * lambda1
        ccr_value = l_ccr.item()
    if out.bit_loss is not None:
        loss = loss + out.bit_loss * lambda2
        bit_value = out.bit_loss.item()
    parts = LossBreakdown.compose(reg.item(), ccr_value, bit_value, lambda1, lambda2)
    return loss, parts


# -- checkpoints ---------------------------------------------------------------


def _zip_bytes(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(model, path, extra=None):
    """Write parameters plus config and its hash into a deterministic zip."""
    cfg = asdict(model.config)
    meta = {"version": CHECKPOINT_VERSION, "config": cfg, "config_hash": config_hash(cfg),
            "parameters": [name for name, _ in model.named_parameters()],
            "extra": extra or {}}
    with zipfile.ZipFile(path, "w") as zf:
        _zip_bytes(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True))
        for name, t in model.named_parameters():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(t.data), allow_pickle=False)
            _zip_bytes(zf, f"params/{name}.npy", buf.getvalue())
    return path


def load_checkpoint(path, expected_hash=None):
    """Rebuild a model from :func:`save_checkpoint` output; returns ``(model, meta)``."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, FileNotFoundError, IsADirectoryError) as exc:
        raise FormatError(f"not a checkpoint: {exc}", path=path) from None
    with zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {meta.get('version')}", path=path)
        if config_hash(meta["config"]) != meta["config_hash"]:
            raise FormatError("checkpoint config does not match its stored hash", path=path)
        if expected_hash is not None and expected_hash != meta["config_hash"]:
            raise ConfigError(
                f"config hash {expected_hash[:12]} does not match checkpoint {meta['config_hash'][:12]}")
        known = {f.name for f in fields(ModelConfig)}
        cfg = ModelConfig(**{k: v for k, v in meta["config"].items() if k in known})
        model = CaFlowModel(cfg)
        state = {name: np.load(io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False)
                 for name in meta["parameters"]}
    model.load_state_dict(state)
    return model, meta
