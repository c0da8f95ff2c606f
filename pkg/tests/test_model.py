import math

import numpy as np
import pytest

from caflow.errors import ConfigError, ContractError, FormatError
from caflow.model import (CaFlowModel, LossBreakdown, ModelConfig, load_checkpoint,
                          save_checkpoint, total_loss)

from helpers import check_gradients


def tiny_config(**kw):
    base = dict(M=4, D=6, width=8, heads=2, n_queries=2, head_hidden=8, key_dim=4,
                flow_key_dim=4, time_hidden=4, flow_steps=2, dtype="float64")
    return ModelConfig(**{**base, **kw})


def rngs(seed):
    g = np.random.SeedSequence(seed).spawn(3)
    return {"dropout": np.random.default_rng(g[0]), "gumbel": np.random.default_rng(g[1]),
            "pairing": np.random.default_rng(g[2])}


# -- numpy replay ------------------------------------------------------------------

def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def lin(mod, x):
    out = x @ mod.weight.data
    return out + mod.bias.data if mod.has_bias else out


def replay_encoder(enc, clips):
    x = lin(enc.embed, clips)
    B, M, W = x.shape
    h = enc.heads

    def split(z):
        return z.reshape(B, M, h, W // h).transpose(0, 2, 1, 3)

    q, k, v = split(lin(enc.query, x)), split(lin(enc.key, x)), split(lin(enc.value, x))
    att = softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(W // h))
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, M, W)
    x = layer_norm(x + lin(enc.proj, ctx), enc.ln1_gain.data, enc.ln1_bias.data)
    ff = lin(enc.ffn_out, np.maximum(lin(enc.ffn_in, x), 0))
    return layer_norm(x + ff, enc.ln2_gain.data, enc.ln2_bias.data)


def replay_predictor(p, X, Q, s):
    att = softmax(X @ p.w_query.data @ np.swapaxes(Q @ p.w_key.data, -1, -2) / math.sqrt(p.key_dim))
    hidden = np.tanh(att @ (Q @ p.w_value.data) + X @ p.w_skip.data + s * p.w_time.data + p.bias.data)
    return lin(p.out, hidden)


def replay_time(emb, s):
    return lin(emb.outer, np.tanh(lin(emb.inner, np.array([[s]]))))[0]


def replay_forward(model, clips):
    enc = replay_encoder(model.encoder, clips)
    tokens = enc
    if model.config.use_bit:
        flow = model.bitflow
        Q = model.queries.data + enc.mean(axis=1, keepdims=True)
        K = model.config.flow_steps
        for k in range(K):
            s = k / K
            e = replay_time(flow.time, s)
            Xt, Qt = tokens + e, Q + e
            tokens = tokens + s * replay_predictor(flow.forward, Xt, Qt, s) \
                + (1 - s) * replay_predictor(flow.backward, Xt, Qt, 1 - s)
    tokens = layer_norm(tokens, model.out_gain.data, model.out_bias.data)
    h = np.maximum(lin(model.head_hidden, tokens.mean(axis=1)), 0)
    return lin(model.head_out, h)[:, 0]


# -- forward ------------------------------------------------------------------------

def test_zero_head_gives_bias():
    model = CaFlowModel(tiny_config())
    model.head_out.weight.data[:] = 0
    X = np.random.default_rng(0).normal(size=(3, 4, 6))
    np.testing.assert_array_equal(model.forward(X).score.data, [0.5, 0.5, 0.5])


def test_eval_is_deterministic():
    model = CaFlowModel(tiny_config(flow_zero_init=False))
    X = np.random.default_rng(1).normal(size=(2, 4, 6))
    a, b = model.forward(X).score.data, model.forward(X).score.data
    assert a.tobytes() == b.tobytes()
    m1, m2 = model.masks(X, 0.5), model.masks(X, 0.5)
    assert m1.tobytes() == m2.tobytes()


@pytest.mark.parametrize("use_bit", [True, False])
def test_forward_matches_replay(use_bit):
    model = CaFlowModel(tiny_config(flow_zero_init=False, use_bit=use_bit), seed=3)
    X = np.random.default_rng(2).normal(size=(2, 4, 6))
    np.testing.assert_allclose(model.forward(X).score.data, replay_forward(model, X), atol=1e-12)


def test_input_shape_contract():
    model = CaFlowModel(tiny_config())
    with pytest.raises(ContractError, match=r"\(B, 4, 6\)"):
        model.forward(np.zeros((2, 5, 6)))
    with pytest.raises(ContractError):
        model.forward(np.zeros((2, 4, 6)), mode="test")
    with pytest.raises(ContractError):
        model.forward(np.zeros((2, 4, 6)), mode="train")


def test_config_validation():
    for bad in ({"width": 10, "heads": 4}, {"margin": -1.0}, {"dropout": 1.0}, {"ccr_distance": "cos"},
                {"ccr_reduction": "max"}, {"dtype": "float16"}, {"flow_steps": 0}):
        with pytest.raises(ConfigError):
            CaFlowModel(ModelConfig(**bad))


def test_predict_denormalises():
    model = CaFlowModel(tiny_config())
    model.head_out.weight.data[:] = 0
    np.testing.assert_allclose(model.predict(np.zeros((3, 4, 6)), 10.0, 30.0), 20.0)


# -- losses -------------------------------------------------------------------------

def batch(seed, B=2, cfg=None):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(B, cfg.M if cfg else 4, cfg.D if cfg else 6)), rng.random(B)


def test_zero_lambdas_give_regression():
    model = CaFlowModel(tiny_config())
    X, y = batch(0)
    loss, parts = total_loss(model, X, y, 0.0, 0.0, rngs(0))
    assert parts.ccr == 0.0 and parts.bit == 0.0
    assert loss.item() == parts.regression == parts.total


def test_perfect_predictions_isolate_ccr():
    model = CaFlowModel(tiny_config(use_bit=False, dropout=0.0))
    X, _ = batch(1)
    y = model.forward(X).score.data
    loss, parts = total_loss(model, X, y, 0.02, 0.5, rngs(1))
    assert parts.regression == 0.0 and parts.bit == 0.0
    assert parts.total == pytest.approx(0.02 * parts.ccr, abs=1e-15)


def test_breakdown_composition_is_exact():
    parts = LossBreakdown.compose(1.0, 2.0, 3.0, 0.02, 0.5)
    assert parts.total == pytest.approx(2.54, abs=1e-15)
    assert parts.total == parts.regression + parts.lambda1 * parts.ccr + parts.lambda2 * parts.bit
    model = CaFlowModel(tiny_config(flow_zero_init=False))
    X, y = batch(2, B=3)
    loss, parts = total_loss(model, X, y, 0.02, 0.5, rngs(2))
    assert parts.total == parts.regression + 0.02 * parts.ccr + 0.5 * parts.bit
    assert min(parts.regression, parts.ccr, parts.bit) >= 0


def test_batch_of_one_names_pairing():
    model = CaFlowModel(tiny_config())
    X, y = batch(3, B=1)
    with pytest.raises(ContractError, match="pair"):
        total_loss(model, X, y, 0.02, 0.5, rngs(3))
    total_loss(model, X, y, 0.0, 0.5, rngs(3))


@pytest.mark.parametrize("distance, reduction", [("pooled", "mean"), ("tokens", "sum")])
def test_end_to_end_gradients(distance, reduction):
    checked = 0
    for seed in range(20):
        # no stop-gradients anywhere, so finite differences see the same function
        cfg = tiny_config(flow_zero_init=False, flow_target_grad=True, flow_input_grad=True,
                          ccr_distance=distance, ccr_reduction=reduction)
        model = CaFlowModel(cfg, seed=seed)
        X, y = batch(100 + seed)
        model.bitflow.set_anchor(model.encode(X).data + 0.1)
        fn = lambda: total_loss(model, X, y, 0.7, 0.5, rngs(seed), tau=0.8)[0]
        checked += check_gradients(fn, model.parameters(), np.random.default_rng(seed), entries=1)
    assert checked >= 18, f"only {checked} smooth points"


def test_ablation_variants_from_one_config():
    X, y = batch(4, B=3)
    for use_ccr, use_bit in ((False, False), (True, False), (False, True), (True, True)):
        model = CaFlowModel(tiny_config(use_ccr=use_ccr, use_bit=use_bit))
        _, parts = total_loss(model, X, y, 0.02, 0.5, rngs(4))
        assert (parts.ccr > 0) == use_ccr
        assert (parts.bit > 0) == use_bit


def test_variants_share_initial_weights():
    a = CaFlowModel(tiny_config(use_ccr=False, use_bit=False)).state_dict()
    b = CaFlowModel(tiny_config()).state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_separation_mask_in_unit_interval():
    model = CaFlowModel(tiny_config())
    X, _ = batch(5, B=3)
    out = model.forward(X, with_flow_loss=False)
    sep = model.separation(X, out.tokens, 0.5, rng=np.random.default_rng(0))
    assert np.all((sep.mask.data >= 0) & (sep.mask.data <= 1))
    np.testing.assert_allclose(sep.causal.data + sep.confound.data, X, atol=1e-12)


# -- checkpoints --------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    model = CaFlowModel(tiny_config(flow_zero_init=False), seed=9)
    X, _ = batch(6, B=4)
    save_checkpoint(model, tmp_path / "a.ckpt")
    back, meta = load_checkpoint(tmp_path / "a.ckpt", expected_hash=model.config.hash())
    assert back.forward(X).score.data.tobytes() == model.forward(X).score.data.tobytes()
    assert meta["config_hash"] == model.config.hash()
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_hash_mismatch(tmp_path):
    model = CaFlowModel(tiny_config())
    save_checkpoint(model, tmp_path / "a.ckpt")
    with pytest.raises(ConfigError, match="does not match"):
        load_checkpoint(tmp_path / "a.ckpt", expected_hash=tiny_config(width=16).hash())


def test_bad_checkpoint_file(tmp_path):
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "junk.ckpt")
