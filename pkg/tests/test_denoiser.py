import math

import numpy as np
import pytest

from splitlora import autodiff as ad
from splitlora.autodiff import Tensor
from splitlora.base_model import (
    PretrainRecipe,
    config_hash,
    load_base,
    pretraining_pairs,
    routed_prompt_words,
)
from splitlora.denoiser import (
    STYLE_TRIGGER,
    SUBJECT_TRIGGER,
    DenoiserConfig,
    DenoiserWeights,
    PromptTriple,
    TokenVocabulary,
    base_kv_provider,
    cross_attention,
    ddim_sample,
    ddim_timesteps,
    embed_prompt,
    lora_layer_ids,
    noise_schedule,
    predict_noise,
    prompt_words,
    q_sample,
    to_ppm,
)
from splitlora.synthworld import SynthSpec

from helpers import central_diff, grad_mismatch


@pytest.fixture
def vocab():
    return TokenVocabulary.build(["cross", "ember"], d_txt=16, seed=7)


# --------------------------------------------------------------------------- vocabulary and prompts


def test_embed_prompt_shapes(vocab):
    assert embed_prompt(vocab, []).shape == (0, 16)
    assert embed_prompt(vocab, vocab.ids(prompt_words())).shape == (5, 16)
    x_c, x_s = PromptTriple.trigger_only(vocab)
    assert x_c.shape == (1, 16) and x_s.shape == (1, 16)
    assert prompt_words() == ["a", SUBJECT_TRIGGER, "in", STYLE_TRIGGER, "style"]


def test_embed_prompt_is_deterministic(vocab):
    again = TokenVocabulary.build(["cross", "ember"], d_txt=16, seed=7)
    ids = vocab.ids(prompt_words("cross", "ember"))
    np.testing.assert_array_equal(embed_prompt(vocab, ids), embed_prompt(again, ids))
    other = TokenVocabulary.build(["cross", "ember"], d_txt=16, seed=8)
    assert not np.array_equal(vocab.embeddings, other.embeddings)


def test_unknown_tokens_rejected(vocab):
    with pytest.raises(KeyError):
        embed_prompt(vocab, [len(vocab.words)])
    with pytest.raises(KeyError):
        vocab.ids(["zebra"])


def test_vocabulary_rows_orthogonal_and_frozen(vocab):
    E = vocab.embeddings
    np.testing.assert_allclose(E @ E.T, 16.0 * np.eye(len(vocab.words)), atol=1e-12)
    with pytest.raises(ValueError):
        E[0, 0] = 1.0
    with pytest.raises(ValueError):
        TokenVocabulary.build([f"w{i}" for i in range(12)], d_txt=16, seed=0)


def test_prompt_triple_pads_triggers(vocab):
    p = PromptTriple.build(vocab)
    assert p.combined.shape == p.subject.shape == p.style.shape == (5, 16)
    np.testing.assert_array_equal(p.subject[1], p.combined[1])
    np.testing.assert_array_equal(p.style[3], p.combined[3])
    assert not p.subject[[0, 2, 3, 4]].any() and not p.style[[0, 1, 2, 4]].any()


# --------------------------------------------------------------------------- attention and forward


def _one_block(seed=0, **kw):
    cfg = DenoiserConfig(blocks=("b0",), **kw)
    return cfg, DenoiserWeights.init(cfg, seed)


def test_cross_attention_zero_values_is_identity():
    cfg, w = _one_block()
    h = Tensor(np.random.default_rng(0).standard_normal((1, 64, 32)))
    K = Tensor(np.random.default_rng(1).standard_normal((5, 32)))
    out = cross_attention(w, "b0", h, K, Tensor(np.zeros((5, 32))))
    np.testing.assert_array_equal(out.data, h.data)


def test_cross_attention_single_token_weights_are_one():
    cfg, w = _one_block()
    rng = np.random.default_rng(2)
    h = Tensor(rng.standard_normal((64, 32)))
    K, V = Tensor(rng.standard_normal((1, 32))), Tensor(rng.standard_normal((1, 32)))
    out = cross_attention(w, "b0", h, K, V)
    expected = h.data + (V.data @ w["b0.W_out"].data)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_cross_attention_two_tokens_matches_reference():
    cfg, w = _one_block()
    rng = np.random.default_rng(3)
    h = rng.standard_normal((64, 32))
    K, V = rng.standard_normal((2, 32)), rng.standard_normal((2, 32))
    hn = h / np.sqrt((h**2).mean(axis=1, keepdims=True) + 1e-6)
    q = hn @ w["b0.W_q"].data
    ref = np.empty_like(h)
    for i in range(64):
        s = np.array([q[i] @ K[j] for j in range(2)]) / math.sqrt(32)
        p = np.exp(s - s.max())
        p /= p.sum()
        ref[i] = h[i] + (p[0] * V[0] + p[1] * V[1]) @ w["b0.W_out"].data
    out = cross_attention(w, "b0", Tensor(h), Tensor(K), Tensor(V))
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_cross_attention_token_mismatch():
    cfg, w = _one_block()
    with pytest.raises(ad.ShapeError):
        cross_attention(w, "b0", Tensor(np.ones((64, 32))), Tensor(np.ones((2, 32))), Tensor(np.ones((3, 32))))


def test_predict_noise_shape_determinism_and_range(vocab):
    cfg, w = _one_block()
    x = embed_prompt(vocab, vocab.ids(prompt_words()))
    z = np.random.default_rng(4).standard_normal((8, 8, 4))
    a = predict_noise(w, base_kv_provider(w, x), z, 10)
    b = predict_noise(w, base_kv_provider(w, x), z, 10)
    assert a.shape == z.shape
    assert a.data.tobytes() == b.data.tobytes()
    for bad in (0, cfg.T + 1):
        with pytest.raises(ValueError):
            predict_noise(w, base_kv_provider(w, x), z, bad)


def test_predict_noise_zero_weights_give_zero(vocab):
    cfg, w = _one_block()
    for name in w.names():
        if name != "out_proj":
            w.params[name] = Tensor(np.zeros(w[name].shape))
    x = embed_prompt(vocab, vocab.ids(prompt_words()))
    out = predict_noise(w, base_kv_provider(w, x), np.ones((8, 8, 4)), 5)
    np.testing.assert_array_equal(out.data, 0.0)


def test_zero_attention_output_makes_prompt_irrelevant(vocab):
    cfg = DenoiserConfig()
    w = DenoiserWeights.init(cfg, 0)
    for b in cfg.blocks:
        w.params[f"{b}.W_out"] = Tensor(np.zeros((32, 32)))
    z = np.random.default_rng(5).standard_normal((8, 8, 4))
    x1 = embed_prompt(vocab, vocab.ids(prompt_words()))
    x2 = embed_prompt(vocab, vocab.ids(prompt_words("cross", "ember")))
    a = predict_noise(w, base_kv_provider(w, x1), z, 30).data
    b = predict_noise(w, base_kv_provider(w, x2), z, 30).data
    np.testing.assert_array_equal(a, b)


def test_batched_forward_matches_per_sample(vocab):
    cfg, w = _one_block()
    x = embed_prompt(vocab, vocab.ids(prompt_words()))
    z = np.random.default_rng(6).standard_normal((3, 8, 8, 4))
    t = np.array([1, 50, 100])
    batched = predict_noise(w, base_kv_provider(w, x), z, t).data
    for i in range(3):
        single = predict_noise(w, base_kv_provider(w, x), z[i], int(t[i])).data
        np.testing.assert_allclose(batched[i], single, atol=1e-12)


def test_small_model_gradients_match_central_differences(tiny_config, tiny_weights):
    w = tiny_weights
    w.set_trainable(True)
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((3, tiny_config.d_txt)))
    z = rng.standard_normal((2,) + tiny_config.latent_shape)
    eps = rng.standard_normal(z.shape)
    t = np.array([2, 9])

    def loss():
        return ad.mse(predict_noise(w, base_kv_provider(w, x), z, t), Tensor(eps))

    with ad.Tape() as tape:
        grads = tape.backward(loss())
    for name in w.names():
        p = w[name]
        assert grad_mismatch(grads[p], central_diff(lambda: loss().item(), p)) == 0, name


def test_lora_layers_are_key_and_value_of_each_block():
    ids = lora_layer_ids(DenoiserConfig())
    assert len(ids) == 14 and ids[:2] == ["down0.K", "down0.V"]


# --------------------------------------------------------------------------- schedule and sampler


def test_schedule_values():
    s = noise_schedule(100)
    assert s.alpha_bars[0] == pytest.approx(0.9999, abs=1e-15)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
    running = 1.0
    for t in range(100):
        running *= 1.0 - (1e-4 + t * (0.02 - 1e-4) / 99)
    assert abs(s.alpha_bars[-1] - running) < 1e-12
    with pytest.raises(ValueError):
        noise_schedule(1)


def test_q_sample_endpoints():
    s = noise_schedule(100)
    x0, eps = np.ones((8, 8, 4)), np.full((8, 8, 4), 2.0)
    np.testing.assert_allclose(q_sample(s, x0, 0, eps), x0)
    ab = s.alpha_bars[9]
    np.testing.assert_allclose(q_sample(s, x0, 10, eps), math.sqrt(ab) + 2 * math.sqrt(1 - ab))


def test_ddim_timesteps():
    assert ddim_timesteps(100, 50) == list(range(100, 0, -2))
    assert ddim_timesteps(100, 100) == list(range(100, 0, -1))
    ts = ddim_timesteps(100, 30)
    assert ts[0] == 100 and ts[-1] == 1 and len(ts) == 30 and ts == sorted(ts, reverse=True)
    assert ddim_timesteps(100, 1000) == list(range(100, 0, -1))


def test_ddim_sampler_determinism(vocab):
    cfg, w = _one_block()
    prov = base_kv_provider(w, embed_prompt(vocab, vocab.ids(prompt_words())))
    a = ddim_sample(w, prov, steps=10, seed=3)
    b = ddim_sample(w, prov, steps=10, seed=3)
    c = ddim_sample(w, prov, steps=10, seed=4)
    assert a.shape == (8, 8, 4)
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()
    full = ddim_sample(w, prov, steps=cfg.T, seed=3)
    assert full.tobytes() == ddim_sample(w, prov, steps=cfg.T, seed=3).tobytes()


def test_ppm_export():
    img = np.zeros((8, 8, 4))
    img[0, 0, :3] = [-2.0, 2.0, 5.0]
    data = to_ppm(img)
    header = b"P6\n8 8\n255\n"
    assert data.startswith(header) and len(data) == len(header) + 8 * 8 * 3
    assert list(data[len(header):len(header) + 3]) == [0, 255, 255]
    assert data[len(header) + 3] == 128


# --------------------------------------------------------------------------- base model


def test_routed_prompts():
    assert routed_prompt_words("up0_1", "cross", "ember") == prompt_words("cross", STYLE_TRIGGER)
    assert routed_prompt_words("up1_0", "cross", "ember") == prompt_words(SUBJECT_TRIGGER, "ember")
    assert routed_prompt_words("mid", "cross", "ember") == prompt_words("cross", "ember")
    for b in ("down0", "up0_0", "up1_1"):
        assert routed_prompt_words(b, SUBJECT_TRIGGER, STYLE_TRIGGER) == prompt_words()


def test_pretraining_pairs_cover_every_combination():
    spec = SynthSpec.default()
    pairs = pretraining_pairs(spec)
    assert len(pairs) == (len(spec.subjects) + 1) * (len(spec.styles) + 1)
    assert len({(s, t) for s, t, _ in pairs}) == len(pairs)


def test_config_hash_tracks_every_input():
    cfg, spec, rec = DenoiserConfig(), SynthSpec.default(), PretrainRecipe()
    h = config_hash(cfg, spec, rec)
    assert h == config_hash(DenoiserConfig(), SynthSpec.default(), PretrainRecipe())
    assert h != config_hash(DenoiserConfig(d_model=16), spec, rec)
    assert h != config_hash(cfg, SynthSpec.default(seed=1), rec)
    assert h != config_hash(cfg, spec, PretrainRecipe(steps=10))


def test_load_base_returns_independent_copies(base):
    other = load_base()
    other.weights.params["in_proj"] = Tensor(np.zeros((4, 32)))
    assert load_base().weights.to_bytes() == base.weights.to_bytes()
    assert base.config_hash == other.config_hash


def test_base_learned_the_pretraining_images(base):
    # each concept prompt should steer the base towards its rendering
    from splitlora.evaluate import sample_mode
    from splitlora.synthworld import classify

    spec = base.spec
    for subj, sty in (("cross", "ember"), ("ring", "frost")):
        imgs = sample_mode(None, base, "base", n_samples=4, seed=0, steps=20, subject_word=subj, style_word=sty)
        assert all(classify(im, spec) == (subj, sty) for im in imgs)
