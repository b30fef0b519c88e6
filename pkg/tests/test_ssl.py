import math

import numpy as np
import pytest
import torch
from sklearn.base import clone

from melrvq.dsp import MelSpectrogram
from melrvq.errors import ChecksumError, DomainError, NoMaskedFramesError, ShapeError
from melrvq.ssl import (
    MaskConfig,
    MaskedTokenPredictor,
    ModelConfig,
    OptimConfig,
    SslToyModel,
    apply_mask,
    extract_latents,
    forward,
    latents_per_clip,
    mlm_loss,
    model_bytes,
    model_from_bytes,
    pretrain,
)
from melrvq.train import QuantizerConfig, freeze_random

SMALL = ModelConfig(input_dim=12, n_layers=2, d_hidden=16, n_heads=4, n_stages=3, codebook_size=10)


def small_model(seed=0, cfg=SMALL):
    torch.manual_seed(seed)
    return SslToyModel(cfg)


# --- masking --------------------------------------------------------------------------

def test_mask_prob_zero():
    frames = np.random.default_rng(0).standard_normal((50, 4))
    out, mask = apply_mask(frames, MaskConfig(mask_prob=0.0))
    assert not mask.any()
    assert np.array_equal(out, frames)


def test_mask_prob_one():
    _, mask = apply_mask(np.zeros((53, 4)), MaskConfig(mask_prob=1.0))
    assert mask.all()


def test_mask_fraction_monte_carlo():
    fractions = [apply_mask(np.zeros((750, 2)), MaskConfig(0.6, seed=s))[1].mean() for s in range(200)]
    assert 0.55 <= np.mean(fractions) <= 0.65


def test_mask_spans_and_determinism():
    a = apply_mask(np.ones((300, 3)), MaskConfig(0.3, span_frames=10, seed=4))
    b = apply_mask(np.ones((300, 3)), MaskConfig(0.3, span_frames=10, seed=4))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    runs = np.diff(np.flatnonzero(np.diff(np.r_[0, a[1].astype(int), 0])))[::2]
    assert runs.min() >= 10


def test_gaussian_fill_uses_given_statistics():
    from melrvq.dsp import InputStats
    stats = InputStats(np.full(3, 100.0), np.full(3, 0.01))
    out, mask = apply_mask(np.zeros((400, 3)), MaskConfig(0.5, seed=1), stats)
    assert np.all(np.abs(out[mask] - 100.0) < 0.1)
    assert not out[~mask].any()


def test_learned_embedding_fill_zeroes():
    out, mask = apply_mask(np.ones((100, 3)), MaskConfig(0.5, noise="learned_embedding"))
    assert not out[mask].any() and out[~mask].all()


# --- forward ---------------------------------------------------------------------------

def test_zero_heads_give_uniform_softmax():
    model = small_model()
    for head in model.heads:
        torch.nn.init.zeros_(head.weight)
        torch.nn.init.zeros_(head.bias)
    logits, _ = forward(model, np.random.default_rng(1).standard_normal((9, 12)))
    assert not logits.any()
    probs = torch.softmax(torch.tensor(logits), -1)
    assert torch.allclose(probs, torch.full_like(probs, 0.1))


def test_pointwise_model_on_duplicated_frame():
    model = small_model(cfg=ModelConfig(12, 0, 16, 4, n_stages=3, codebook_size=10))
    frame = np.random.default_rng(2).standard_normal(12)
    logits, latents = forward(model, np.tile(frame, (7, 1)))
    assert len(latents) == 1
    assert np.all(logits == logits[0])


def numpy_forward(model, x):
    """Independent transcription of the encoder in float64 numpy."""
    sd = {k: v.detach().double().numpy() for k, v in model.state_dict().items()}
    cfg = model.cfg

    def ln(h, p):
        mu = h.mean(-1, keepdims=True)
        var = ((h - mu) ** 2).mean(-1, keepdims=True)
        return (h - mu) / np.sqrt(var + 1e-5) * sd[p + ".weight"] + sd[p + ".bias"]

    def lin(h, p):
        return h @ sd[p + ".weight"].T + sd[p + ".bias"]

    def gelu(h):
        return 0.5 * h * (1 + np.vectorize(math.erf)(h / math.sqrt(2)))

    x = (x - sd["input_mean"]) / sd["input_std"]
    h = lin(x, "input_proj")
    t, d = h.shape
    hd = d // cfg.n_heads
    dist = np.abs(np.arange(t)[:, None] - np.arange(t)[None, :])
    for b in range(cfg.n_layers):
        p = f"blocks.{b}"
        qkv = lin(ln(h, p + ".norm1"), p + ".attn.qkv")
        heads = []
        for a in range(cfg.n_heads):
            q = qkv[:, a * hd:(a + 1) * hd]
            k = qkv[:, d + a * hd:d + (a + 1) * hd]
            v = qkv[:, 2 * d + a * hd:2 * d + (a + 1) * hd]
            s = q @ k.T / math.sqrt(hd) - 2.0 ** (-8.0 * (a + 1) / cfg.n_heads) * dist
            w = np.exp(s - s.max(1, keepdims=True))
            heads.append((w / w.sum(1, keepdims=True)) @ v)
        h = h + lin(np.concatenate(heads, 1), p + ".attn.out")
        f = ln(h, p + ".norm2")
        h = h + lin(gelu(lin(f, p + ".ff.0")), p + ".ff.2")
    h = ln(h, "final_norm")
    return np.stack([lin(h, f"heads.{n}") for n in range(cfg.n_stages)], 1)


def test_forward_matches_numpy_transcription():
    model = small_model(3)
    x = np.random.default_rng(3).standard_normal((16, 12))
    logits, _ = forward(model, x)
    np.testing.assert_allclose(logits, numpy_forward(model, x), rtol=0, atol=1e-5)


def test_forward_shape_errors():
    with pytest.raises(ShapeError):
        forward(small_model(), np.zeros((5, 11)))


def test_zeroing_a_head_leaves_the_others():
    model = small_model(4)
    x = np.random.default_rng(4).standard_normal((20, 12))
    before, _ = forward(model, x)
    with torch.no_grad():
        model.heads[1].weight.zero_()
        model.heads[1].bias.zero_()
    after, _ = forward(model, x)
    assert np.array_equal(before[:, [0, 2]], after[:, [0, 2]])
    assert not after[:, 1].any()


# --- loss -------------------------------------------------------------------------------

@pytest.mark.parametrize("t,n,k", [(5, 1, 2), (30, 4, 64), (7, 8, 1024)])
def test_uniform_logits_give_log_k(t, n, k):
    tok = np.random.default_rng(k).integers(0, k, (t, n))
    mask = np.zeros(t, dtype=bool)
    mask[::2] = True
    assert mlm_loss(np.zeros((t, n, k)), tok, mask) == pytest.approx(math.log(k), abs=1e-12)


def test_confident_correct_logits_saturate():
    tok = np.array([[1, 0], [2, 2]])
    mask = np.array([True, True])
    prev = math.inf
    for margin in (1.0, 5.0, 20.0, 60.0):
        logits = np.zeros((2, 2, 3))
        for t in range(2):
            for n in range(2):
                logits[t, n, tok[t, n]] = margin
        loss = mlm_loss(logits, tok, mask)
        assert loss < prev
        prev = loss
    assert prev < 1e-20


def test_loss_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((11, 3, 7)) * 3
    tok = rng.integers(0, 7, (11, 3))
    mask = rng.random(11) < 0.5
    mask[0] = True
    total, count = 0.0, 0
    for t in range(11):
        if not mask[t]:
            continue
        for n in range(3):
            z = logits[t, n]
            total += -(z[tok[t, n]] - math.log(sum(math.exp(v) for v in z)))
            count += 1
    assert abs(mlm_loss(logits, tok, mask) - total / count) <= 1e-8


def test_loss_needs_masked_frames():
    with pytest.raises(NoMaskedFramesError):
        mlm_loss(np.zeros((3, 1, 2)), np.zeros((3, 1), dtype=int), np.zeros(3, dtype=bool))
    with pytest.raises(ShapeError):
        mlm_loss(np.zeros((3, 1, 2)), np.zeros((4, 1), dtype=int), np.ones(4, dtype=bool))


def test_loss_ignores_unmasked_logits():
    rng = np.random.default_rng(6)
    logits = rng.standard_normal((10, 2, 5))
    tok = rng.integers(0, 5, (10, 2))
    mask = np.arange(10) % 3 == 0
    changed = logits.copy()
    changed[~mask] = rng.standard_normal(changed[~mask].shape) * 100
    assert mlm_loss(logits, tok, mask) == mlm_loss(changed, tok, mask)


def test_pointwise_model_ignores_unmasked_inputs():
    model = small_model(7, ModelConfig(12, 0, 16, 4, n_stages=2, codebook_size=10))
    rng = np.random.default_rng(7)
    x = rng.standard_normal((12, 12))
    tok = rng.integers(0, 10, (12, 2))
    mask = np.arange(12) < 5
    base = mlm_loss(forward(model, x)[0], tok, mask)
    x[8] += 50.0
    assert mlm_loss(forward(model, x)[0], tok, mask) == base


# --- training plumbing -------------------------------------------------------------------

def tiny_corpus(n=3, t=40, m=12, seed=0):
    rng = np.random.default_rng(seed)
    return [MelSpectrogram(rng.standard_normal((t, m)), 25.0) for _ in range(n)]


def test_zero_step_pretrain_returns_initial_model():
    corpus = tiny_corpus()
    rvq = freeze_random(QuantizerConfig(2, 8, 4), 12, seed=0)
    cfg = ModelConfig(12, 1, 16, 4)
    model, report = pretrain(corpus, rvq, cfg, MaskConfig(), OptimConfig(steps=0, holdout_clips=1, seed=3))
    torch.manual_seed(3)
    fresh = SslToyModel(model.cfg)
    for (name, a), (_, b) in zip(model.state_dict().items(), fresh.state_dict().items()):
        if not name.startswith("input_"):
            assert torch.equal(a, b), name
    assert report.loss == []
    assert len(report.heldout_accuracy) == 2


def test_short_pretrain_runs_and_is_deterministic():
    corpus = tiny_corpus()
    rvq = freeze_random(QuantizerConfig(2, 8, 4), 12, seed=0)
    opt = OptimConfig(steps=5, batch_size=2, crop_frames=20, holdout_clips=1, seed=1)
    a = pretrain(corpus, rvq, ModelConfig(12, 1, 16, 4), MaskConfig(), opt)[1]
    b = pretrain(corpus, rvq, ModelConfig(12, 1, 16, 4), MaskConfig(), opt)[1]
    assert a.loss == b.loss and len(a.loss) == 5


def test_latent_quantizer_needs_features():
    rvq = freeze_random(QuantizerConfig(1, 8, 4), 12, seed=0, source="latent")
    with pytest.raises(DomainError):
        pretrain(tiny_corpus(), rvq, ModelConfig(12, 1, 16, 4), MaskConfig(), OptimConfig(steps=0))


def test_layer_zero_is_input_projection():
    model = small_model(8)
    spec = tiny_corpus(1)[0]
    lat = extract_latents(model, [spec], 0)
    with torch.no_grad():
        proj = model.input_proj(model.standardize(torch.tensor(spec.frames, dtype=torch.float32))).numpy()
    np.testing.assert_allclose(lat, proj, atol=1e-6)


def test_latent_concatenation_and_rows():
    model = small_model(9)
    corpus = tiny_corpus(2, t=750)
    lat = extract_latents(model, corpus, 2)
    assert lat.shape == (1500, 16)
    _, stack = forward(model, corpus[1])
    np.testing.assert_array_equal(lat[750:], stack[2])
    assert len(latents_per_clip(model, corpus, 1)) == 2
    with pytest.raises(DomainError):
        extract_latents(model, corpus, 3)


def test_model_checkpoint_round_trip():
    model = small_model(10)
    blob = model_bytes(model)
    again = model_from_bytes(blob)
    assert model_bytes(again) == blob
    x = np.random.default_rng(10).standard_normal((6, 12))
    assert np.array_equal(forward(model, x)[0], forward(again, x)[0])
    bad = bytearray(blob)
    bad[len(bad) // 3] ^= 0x04
    with pytest.raises(ChecksumError):
        model_from_bytes(bytes(bad))


def test_predictor_estimator():
    corpus = tiny_corpus(2, t=60)
    rng = np.random.default_rng(11)
    tokens = [rng.integers(0, 6, (60, 2)) for _ in corpus]
    est = MaskedTokenPredictor(n_layers=1, d_hidden=16, steps=3, batch_size=2, crop_frames=30)
    assert clone(est).get_params() == est.get_params()
    est.fit(corpus, tokens)
    pred = est.predict(corpus)
    assert pred[0].shape == (60, 2)
    assert 0.0 <= est.score(corpus, tokens) <= 1.0
