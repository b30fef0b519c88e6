"""Desk-scale masked token prediction on Mel frames, with latent-target iteration.

The encoder is a small pre-norm transformer. Attention carries a fixed linear
distance penalty per head (ALiBi-style), so the model knows frame order without
anything being added to the input projection; layer 0 of the latent stack is
exactly the projected input.
"""

import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn
from torch.nn import functional as F

from ._envelope import Reader, open_envelope, seal
from .dsp import InputStats, MelSpectrogram
from .errors import DomainError, NoMaskedFramesError, ShapeError, TrainingDivergenceError
from .rvq import TokenSequence, encode
from .train import QuantizerConfig, TrainConfig, train

MTOY_MAGIC = b"MTOY"
MTOY_VERSION = 1


def set_threads():
    threads = os.environ.get("MELRVQ_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))


@dataclass(frozen=True)
class MaskConfig:
    mask_prob: float = 0.6
    span_frames: int = 10
    noise: str = "gaussian"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise DomainError("mask_prob must lie in [0, 1]")
        if self.span_frames < 1:
            raise DomainError("span_frames must be >= 1")
        if self.noise not in ("gaussian", "learned_embedding"):
            raise DomainError(f"unknown noise {self.noise!r}")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 128
    n_layers: int = 4
    d_hidden: int = 192
    n_heads: int = 4
    ff_mult: int = 4
    n_stages: int = 8
    codebook_size: int = 1024
    learned_mask: bool = False

    def __post_init__(self):
        if self.d_hidden % self.n_heads:
            raise DomainError("d_hidden must be divisible by n_heads")
        if min(self.input_dim, self.d_hidden, self.n_heads, self.n_stages, self.codebook_size) < 1:
            raise DomainError("model dimensions must be positive")
        if self.n_layers < 0:
            raise DomainError("n_layers must be >= 0")


@dataclass(frozen=True)
class OptimConfig:
    steps: int = 600
    batch_size: int = 8
    crop_frames: int = 250
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    warmup_steps: int = 50
    holdout_clips: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.crop_frames < 1:
            raise DomainError("need steps >= 0, batch_size >= 1, crop_frames >= 1")
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be positive")


@dataclass
class PretrainReport:
    loss: list = field(default_factory=list)
    heldout_accuracy: list = field(default_factory=list)
    chance: float = 0.0
    wall_clock_s: float = 0.0

    def summary(self):
        return {
            "steps": len(self.loss),
            "initial_loss": self.loss[0] if self.loss else None,
            "final_loss": self.loss[-1] if self.loss else None,
            "heldout_accuracy": list(self.heldout_accuracy),
            "chance": self.chance,
            "wall_clock_s": self.wall_clock_s,
        }


def span_mask(n_frames, cfg, rng):
    """Boolean mask built from contiguous spans until at least ``mask_prob`` of frames are covered.

    Span starts are drawn without replacement, so ``mask_prob=1`` always ends
    fully masked and ``mask_prob=0`` never masks.
    """
    mask = np.zeros(n_frames, dtype=bool)
    if n_frames == 0 or cfg.mask_prob == 0:
        return mask
    span = min(cfg.span_frames, n_frames)
    need = math.ceil(cfg.mask_prob * n_frames)
    starts = rng.permutation(n_frames - span + 1)
    covered = 0
    for s in starts:
        if covered >= need:
            break
        covered += int((~mask[s:s + span]).sum())
        mask[s:s + span] = True
    return mask


def apply_mask(spec, cfg, stats=None, rng=None):
    """Replace masked frames with noise; returns (masked frames, mask).

    Gaussian noise follows ``stats`` (per-bin mean/std, defaulting to the
    spectrogram's own); ``learned_embedding`` zeroes the masked frames and
    leaves the substitution to the model.
    """
    frames = spec.frames if isinstance(spec, MelSpectrogram) else np.asarray(spec, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    mask = span_mask(frames.shape[0], cfg, rng)
    out = frames.copy()
    if cfg.noise == "gaussian" and mask.any():
        stats = stats if stats is not None else InputStats.fit(frames)
        out[mask] = stats.mean + stats.std * rng.standard_normal((int(mask.sum()), frames.shape[1]))
    elif cfg.noise == "learned_embedding":
        out[mask] = 0.0
    return out, mask


def alibi_slopes(n_heads):
    return torch.tensor([2.0 ** (-8.0 * (h + 1) / n_heads) for h in range(n_heads)], dtype=torch.float32)


class SelfAttention(nn.Module):
    def __init__(self, d, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.register_buffer("slopes", alibi_slopes(n_heads), persistent=False)

    def forward(self, x):
        b, t, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(b, t, 3, h, d // h).permute(2, 0, 3, 1, 4)
        pos = torch.arange(t, device=x.device)
        bias = -self.slopes[:, None, None] * (pos[None, :] - pos[:, None]).abs()[None]
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h) + bias, dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    def __init__(self, d, n_heads, ff_mult):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, n_heads)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ff_mult * d), nn.GELU(), nn.Linear(ff_mult * d, d))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


class SslToyModel(nn.Module):
    def __init__(self, cfg, input_stats=None):
        super().__init__()
        self.cfg = cfg
        stats = input_stats or InputStats.identity(cfg.input_dim)
        self.register_buffer("input_mean", torch.tensor(stats.mean, dtype=torch.float32))
        self.register_buffer("input_std", torch.tensor(stats.std, dtype=torch.float32))
        self.mask_embedding = nn.Parameter(torch.zeros(cfg.input_dim))
        self.input_proj = nn.Linear(cfg.input_dim, cfg.d_hidden)
        self.blocks = nn.ModuleList(Block(cfg.d_hidden, cfg.n_heads, cfg.ff_mult) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.d_hidden)
        self.heads = nn.ModuleList(nn.Linear(cfg.d_hidden, cfg.codebook_size) for _ in range(cfg.n_stages))

    @property
    def input_stats(self):
        return InputStats(self.input_mean.double().numpy(), self.input_std.double().numpy())

    def standardize(self, frames):
        return (frames - self.input_mean) / self.input_std

    def forward(self, x, mask=None):
        """``x``: standardized (B, T, M). Returns logits (B, T, N, K) and L + 1 latents (B, T, d_h)."""
        if mask is not None and self.cfg.learned_mask:
            x = torch.where(mask[..., None], self.mask_embedding.expand_as(x), x)
        h = self.input_proj(x)
        latents = [h]
        for block in self.blocks:
            h = block(h)
            latents.append(h)
        h = self.final_norm(h)
        logits = torch.stack([head(h) for head in self.heads], dim=2)
        return logits, latents


def _as_frames(spec):
    frames = spec.frames if isinstance(spec, MelSpectrogram) else np.asarray(spec, dtype=np.float64)
    if frames.ndim != 2:
        raise ShapeError(f"expected T x M frames, got shape {frames.shape}")
    return frames


@torch.no_grad()
def forward(model, spec, mask=None):
    """Run one clip (raw Mel frames) through the model; numpy in, numpy out."""
    frames = _as_frames(spec)
    if frames.shape[1] != model.cfg.input_dim:
        raise ShapeError(f"model expects {model.cfg.input_dim} bins, got {frames.shape[1]}")
    model.eval()
    x = model.standardize(torch.tensor(frames, dtype=torch.float32))[None]
    m = None if mask is None else torch.as_tensor(np.asarray(mask, dtype=bool))[None]
    logits, latents = model(x, m)
    return logits[0].numpy(), [h[0].numpy() for h in latents]


def mlm_loss(logits, targets, mask):
    """Mean cross-entropy over masked frames and all heads.

    Accepts torch or numpy inputs with shapes (..., T, N, K), (..., T, N), (..., T).
    """
    numpy_in = not torch.is_tensor(logits)
    logits = torch.as_tensor(np.asarray(logits) if numpy_in else logits)
    tok = targets.tokens if isinstance(targets, TokenSequence) else targets
    tok = torch.as_tensor(np.asarray(tok) if not torch.is_tensor(tok) else tok, dtype=torch.long)
    mask = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask, dtype=torch.bool)
    if logits.shape[:-1] != tok.shape or tok.shape[:-1] != mask.shape:
        raise ShapeError(f"shape mismatch: logits {tuple(logits.shape)}, targets {tuple(tok.shape)}, "
                         f"mask {tuple(mask.shape)}")
    if not mask.any():
        raise NoMaskedFramesError("mask selects no frames")
    picked, picked_tok = logits[mask], tok[mask]
    loss = F.cross_entropy(picked.reshape(-1, picked.shape[-1]), picked_tok.reshape(-1))
    return float(loss) if numpy_in else loss


def _split(n_clips, cfg):
    held = min(cfg.holdout_clips, n_clips - 1) if n_clips > 1 else 0
    return list(range(n_clips - held)), list(range(n_clips - held, n_clips))


def _masked_input(frames, mask_cfg, rng, learned):
    # frames are standardized, so corpus-statistics noise is unit Gaussian
    noise_cfg = replace(mask_cfg, noise="learned_embedding" if learned else "gaussian")
    return apply_mask(frames, noise_cfg, InputStats.identity(frames.shape[1]), rng)


def heldout_accuracy(model, frames_list, tokens_list, mask_cfg):
    """Top-1 accuracy per head on masked frames, with masks fixed by ``mask_cfg.seed``."""
    hits = np.zeros(model.cfg.n_stages)
    count = 0
    model.eval()
    with torch.no_grad():
        for i, (frames, tok) in enumerate(zip(frames_list, tokens_list)):
            rng = np.random.default_rng(np.random.SeedSequence(mask_cfg.seed, spawn_key=(2, i)))
            x, mask = _masked_input(frames, mask_cfg, rng, model.cfg.learned_mask)
            if not mask.any():
                continue
            logits, _ = model(torch.tensor(x, dtype=torch.float32)[None], torch.tensor(mask)[None])
            pred = logits[0].argmax(-1).numpy()
            hits += (pred[mask] == tok[mask]).sum(axis=0)
            count += int(mask.sum())
    return (hits / max(count, 1)).tolist()


def pretrain(corpus, rvq, model_cfg=None, mask_cfg=None, opt_cfg=None, target_features=None,
             input_stats=None):
    """Masked-token pretraining on Mel ``corpus`` with targets from ``rvq``.

    A Mel-source quantizer tokenizes the corpus frames directly; a latent-source
    quantizer needs ``target_features`` (per-clip latents from an earlier model).
    The last ``opt_cfg.holdout_clips`` clips are held out for accuracy.
    """
    set_threads()
    mask_cfg = mask_cfg or MaskConfig()
    opt_cfg = opt_cfg or OptimConfig()
    specs = [_as_frames(s) for s in corpus]
    if not specs:
        raise DomainError("empty corpus")
    model_cfg = replace(model_cfg or ModelConfig(), input_dim=specs[0].shape[1],
                        n_stages=rvq.n_stages, codebook_size=rvq.codebook_size)
    if target_features is None:
        if rvq.source != "mel":
            raise DomainError("a latent-source quantizer needs target_features")
        target_features = specs
    elif len(target_features) != len(specs):
        raise ShapeError("need one target feature matrix per clip")
    tokens = [encode(rvq, f, strict=False).tokens for f in target_features]

    start = time.perf_counter()
    torch.manual_seed(opt_cfg.seed)
    train_idx, held_idx = _split(len(specs), opt_cfg)
    stats = input_stats or InputStats.fit(np.concatenate([specs[i] for i in train_idx]))
    model = SslToyModel(model_cfg, stats)
    frames = [stats.standardize(s) for s in specs]
    report = PretrainReport(chance=1.0 / rvq.codebook_size)
    if opt_cfg.steps > 0:
        _fit(model, [frames[i] for i in train_idx], [tokens[i] for i in train_idx], mask_cfg, opt_cfg, report)
    if held_idx:
        report.heldout_accuracy = heldout_accuracy(
            model, [frames[i] for i in held_idx], [tokens[i] for i in held_idx], mask_cfg)
    report.wall_clock_s = time.perf_counter() - start
    return model, report


def _fit(model, frames, tokens, mask_cfg, opt_cfg, report):
    rng = np.random.default_rng(np.random.SeedSequence(opt_cfg.seed, spawn_key=(1,)))
    opt = torch.optim.AdamW(model.parameters(), lr=opt_cfg.learning_rate, weight_decay=opt_cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / max(1, opt_cfg.warmup_steps)))
    model.train()
    for step in range(opt_cfg.steps):
        xs, ms, ts = [], [], []
        for _ in range(opt_cfg.batch_size):
            c = int(rng.integers(len(frames)))
            t = min(opt_cfg.crop_frames, frames[c].shape[0])
            s = int(rng.integers(frames[c].shape[0] - t + 1))
            x, mask = _masked_input(frames[c][s:s + t], mask_cfg, rng, model.cfg.learned_mask)
            xs.append(x)
            ms.append(mask)
            ts.append(tokens[c][s:s + t])
        t = min(x.shape[0] for x in xs)
        x = torch.tensor(np.stack([a[:t] for a in xs]), dtype=torch.float32)
        mask = torch.tensor(np.stack([a[:t] for a in ms]))
        tok = torch.tensor(np.stack([a[:t] for a in ts]))
        if not mask.any():
            report.loss.append(float("nan"))
            continue
        logits, _ = model(x, mask)
        loss = mlm_loss(logits, tok, mask)
        if not torch.isfinite(loss):
            raise TrainingDivergenceError(step, "loss")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        report.loss.append(float(loss.detach()))
    model.eval()


def extract_latents(model, corpus, layer):
    """Layer-``layer`` activations of every clip, concatenated over time."""
    if not 0 <= layer <= model.cfg.n_layers:
        raise DomainError(f"layer {layer} outside [0, {model.cfg.n_layers}]")
    return np.concatenate([forward(model, s)[1][layer] for s in corpus]).astype(np.float64)


def latents_per_clip(model, corpus, layer):
    if not 0 <= layer <= model.cfg.n_layers:
        raise DomainError(f"layer {layer} outside [0, {model.cfg.n_layers}]")
    return [forward(model, s)[1][layer].astype(np.float64) for s in corpus]


@dataclass(frozen=True)
class IterateConfig:
    layer: int = None
    rvq_dims: QuantizerConfig = QuantizerConfig(n_stages=4, codebook_size=64)
    rvq_train: TrainConfig = TrainConfig()
    model: ModelConfig = ModelConfig()
    mask: MaskConfig = MaskConfig()
    optim: OptimConfig = OptimConfig()


def iterate(corpus, stage1, cfg=None):
    """Second iteration: quantize layer-l latents of the stage-1 model and retrain from scratch.

    Returns (latent quantizer, new model, its report). The quantizer is fitted
    on training clips only so held-out accuracy stays held out.
    """
    cfg = cfg or IterateConfig()
    _, model1 = stage1
    layer = model1.cfg.n_layers - 1 if cfg.layer is None else cfg.layer
    layer = max(layer, 0)
    latents = latents_per_clip(model1, corpus, layer)
    train_idx, _ = _split(len(latents), cfg.optim)
    rvq_iter, _ = train(np.concatenate([latents[i] for i in train_idx]), cfg.rvq_train, cfg.rvq_dims,
                        source="latent")
    model2, report = pretrain(corpus, rvq_iter, cfg.model, cfg.mask, cfg.optim, target_features=latents)
    return rvq_iter, model2, report


def model_bytes(model):
    cfg = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    parts = [struct.pack("<I", len(cfg)), cfg]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        key = name.encode()
        parts += [struct.pack("<I", len(key)), key, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    return seal(MTOY_MAGIC, MTOY_VERSION, b"".join(parts))


def model_from_bytes(blob):
    r = Reader(open_envelope(blob, MTOY_MAGIC, MTOY_VERSION))
    (n,) = r.unpack("<I")
    cfg = ModelConfig(**json.loads(r.take(n)))
    model = SslToyModel(cfg)
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (k,) = r.unpack("<I")
        name = r.take(k).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        arr = np.frombuffer(r.take(4 * int(np.prod(shape, dtype=np.int64))), dtype="<f4").reshape(shape)
        state[name] = torch.tensor(arr.copy())
    r.done()
    model.load_state_dict(state)
    model.eval()
    return model


def save_model(model, path):
    Path(path).write_bytes(model_bytes(model))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())


class MaskedTokenPredictor(BaseEstimator):
    """Estimator face of :func:`pretrain`.

    ``fit(X, y)`` takes Mel clips and their token matrices (T x N each);
    ``predict`` returns the argmax token per frame and head, unmasked.
    """

    def __init__(self, n_layers=4, d_hidden=192, n_heads=4, mask_prob=0.6, span_frames=10,
                 noise="gaussian", steps=600, batch_size=8, crop_frames=250, learning_rate=1e-3,
                 random_state=0):
        self.n_layers = n_layers
        self.d_hidden = d_hidden
        self.n_heads = n_heads
        self.mask_prob = mask_prob
        self.span_frames = span_frames
        self.noise = noise
        self.steps = steps
        self.batch_size = batch_size
        self.crop_frames = crop_frames
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        frames = [_as_frames(s) for s in X]
        tokens = [np.asarray(t.tokens if isinstance(t, TokenSequence) else t) for t in y]
        k = int(max(t.max() for t in tokens)) + 1
        cfg = ModelConfig(frames[0].shape[1], self.n_layers, self.d_hidden, self.n_heads,
                          n_stages=tokens[0].shape[1], codebook_size=k,
                          learned_mask=self.noise == "learned_embedding")
        mask_cfg = MaskConfig(self.mask_prob, self.span_frames, self.noise, int(self.random_state or 0))
        opt_cfg = OptimConfig(self.steps, self.batch_size, self.crop_frames, self.learning_rate,
                              holdout_clips=0, seed=int(self.random_state or 0))
        set_threads()
        torch.manual_seed(opt_cfg.seed)
        stats = InputStats.fit(np.concatenate(frames))
        self.model_ = SslToyModel(cfg, stats)
        self.report_ = PretrainReport(chance=1.0 / k)
        if opt_cfg.steps:
            _fit(self.model_, [stats.standardize(f) for f in frames], tokens, mask_cfg, opt_cfg, self.report_)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return [forward(self.model_, s)[0].argmax(-1) for s in X]

    def score(self, X, y):
        """Masked top-1 accuracy on head 1."""
        check_is_fitted(self, "model_")
        mask_cfg = MaskConfig(self.mask_prob, self.span_frames, self.noise, int(self.random_state or 0))
        frames = [self.model_.input_stats.standardize(_as_frames(s)) for s in X]
        tokens = [np.asarray(t.tokens if isinstance(t, TokenSequence) else t) for t in y]
        return heldout_accuracy(self.model_, frames, tokens, mask_cfg)[0]


def layer_probe(model, corpus, tokens, holdout_clips=4, stage=0):
    """Per-layer ridge probe of one token stage; rows of (layer, train_acc, heldout_acc, mean_norm).

    A cheap stand-in for layer-wise linear evaluation, meant for plotting.
    """
    from sklearn.linear_model import RidgeClassifier

    n = len(corpus)
    held = min(holdout_clips, n - 1) if n > 1 else 0
    rows = []
    for layer in range(model.cfg.n_layers + 1):
        feats = latents_per_clip(model, corpus, layer)
        x_fit = np.concatenate(feats[: n - held])
        y_fit = np.concatenate([t[:, stage] for t in tokens[: n - held]])
        probe = RidgeClassifier(alpha=1.0).fit(x_fit, y_fit) if np.unique(y_fit).size > 1 else None
        train_acc = float(probe.score(x_fit, y_fit)) if probe else 1.0
        held_acc = float("nan")
        if held and probe:
            held_acc = float(probe.score(np.concatenate(feats[n - held:]),
                                         np.concatenate([t[:, stage] for t in tokens[n - held:]])))
        rows.append({"layer": layer, "probe_train_acc": train_acc, "probe_heldout_acc": held_acc,
                     "mean_norm": float(np.linalg.norm(np.concatenate(feats), axis=1).mean())})
    return rows
