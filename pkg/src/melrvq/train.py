"""Gradient training of the residual quantizer, plus the frozen-random baseline."""

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dsp import InputStats, MelSpectrogram
from .errors import (
    DomainError,
    FrozenQuantizerError,
    InsufficientFramesError,
    TrainingDivergenceError,
)
from .rvq import (
    LossTerms,
    MelRvq,
    StageParams,
    TokenSequence,
    assign,
    encode,
    l2_normalize,
    reconstruct_standardized,
    utilization,
)

PARAM_NAMES = ("projection", "decoder", "codebook")

# Seed-sequence spawn keys. Stage n uses (STAGE_KEY, n) so that stage 1 is
# reproduced exactly whatever the total number of stages.
BATCH_KEY = 0
STAGE_KEY = 1


@dataclass(frozen=True)
class QuantizerConfig:
    n_stages: int = 8
    codebook_size: int = 1024
    code_dim: int = 16
    alpha: float = 1.0
    beta: float = 0.25

    def __post_init__(self):
        if self.n_stages < 1 or self.codebook_size < 1 or self.code_dim < 1:
            raise DomainError("n_stages, codebook_size and code_dim must be >= 1")
        if not (self.alpha > 0 and self.beta > 0):
            raise DomainError("alpha and beta must be positive")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 2000
    batch_size: int = 256
    seed: int = 0
    init: str = "kmeans_sample"
    dead_code_threshold: int = 1
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be positive")
        if self.batch_size < 1 or self.steps < 0 or self.dead_code_threshold < 0:
            raise DomainError("need batch_size >= 1, steps >= 0, dead_code_threshold >= 0")
        if self.init not in ("kmeans_sample", "random_gaussian"):
            raise DomainError(f"unknown init {self.init!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    loss_code: list = field(default_factory=list)
    loss_comm: list = field(default_factory=list)
    loss_recon: list = field(default_factory=list)
    loss_total: list = field(default_factory=list)
    utilization: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    reseeded: int = 0

    def append(self, terms):
        self.loss_code.append(terms.code)
        self.loss_comm.append(terms.comm)
        self.loss_recon.append(terms.recon)
        self.loss_total.append(terms.total)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss_code", "loss_comm", "loss_recon", "loss_total"])
            for i, row in enumerate(zip(self.loss_code, self.loss_comm, self.loss_recon, self.loss_total)):
                w.writerow([i, *(repr(v) for v in row)])

    def summary(self):
        return {
            "steps": len(self.loss_total),
            "initial_loss_total": self.loss_total[0] if self.loss_total else None,
            "final_loss_total": self.loss_total[-1] if self.loss_total else None,
            "utilization": [float(u) for u in self.utilization],
            "reseeded_codes": self.reseeded,
            "wall_clock_s": self.wall_clock_s,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def init_rvq(frames, cfg, dims, input_stats=None, source="mel"):
    """Seeded initial quantizer for already-standardized ``frames``.

    Projections and decoders are scaled Gaussians. With ``kmeans_sample`` each
    codebook is K distinct frames pushed through that stage's projection (stage
    n sees the residual left by the stages initialized before it).
    """
    frames = np.asarray(frames, dtype=np.float64)
    m = frames.shape[1]
    k, d = dims.codebook_size, dims.code_dim
    if cfg.init == "kmeans_sample":
        distinct = np.unique(frames, axis=0)
        if distinct.shape[0] < k:
            raise InsufficientFramesError(f"{distinct.shape[0]} distinct frames, need K={k}")
    stages = []
    residual = frames
    for n in range(dims.n_stages):
        rng = _rng(cfg.seed, STAGE_KEY, n)
        projection = rng.standard_normal((d, m)) / np.sqrt(m)
        decoder = rng.standard_normal((m, d)) / np.sqrt(d) * 0.1
        if cfg.init == "kmeans_sample":
            if n == 0:
                pool = distinct
            else:
                pool = np.unique(residual, axis=0)
                pool = pool if pool.shape[0] >= k else distinct
            codebook = pool[rng.choice(pool.shape[0], size=k, replace=False)] @ projection.T
            dead = np.linalg.norm(codebook, axis=1) == 0
            codebook[dead] = rng.standard_normal((int(dead.sum()), d))
        else:
            codebook = rng.standard_normal((k, d))
        stage = StageParams(projection, decoder, codebook)
        stages.append(stage)
        residual = assign(stage, residual, strict=False)[2]
    return MelRvq(tuple(stages), dims.alpha, dims.beta, input_stats, source)


def freeze_random(dims, input_dim, seed=0, input_stats=None, source="mel"):
    """Random, never-trained quantizer used as the ablation baseline."""
    probe = np.zeros((0, input_dim))
    rvq = init_rvq(probe, TrainConfig(init="random_gaussian", seed=seed), dims, input_stats, source)
    return MelRvq(rvq.stages, rvq.alpha, rvq.beta, rvq.input_stats, source, frozen=True)


def term_gradients(rvq, batch):
    """Loss terms and per-term gradients at fixed assignments.

    Returns ``(terms, grads, trace)`` where ``grads[term][n][name]`` is the
    gradient of one loss term w.r.t. one parameter of stage n, with stop-gradient
    honoured: the codebook loss reaches only codebooks, the commitment loss only
    projections, and each stage's incoming residual is treated as a constant.
    Frames whose projection is exactly zero skip the two normalized terms.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise DomainError("batch must be a non-empty 2-D array")
    grads = {t: [] for t in ("code", "comm", "recon")}
    code = comm = recon = 0.0
    taus, residuals = [], [batch]
    r = batch
    for stage in rvq.stages:
        z, tau, nxt = assign(stage, r, strict=False)
        u = stage.codebook[tau]
        u_norm = np.linalg.norm(u, axis=1, keepdims=True)
        z_norm = np.linalg.norm(z, axis=1, keepdims=True)
        ok = (z_norm[:, 0] > 0)[:, None]
        qn = u / u_norm
        zn = l2_normalize(z, strict=False)
        cos = (qn * zn).sum(axis=1, keepdims=True)
        gap = ((qn - zn) ** 2 * ok).sum()
        code += gap
        comm += gap

        g_u_code = np.where(ok, -2.0 / u_norm * (zn - cos * qn), 0.0)
        g_z_comm = np.where(ok, -2.0 / np.where(ok, z_norm, 1.0) * (qn - cos * zn), 0.0)
        err = u @ stage.decoder.T - r
        recon += (err ** 2).sum()

        zero_p = np.zeros_like(stage.projection)
        zero_d = np.zeros_like(stage.decoder)
        dq_code = np.zeros_like(stage.codebook)
        np.add.at(dq_code, tau, g_u_code)
        dq_recon = np.zeros_like(stage.codebook)
        np.add.at(dq_recon, tau, 2.0 * err @ stage.decoder)
        grads["code"].append({"projection": zero_p, "decoder": zero_d, "codebook": dq_code})
        grads["comm"].append({"projection": g_z_comm.T @ r, "decoder": zero_d,
                              "codebook": np.zeros_like(stage.codebook)})
        grads["recon"].append({"projection": zero_p, "decoder": 2.0 * err.T @ u, "codebook": dq_recon})
        taus.append(tau)
        r = nxt
        residuals.append(r)
    terms = LossTerms(float(code), float(comm), float(recon),
                      float(rvq.alpha * code + rvq.beta * comm + recon))
    return terms, grads, (np.stack(taus, 1), np.stack(residuals, 1))


def total_gradient(rvq, grads):
    weights = {"code": rvq.alpha, "comm": rvq.beta, "recon": 1.0}
    return [
        {name: sum(weights[t] * grads[t][n][name] for t in weights) for name in PARAM_NAMES}
        for n in range(rvq.n_stages)
    ]


class Sgd:
    def __init__(self, learning_rate):
        self.learning_rate = learning_rate

    def update(self, key, param, grad):
        return param - self.learning_rate * grad

    def reset_rows(self, key, rows):
        pass

    def tick(self):
        pass


class Adam:
    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def tick(self):
        self.t += 1

    def update(self, key, param, grad):
        m = self.m.get(key, 0.0) * self.beta1 + (1 - self.beta1) * grad
        v = self.v.get(key, 0.0) * self.beta2 + (1 - self.beta2) * grad ** 2
        self.m[key], self.v[key] = m, v
        m_hat = m / (1 - self.beta1 ** self.t)
        v_hat = v / (1 - self.beta2 ** self.t)
        return param - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)

    def reset_rows(self, key, rows):
        for state in (self.m, self.v):
            if key in state and np.ndim(state[key]):
                state[key][rows] = 0.0


def make_optimizer(cfg):
    if cfg.optimizer == "sgd":
        return Sgd(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def grad_step(rvq, batch, optimizer, step=0):
    """One optimizer step on standardized ``batch``; returns (new rvq, pre-step losses, trace).

    Assignments are computed from the current parameters and never
    differentiated; the next call re-assigns with the updated ones.
    """
    if rvq.frozen:
        raise FrozenQuantizerError()
    # overflow shows up as non-finite values, which are checked below
    with np.errstate(over="ignore", invalid="ignore"):
        terms, grads, tr = term_gradients(rvq, batch)
        total = total_gradient(rvq, grads)
    for g in total:
        for a in g.values():
            if not np.all(np.isfinite(a)):
                raise TrainingDivergenceError(step)
    optimizer.tick()
    stages = []
    for n, (stage, g) in enumerate(zip(rvq.stages, total)):
        with np.errstate(over="ignore", invalid="ignore"):
            new = {name: optimizer.update((n, name), getattr(stage, name), g[name]) for name in PARAM_NAMES}
            dead = np.linalg.norm(new["codebook"], axis=1) == 0
        for name, a in new.items():
            if not np.all(np.isfinite(a)):
                raise TrainingDivergenceError(step, "parameter")
        # A codeword driven exactly to zero would make normalization undefined.
        new["codebook"][dead] = stage.codebook[dead]
        stages.append(StageParams(**new))
    return rvq.with_stages(stages), terms, tr


def _reseed_dead(rvq, hits, threshold, batch_trace, rngs, optimizer):
    taus, residuals = batch_trace
    stages = list(rvq.stages)
    reseeded = 0
    for n, stage in enumerate(stages):
        dead = np.flatnonzero(hits[n] < threshold)
        if dead.size == 0:
            continue
        picks = rngs[n].integers(0, residuals.shape[0], size=dead.size)
        replacement = residuals[picks, n] @ stage.projection.T
        codebook = stage.codebook.copy()
        keep = np.linalg.norm(replacement, axis=1) > 0
        codebook[dead[keep]] = replacement[keep]
        stages[n] = StageParams(stage.projection, stage.decoder, codebook)
        optimizer.reset_rows((n, "codebook"), dead[keep])
        reseeded += int(keep.sum())
    return rvq.with_stages(stages), reseeded


def train(frames, cfg=None, dims=None, source="mel", init=None):
    """Fit a quantizer to raw (unstandardized) frames.

    Per-bin statistics are computed on ``frames`` and stored in the result.
    Every codeword hit fewer than ``dead_code_threshold`` times during an epoch
    (ceil(len(frames) / batch_size) steps) is replaced by the projection of a
    random frame from the current batch. The returned quantizer is rounded to
    float32 so it survives a checkpoint round trip unchanged.
    """
    cfg = cfg or TrainConfig()
    dims = dims or QuantizerConfig()
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise DomainError("frames must be a non-empty 2-D array")
    if init is not None and init.frozen:
        raise FrozenQuantizerError()
    start = time.perf_counter()
    stats = init.input_stats if init is not None else InputStats.fit(frames)
    data = stats.standardize(frames)
    rvq = init if init is not None else init_rvq(data, cfg, dims, stats, source)
    report = TrainReport()
    optimizer = make_optimizer(cfg)
    batch_rng = _rng(cfg.seed, BATCH_KEY)
    reseed_rngs = [_rng(cfg.seed, STAGE_KEY, n, 1) for n in range(rvq.n_stages)]
    epoch = max(1, -(-data.shape[0] // cfg.batch_size))
    hits = np.zeros((rvq.n_stages, rvq.codebook_size), dtype=np.int64)
    size = min(cfg.batch_size, data.shape[0])
    for step in range(cfg.steps):
        batch = data[batch_rng.choice(data.shape[0], size=size, replace=False)]
        rvq, terms, tr = grad_step(rvq, batch, optimizer, step)
        if not np.isfinite(terms.total):
            raise TrainingDivergenceError(step, "loss")
        report.append(terms)
        for n in range(rvq.n_stages):
            hits[n] += np.bincount(tr[0][:, n], minlength=rvq.codebook_size)
        if cfg.dead_code_threshold > 0 and (step + 1) % epoch == 0:
            rvq, count = _reseed_dead(rvq, hits, cfg.dead_code_threshold, tr, reseed_rngs, optimizer)
            report.reseeded += count
            hits[:] = 0
    rvq = rvq.as_float32()
    report.utilization = utilization(rvq, data).tolist()
    report.wall_clock_s = time.perf_counter() - start
    return rvq, report


def _stack_frames(X):
    if isinstance(X, MelSpectrogram):
        return X.frames
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], MelSpectrogram):
        return np.concatenate([s.frames for s in X])
    return check_array(X, dtype=np.float64)


class MelRVQTokenizer(TransformerMixin, BaseEstimator):
    """sklearn-style wrapper: ``fit`` trains (or freezes) a quantizer, ``transform`` emits tokens.

    ``vq_type="random"`` skips training and keeps a seeded random quantizer,
    the untrained baseline of the tokenizer ablation.
    """

    def __init__(self, n_stages=8, codebook_size=1024, code_dim=16, alpha=1.0, beta=0.25,
                 learning_rate=1e-3, steps=2000, batch_size=256, init="kmeans_sample",
                 dead_code_threshold=1, optimizer="adam", vq_type="trained", source="mel",
                 random_state=0):
        self.n_stages = n_stages
        self.codebook_size = codebook_size
        self.code_dim = code_dim
        self.alpha = alpha
        self.beta = beta
        self.learning_rate = learning_rate
        self.steps = steps
        self.batch_size = batch_size
        self.init = init
        self.dead_code_threshold = dead_code_threshold
        self.optimizer = optimizer
        self.vq_type = vq_type
        self.source = source
        self.random_state = random_state

    def _configs(self):
        dims = QuantizerConfig(self.n_stages, self.codebook_size, self.code_dim, self.alpha, self.beta)
        cfg = TrainConfig(self.learning_rate, self.steps, self.batch_size, int(self.random_state or 0),
                          self.init, self.dead_code_threshold, self.optimizer)
        return dims, cfg

    def fit(self, X, y=None):
        frames = _stack_frames(X)
        dims, cfg = self._configs()
        if self.vq_type == "random":
            stats = InputStats.fit(frames)
            self.rvq_ = freeze_random(dims, frames.shape[1], cfg.seed, stats, self.source)
            self.report_ = TrainReport(utilization=utilization(self.rvq_, stats.standardize(frames)).tolist())
        elif self.vq_type == "trained":
            self.rvq_, self.report_ = train(frames, cfg, dims, self.source)
        else:
            raise DomainError(f"vq_type must be 'trained' or 'random', got {self.vq_type!r}")
        self.n_features_in_ = frames.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "rvq_")
        return encode(self.rvq_, _stack_frames(X)).tokens

    def inverse_transform(self, tokens):
        check_is_fitted(self, "rvq_")
        tokens = TokenSequence(np.asarray(tokens), self.rvq_.codebook_size)
        return self.rvq_.input_stats.destandardize(reconstruct_standardized(self.rvq_, tokens))

    def score(self, X, y=None):
        """Negative mean squared reconstruction error in standardized units."""
        check_is_fitted(self, "rvq_")
        frames = _stack_frames(X)
        std = self.rvq_.input_stats.standardize(frames)
        recon = reconstruct_standardized(self.rvq_, encode(self.rvq_, frames))
        return -float(np.mean((std - recon) ** 2))

