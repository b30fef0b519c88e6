"""Decoupled contrastive loss between pooled music and text embeddings."""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, InsufficientNegativesError, ShapeError


@dataclass(frozen=True)
class EmbeddingPair:
    e_m: np.ndarray
    e_t: np.ndarray

    def __post_init__(self):
        e_m = np.asarray(self.e_m, dtype=np.float64).ravel()
        e_t = np.asarray(self.e_t, dtype=np.float64).ravel()
        if e_m.shape != e_t.shape:
            raise ShapeError(f"music dim {e_m.shape[0]} != text dim {e_t.shape[0]}")
        if not (np.all(np.isfinite(e_m)) and np.all(np.isfinite(e_t))):
            raise DomainError("embeddings must be finite")
        object.__setattr__(self, "e_m", e_m)
        object.__setattr__(self, "e_t", e_t)


@dataclass(frozen=True)
class DclConfig:
    temperature: float = 0.1
    dim: int = 512

    def __post_init__(self):
        if not self.temperature > 0:
            raise DomainError("temperature must be positive")


def pool_project(latents, proj):
    """Average over time, then apply the linear map ``proj`` (d x d_h)."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[0] == 0:
        raise DomainError("need a non-empty T x d_h sequence")
    return np.asarray(proj, dtype=np.float64) @ latents.mean(axis=0)


def _stack(batch):
    if isinstance(batch, tuple) and len(batch) == 2 and not isinstance(batch[0], EmbeddingPair):
        e_m, e_t = (np.asarray(a, dtype=np.float64) for a in batch)
    else:
        e_m = np.stack([p.e_m for p in batch])
        e_t = np.stack([p.e_t for p in batch])
    if e_m.shape != e_t.shape:
        raise ShapeError("music and text batches differ in shape")
    return e_m, e_t


def dcl_from_similarity(sim, temperature):
    """Symmetric decoupled InfoNCE over a B x B similarity matrix (rows: music, cols: text).

    For anchor i the positive s_ii is excluded from the normalizer, which runs
    over j != i only. Both directions are averaged over anchors, then over
    directions.
    """
    sim = np.asarray(sim, dtype=np.float64)
    b = sim.shape[0]
    if sim.ndim != 2 or sim.shape[1] != b:
        raise ShapeError("similarity must be square")
    if b < 2:
        raise InsufficientNegativesError("need at least 2 pairs for a negative")
    if not temperature > 0:
        raise DomainError("temperature must be positive")
    logits = sim / temperature
    pos = np.diag(logits)
    off = ~np.eye(b, dtype=bool)
    m2t = logsumexp(np.where(off, logits, -np.inf), axis=1) - pos
    t2m = logsumexp(np.where(off, logits, -np.inf), axis=0) - pos
    return 0.5 * (m2t.mean() + t2m.mean())


def dcl_loss(batch, cfg=None):
    """Loss for a list of :class:`EmbeddingPair` (or an ``(E_m, E_t)`` tuple); dot-product similarity."""
    cfg = cfg or DclConfig()
    e_m, e_t = _stack(batch)
    return float(dcl_from_similarity(e_m @ e_t.T, cfg.temperature))


def tag_scores(music_emb, tag_embs):
    music_emb = np.asarray(music_emb, dtype=np.float64)
    tags = np.atleast_2d(np.asarray(tag_embs, dtype=np.float64))
    if tags.shape[1] != music_emb.shape[0]:
        raise ShapeError("tag and music embedding dimensions differ")
    return tags @ music_emb


def _brute_force(e_m, e_t, temperature):
    b = len(e_m)
    total = 0.0
    for rows, cols in ((e_m, e_t), (e_t, e_m)):
        for i in range(b):
            pos = float(np.dot(rows[i], cols[i])) / temperature
            neg = sum(np.exp(float(np.dot(rows[i], cols[j])) / temperature - pos) for j in range(b) if j != i)
            total += np.log(neg) / (2 * b)
    return total


def selftest(seed=0, trials=20):
    """Property checks on random batches; returns a JSON-ready summary."""
    rng = np.random.default_rng(seed)
    checks = {"oracle": 0.0, "permutation": 0.0, "scale": 0.0}
    decoupling = True
    for _ in range(trials):
        b, d = int(rng.integers(2, 17)), int(rng.integers(2, 33))
        e_m, e_t = rng.standard_normal((b, d)), rng.standard_normal((b, d))
        sigma = float(rng.uniform(0.05, 2.0))
        loss = dcl_loss((e_m, e_t), DclConfig(sigma))
        checks["oracle"] = max(checks["oracle"], abs(loss - _brute_force(e_m, e_t, sigma)))
        perm = rng.permutation(b)
        checks["permutation"] = max(checks["permutation"],
                                    abs(loss - dcl_loss((e_m[perm], e_t[perm]), DclConfig(sigma))))
        c = float(rng.uniform(0.1, 10.0))
        checks["scale"] = max(checks["scale"], abs(loss - dcl_loss((c * e_m, e_t), DclConfig(c * sigma))))
        # strict monotonicity is only observable while every exp term stays above
        # float64 resolution, so this check uses cosine similarities and sigma >= 0.1
        sim = (e_m / np.linalg.norm(e_m, axis=1, keepdims=True)) @ (
            e_t / np.linalg.norm(e_t, axis=1, keepdims=True)).T
        s_dec = max(sigma, 0.1)
        base = dcl_from_similarity(sim, s_dec)
        i, j = rng.choice(b, size=2, replace=False)
        up_pos, up_neg = sim.copy(), sim.copy()
        up_pos[i, i] += 0.5
        up_neg[i, j] += 0.5
        decoupling &= dcl_from_similarity(up_pos, s_dec) < base < dcl_from_similarity(up_neg, s_dec)
    tol = 1e-8
    result = {name: {"max_abs_error": float(err), "passed": bool(err <= tol)} for name, err in checks.items()}
    result["decoupling"] = {"passed": bool(decoupling)}
    result["passed"] = all(v["passed"] for v in result.values())
    result["trials"] = trials
    return result
