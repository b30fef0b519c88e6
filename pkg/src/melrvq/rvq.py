"""Residual linear-projection quantizer over (standardized) Mel frames."""

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._envelope import Reader, open_envelope, seal
from .dsp import InputStats, MelSpectrogram
from .errors import DomainError, FormatError, NormalizationUndefinedError, ShapeError

MRVQ_MAGIC = b"MRVQ"
MRVQ_VERSION = 1
MTOK_MAGIC = b"MTOK"
MTOK_VERSION = 1

SOURCES = ("mel", "latent")
_FLAG_FROZEN = 1


@dataclass(frozen=True)
class StageParams:
    """One quantizer stage: projection (d_code x M), decoder (M x d_code), codebook (K x d_code)."""

    projection: np.ndarray
    decoder: np.ndarray
    codebook: np.ndarray

    def __post_init__(self):
        p, d, q = (np.asarray(a, dtype=np.float64) for a in (self.projection, self.decoder, self.codebook))
        if p.ndim != 2 or d.ndim != 2 or q.ndim != 2:
            raise ShapeError("stage matrices must be 2-D")
        d_code, m = p.shape
        if d.shape != (m, d_code) or q.shape[1] != d_code or q.shape[0] < 1:
            raise ShapeError(f"inconsistent stage shapes P{p.shape} D{d.shape} Q{q.shape}")
        if not all(np.all(np.isfinite(a)) for a in (p, d, q)):
            raise DomainError("stage parameters must be finite")
        if not np.all(np.any(q != 0, axis=1)):
            raise DomainError("codebook rows must be non-zero")
        object.__setattr__(self, "projection", p)
        object.__setattr__(self, "decoder", d)
        object.__setattr__(self, "codebook", q)

    @property
    def codebook_size(self):
        return self.codebook.shape[0]

    @property
    def code_dim(self):
        return self.codebook.shape[1]

    @property
    def input_dim(self):
        return self.projection.shape[1]


@dataclass(frozen=True)
class MelRvq:
    stages: tuple
    alpha: float = 1.0
    beta: float = 0.25
    input_stats: InputStats = None
    source: str = "mel"
    frozen: bool = False

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise DomainError("need at least one stage")
        shapes = {(s.codebook_size, s.code_dim, s.input_dim) for s in stages}
        if len(shapes) != 1:
            raise ShapeError(f"stages disagree on (K, d_code, M): {sorted(shapes)}")
        if not (self.alpha > 0 and self.beta > 0):
            raise DomainError("alpha and beta must be positive")
        if self.source not in SOURCES:
            raise DomainError(f"source must be one of {SOURCES}")
        stats = self.input_stats or InputStats.identity(stages[0].input_dim)
        if stats.dim != stages[0].input_dim:
            raise ShapeError("input_stats length does not match M")
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "input_stats", stats)

    @property
    def n_stages(self):
        return len(self.stages)

    @property
    def codebook_size(self):
        return self.stages[0].codebook_size

    @property
    def code_dim(self):
        return self.stages[0].code_dim

    @property
    def input_dim(self):
        return self.stages[0].input_dim

    def with_stages(self, stages):
        return replace(self, stages=tuple(stages))

    def as_float32(self):
        """Round every matrix through float32, i.e. to what a checkpoint can hold."""
        def r(a):
            return a.astype(np.float32).astype(np.float64)
        stages = [StageParams(r(s.projection), r(s.decoder), r(s.codebook)) for s in self.stages]
        stats = InputStats(r(self.input_stats.mean), r(self.input_stats.std))
        return replace(self, stages=tuple(stages), input_stats=stats,
                       alpha=float(np.float32(self.alpha)), beta=float(np.float32(self.beta)))


@dataclass
class ResidualTrace:
    """Per-frame quantization trace; ``residuals[:, 0]`` is the input, ``residuals[:, n]`` is r_n."""

    z: np.ndarray
    tau: np.ndarray
    residuals: np.ndarray


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray
    codebook_size: int
    frame_rate_hz: float = field(default=25.0, compare=False)

    def __post_init__(self):
        tokens = np.asarray(self.tokens)
        if tokens.ndim != 2:
            raise ShapeError("tokens must be T x N")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.codebook_size):
            raise DomainError(f"tokens outside [0, {self.codebook_size})")
        object.__setattr__(self, "tokens", tokens.astype(np.int64))

    @property
    def n_stages(self):
        return self.tokens.shape[1]

    def __len__(self):
        return self.tokens.shape[0]


class LossTerms(NamedTuple):
    code: float
    comm: float
    recon: float
    total: float


def l2_normalize(v, strict=True):
    """Row-wise v / ||v||. Zero rows raise in strict mode and are left as zeros otherwise."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    zero = norm == 0
    if strict and np.any(zero):
        raise NormalizationUndefinedError("cannot normalize the zero vector")
    return np.divide(v, norm, out=np.zeros_like(v), where=~zero)


def assign(stage, residuals, strict=True):
    """Vectorized quantize_step over rows of ``residuals``: returns (z, tau, next_residuals).

    tau maximizes cosine similarity, equivalent to minimizing distance between unit
    vectors; np.argmax keeps the lowest index on ties. In non-strict mode a zero z
    falls back to the nearest codeword by plain Euclidean distance.
    """
    residuals = np.asarray(residuals, dtype=np.float64)
    z = residuals @ stage.projection.T
    zn = l2_normalize(z, strict=strict)
    tau = np.argmax(zn @ l2_normalize(stage.codebook).T, axis=1)
    degenerate = ~np.any(zn, axis=1)
    if np.any(degenerate):
        d2 = ((z[degenerate, None, :] - stage.codebook[None]) ** 2).sum(-1)
        tau[degenerate] = np.argmin(d2, axis=1)
    return z, tau, residuals - stage.codebook[tau] @ stage.decoder.T


def quantize_step(stage, residual, strict=True):
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != (stage.input_dim,):
        raise ShapeError(f"residual must have shape ({stage.input_dim},)")
    if not np.all(np.isfinite(residual)):
        raise DomainError("residual must be finite")
    z, tau, nxt = assign(stage, residual[None], strict=strict)
    return z[0], int(tau[0]), nxt[0]


def _frames_of(rvq, spec):
    frames = spec.frames if isinstance(spec, MelSpectrogram) else np.asarray(spec, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != rvq.input_dim:
        raise ShapeError(f"expected frames with {rvq.input_dim} bins, got shape {frames.shape}")
    return frames


def trace(rvq, standardized, strict=True):
    """Run all stages over already-standardized frames, keeping every intermediate."""
    r = np.asarray(standardized, dtype=np.float64)
    zs, taus, residuals = [], [], [r]
    for stage in rvq.stages:
        z, tau, r = assign(stage, r, strict=strict)
        zs.append(z)
        taus.append(tau)
        residuals.append(r)
    return ResidualTrace(np.stack(zs, 1), np.stack(taus, 1), np.stack(residuals, 1))


def encode(rvq, spec, strict=True):
    frames = _frames_of(rvq, spec)
    rate = spec.frame_rate_hz if isinstance(spec, MelSpectrogram) else 25.0
    tr = trace(rvq, rvq.input_stats.standardize(frames), strict=strict)
    return TokenSequence(tr.tau, rvq.codebook_size, rate)


def reconstruct_standardized(rvq, tokens):
    tok = tokens.tokens if isinstance(tokens, TokenSequence) else np.asarray(tokens)
    if tok.ndim != 2 or tok.shape[1] > rvq.n_stages:
        raise ShapeError(f"tokens must be T x n with n <= {rvq.n_stages}")
    if tok.size and (tok.min() < 0 or tok.max() >= rvq.codebook_size):
        raise IndexError(f"token outside [0, {rvq.codebook_size})")
    out = np.zeros((tok.shape[0], rvq.input_dim))
    for n in range(tok.shape[1]):
        stage = rvq.stages[n]
        out += stage.codebook[tok[:, n]] @ stage.decoder.T
    return out


def decode(rvq, tokens):
    rate = tokens.frame_rate_hz if isinstance(tokens, TokenSequence) else 25.0
    recon = reconstruct_standardized(rvq, tokens)
    return MelSpectrogram(rvq.input_stats.destandardize(recon), rate)


def losses(rvq, batch, strict=True):
    """Codebook, commitment and reconstruction losses summed over batch and stages.

    Stage n sees the residual left by stages < n, both as the input to its
    projection and as the reconstruction target.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise DomainError("batch must be a non-empty 2-D array")
    if batch.shape[1] != rvq.input_dim:
        raise ShapeError(f"batch has {batch.shape[1]} bins, quantizer expects {rvq.input_dim}")
    code = comm = recon = 0.0
    r = batch
    for stage in rvq.stages:
        z, tau, nxt = assign(stage, r, strict=strict)
        u = stage.codebook[tau]
        zn = l2_normalize(z, strict=strict)
        ok = np.any(zn, axis=1)
        gap = ((l2_normalize(u) - zn)[ok] ** 2).sum()
        code += gap
        comm += gap
        recon += ((u @ stage.decoder.T - r) ** 2).sum()
        r = nxt
    total = rvq.alpha * code + rvq.beta * comm + recon
    return LossTerms(float(code), float(comm), float(recon), float(total))


def utilization(rvq, standardized, strict=False):
    """Fraction of codewords selected at least once, per stage."""
    tau = trace(rvq, standardized, strict=strict).tau
    return np.array([np.unique(tau[:, n]).size / rvq.codebook_size for n in range(rvq.n_stages)])


def save_checkpoint(rvq, path):
    Path(path).write_bytes(checkpoint_bytes(rvq))


def checkpoint_bytes(rvq):
    header = struct.pack(
        "<IIIIffBB", rvq.n_stages, rvq.codebook_size, rvq.code_dim, rvq.input_dim,
        rvq.alpha, rvq.beta, SOURCES.index(rvq.source), _FLAG_FROZEN if rvq.frozen else 0,
    )
    parts = [header, rvq.input_stats.mean.astype("<f4").tobytes(), rvq.input_stats.std.astype("<f4").tobytes()]
    for s in rvq.stages:
        parts += [m.astype("<f4").tobytes() for m in (s.projection, s.decoder, s.codebook)]
    return seal(MRVQ_MAGIC, MRVQ_VERSION, b"".join(parts))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(blob):
    r = Reader(open_envelope(blob, MRVQ_MAGIC, MRVQ_VERSION))
    n, k, d, m, alpha, beta, source, flags = r.unpack("<IIIIffBB")
    if source >= len(SOURCES):
        raise FormatError(f"unknown source tag {source}")

    def mat(*shape):
        count = int(np.prod(shape))
        return np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float64)

    stats = InputStats(mat(m), mat(m))
    stages = [StageParams(mat(d, m), mat(m, d), mat(k, d)) for _ in range(n)]
    r.done()
    return MelRvq(tuple(stages), float(alpha), float(beta), stats, SOURCES[source], bool(flags & _FLAG_FROZEN))


def save_tokens(tokens, path):
    t, n = tokens.tokens.shape
    if tokens.codebook_size > 1 << 16:
        raise DomainError("MTOK stores u16 tokens; K must be <= 65536")
    payload = struct.pack("<IIIf", t, n, tokens.codebook_size, tokens.frame_rate_hz)
    Path(path).write_bytes(seal(MTOK_MAGIC, MTOK_VERSION, payload + tokens.tokens.astype("<u2").tobytes()))


def load_tokens(path):
    r = Reader(open_envelope(Path(path).read_bytes(), MTOK_MAGIC, MTOK_VERSION))
    t, n, k, rate = r.unpack("<IIIf")
    tokens = np.frombuffer(r.take(2 * t * n), dtype="<u2").reshape(t, n)
    r.done()
    return TokenSequence(tokens, k, rate)


def save_tokens_csv(tokens, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + [f"stage_{n + 1}" for n in range(tokens.n_stages)])
        for i, row in enumerate(tokens.tokens):
            w.writerow([i, *row.tolist()])
