"""Feature quantization: codebook, nearest-code lookup, commitment loss, EMA update.

A feature map of width ``W`` is treated as ``W // D`` positions of ``D``
channels each; every position is snapped to its nearest codebook item
independently, with one codebook shared across positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import SplitMix64

CODEBOOK_MAGIC = "fqgan-codebook v1"

# Tie-refinement band for the expanded-distance argmin, relative to the
# magnitude of the scores involved.
_TIE_RTOL = 1e-9


class Codebook:
    """K prototype vectors of width D plus their EMA accumulators."""

    def __init__(
        self,
        items: np.ndarray,
        ema_sum: np.ndarray | None = None,
        ema_count: np.ndarray | None = None,
        decay: float = 0.9,
        beta: float = 0.25,
    ):
        items = np.array(items, dtype=np.float64)
        if items.ndim != 2 or items.shape[0] < 1 or items.shape[1] < 1:
            raise ValueError(f"codebook items must be a non-empty (K, D) array, got {items.shape}")
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"decay must lie in [0, 1), got {decay}")
        if beta < 0:
            raise ValueError(f"beta must be non-negative, got {beta}")
        self._K, self._D = items.shape
        self.items = items
        self.ema_sum = items.copy() if ema_sum is None else np.array(ema_sum, dtype=np.float64)
        self.ema_count = np.ones(self._K) if ema_count is None else np.array(ema_count, dtype=np.float64)
        if self.ema_sum.shape != items.shape or self.ema_count.shape != (self._K,):
            raise ValueError("EMA accumulators do not match codebook shape")
        self.decay = float(decay)
        self.beta = float(beta)
        # Set when the dictionary is trained by gradient instead of EMA.
        self.param: Tensor | None = None
        self.usage = np.zeros(self._K, dtype=np.int64)

    @property
    def K(self) -> int:
        return self._K

    @property
    def D(self) -> int:
        return self._D

    def make_trainable(self) -> Tensor:
        """Expose the items as a leaf tensor sharing their storage."""
        if self.param is None:
            self.param = Tensor(self.items, requires_grad=True, name="codebook")
            self.param.data = self.items
        return self.param

    def copy(self) -> "Codebook":
        cb = Codebook(self.items, self.ema_sum, self.ema_count, self.decay, self.beta)
        cb.usage = self.usage.copy()
        if self.param is not None:
            cb.make_trainable()
        return cb

    def __eq__(self, other) -> bool:
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            self.decay == other.decay
            and self.beta == other.beta
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.ema_sum, other.ema_sum)
            and np.array_equal(self.ema_count, other.ema_count)
        )

    def __repr__(self) -> str:
        return f"Codebook(K={self.K}, D={self.D}, decay={self.decay}, beta={self.beta})"


def init_codebook(
    K: int,
    D: int,
    seed: int,
    scheme: str = "unit-gaussian",
    scale: float = 1.0,
    decay: float = 0.9,
    beta: float = 0.25,
    stream: int = 0,
) -> Codebook:
    """Random codebook with ``m_k = e_k`` and ``N_k = 1``."""
    if K < 1 or D < 1:
        raise ValueError(f"K and D must be positive, got K={K}, D={D}")
    rng = SplitMix64(seed, stream)
    if scheme == "unit-gaussian":
        items = scale * rng.normal((K, D))
    elif scheme == "uniform":
        items = scale * (2.0 * rng.uniform(K * D).reshape(K, D) - 1.0)
    else:
        raise ValueError(f"unknown codebook init scheme {scheme!r}")
    return Codebook(items, items.copy(), np.ones(K), decay=decay, beta=beta)


def assign(rows: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Index of the nearest item for every row; ties go to the lowest index.

    Scores use the expanded form ``|e|^2 - 2 h.e``; rows whose best scores
    fall within a tiny band are re-decided with exact squared differences.
    """
    norms = np.einsum("kd,kd->k", items, items)
    scores = norms[None, :] - 2.0 * (rows @ items.T)
    n = len(rows)
    idx = np.argmin(scores, axis=1)
    best = scores[np.arange(n), idx]
    band = _TIE_RTOL * (np.abs(best) + np.einsum("nd,nd->n", rows, rows) + norms.max())
    close = (scores <= (best + band)[:, None]).sum(axis=1) > 1
    for r in np.flatnonzero(close):
        d2 = ((items - rows[r]) ** 2).sum(axis=1)
        idx[r] = int(np.argmin(d2))
    return idx


def nearest_lookup(h, codebook: Codebook) -> tuple[int, np.ndarray]:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (codebook.D,):
        raise ShapeError(f"feature of shape {h.shape} does not match codebook dimension {codebook.D}")
    k = int(assign(h[None, :], codebook.items)[0])
    return k, codebook.items[k]


def commitment_loss(h: Tensor, codes: np.ndarray, beta: float, start: int = 0, stop: int | None = None,
                    resid: np.ndarray | None = None) -> Tensor:
    """``beta * |sg(e) - h|^2`` summed per sample, averaged over rows ``start:stop``.

    ``codes`` is a plain array, so no gradient can reach the dictionary.
    ``resid`` may pass a precomputed ``h - codes`` for those rows.
    """
    if codes.shape != h.shape:
        raise ShapeError(f"commitment_loss: {h.shape} vs {codes.shape}")
    stop = h.shape[0] if stop is None else stop
    n = stop - start
    if resid is None:
        resid = h.data[start:stop] - codes[start:stop]
    value = np.asarray(beta * np.einsum("ij,ij->", resid, resid) / n)
    shape = h.shape
    coef = 2.0 * beta / n
    whole = start == 0 and stop == shape[0]

    def back(g, need):
        if whole:
            return ((coef * g) * resid,)
        full = np.zeros(shape)
        full[start:stop] = (coef * g) * resid
        return (full,)

    return ad._emit(value, (h,), back)


@dataclass
class QuantizeResult:
    indices: np.ndarray  # (batch, positions)
    quantized: Tensor  # same shape as the input map
    commit_loss: Tensor  # scalar, gradient into h only
    dict_loss: Tensor  # scalar; carries gradient to the items only when they are trainable
    counts: np.ndarray  # n_k for this call
    features: np.ndarray  # (batch * positions, D), pre-quantization
    codes: np.ndarray  # (batch, width), the e_k values laid out like h
    source: Tensor  # the unquantized map h

    def commit_rows(self, start: int, stop: int, beta: float) -> Tensor:
        """Commitment loss restricted to batch rows ``start:stop``."""
        return commitment_loss(self.source, self.codes, beta, start, stop)

    @property
    def positions(self) -> int:
        return self.indices.shape[1]


def quantize_map(h: Tensor, codebook: Codebook, bypass: bool = False) -> QuantizeResult:
    """Quantize every position of a ``(batch, positions * D)`` feature map.

    The returned ``quantized`` tensor carries the codebook values forward and
    the identity gradient back to ``h``. With ``bypass`` the map passes ``h``
    through unchanged while still reporting indices and losses.
    """
    if h.data.ndim != 2:
        raise ShapeError(f"feature map must be (batch, width), got {h.shape}")
    B, W = h.shape
    D = codebook.D
    if W % D:
        raise ShapeError(f"feature width {W} is not a multiple of codebook dimension {D}")
    P = W // D
    feats = h.data.reshape(B * P, D)
    idx = assign(feats, codebook.items)
    codes = codebook.items[idx].reshape(B, W)
    counts = np.bincount(idx, minlength=codebook.K)

    quantized = h if bypass else ad.straight_through(Tensor(codes), h, copy=False)
    resid = h.data - codes
    sq = np.einsum("ij,ij->", resid, resid)
    commit = commitment_loss(h, codes, codebook.beta, resid=resid)
    if codebook.param is not None:
        picked = ad.reshape(ad.take_rows(codebook.param, idx), (B, W))
        diff = ad.sub(picked, ad.stop_gradient(h))
        dict_loss = ad.scale(ad.sum(ad.square(diff)), 1.0 / B)
    else:
        dict_loss = Tensor(sq / B)
    return QuantizeResult(
        indices=idx.reshape(B, P),
        quantized=quantized,
        commit_loss=commit,
        dict_loss=dict_loss,
        counts=counts,
        features=feats,
        codes=codes,
        source=h,
    )


def batch_sums(features: np.ndarray, indices: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-code sums of assigned feature rows and per-code counts."""
    indices = np.asarray(indices).reshape(-1)
    counts = np.bincount(indices, minlength=K)
    used = np.flatnonzero(counts)
    if len(used) > 8:
        onehot = (indices[:, None] == np.arange(K)[None, :]).astype(np.float64)
        return onehot.T @ features, counts.astype(np.float64)
    # few live codes: direct row sums are cheaper than the one-hot product
    sums = np.zeros((K, features.shape[1]))
    for k in used:
        sums[k] = features[indices == k].sum(axis=0)
    return sums, counts.astype(np.float64)


def ema_update(codebook: Codebook, features: np.ndarray, indices: np.ndarray) -> None:
    """Momentum update of the dictionary from one batch of assigned features.

    Codes with no assignments keep their item bit-for-bit; their
    accumulators still decay.
    """
    features = np.asarray(features, dtype=np.float64).reshape(-1, codebook.D)
    sums, counts = batch_sums(features, indices, codebook.K)
    lam = codebook.decay
    codebook.ema_sum = lam * codebook.ema_sum + (1.0 - lam) * sums
    codebook.ema_count = lam * codebook.ema_count + (1.0 - lam) * counts
    used = (counts > 0) & (codebook.ema_count > 0)
    codebook.items[used] = codebook.ema_sum[used] / codebook.ema_count[used, None]
    codebook.usage += counts.astype(np.int64)


@dataclass
class UsageStats:
    counts: np.ndarray
    perplexity: float


def usage_stats(counts) -> UsageStats:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("no recorded assignments")
    p = counts[counts > 0] / total
    return UsageStats(counts=counts, perplexity=math.exp(float(-(p * np.log(p)).sum())))


# --- serialization ------------------------------------------------------


def _hex_row(values) -> str:
    return " ".join(float(v).hex() for v in np.ravel(values))


def codebook_to_text(cb: Codebook) -> str:
    lines = [
        CODEBOOK_MAGIC,
        f"K {cb.K}",
        f"D {cb.D}",
        f"lambda {cb.decay.hex()}",
        f"beta {cb.beta.hex()}",
    ]
    lines += [f"item {k} {_hex_row(cb.items[k])}" for k in range(cb.K)]
    lines += [f"m {k} {_hex_row(cb.ema_sum[k])}" for k in range(cb.K)]
    lines += [f"N {k} {float(cb.ema_count[k]).hex()}" for k in range(cb.K)]
    return "\n".join(lines) + "\n"


def codebook_from_text(text: str) -> Codebook:
    lines = text.strip().splitlines()
    if not lines or lines[0].strip() != CODEBOOK_MAGIC:
        raise ValueError("not a codebook record")
    head = dict(line.split(None, 1) for line in lines[1:5])
    K, D = int(head["K"]), int(head["D"])
    decay, beta = float.fromhex(head["lambda"]), float.fromhex(head["beta"])
    items = np.empty((K, D))
    ema_sum = np.empty((K, D))
    ema_count = np.empty(K)
    body = lines[5:]
    if len(body) != 3 * K:
        raise ValueError(f"expected {3 * K} body lines, got {len(body)}")
    for line in body:
        tag, k, *vals = line.split()
        k = int(k)
        row = [float.fromhex(v) for v in vals]
        if tag == "item":
            items[k] = row
        elif tag == "m":
            ema_sum[k] = row
        elif tag == "N":
            ema_count[k] = row[0]
        else:
            raise ValueError(f"unknown codebook line tag {tag!r}")
    return Codebook(items, ema_sum, ema_count, decay=decay, beta=beta)


def save_codebook(cb: Codebook, path) -> None:
    Path(path).write_text(codebook_to_text(cb))


def load_codebook(path) -> Codebook:
    return codebook_from_text(Path(path).read_text())
