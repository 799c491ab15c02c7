"""Mode coverage, unbiased MMD, 2-D Frechet distance and quantized-feature MMD."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .datasets import MixtureSpec
from .rng import SplitMix64


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


@dataclass
class ModeReport:
    modes_covered: int
    high_quality_fraction: float
    per_mode_counts: np.ndarray
    n_modes: int


def nearest_mode(samples: np.ndarray, spec: MixtureSpec) -> tuple[np.ndarray, np.ndarray]:
    """Nearest component index and distance to it for each sample."""
    means = spec.mean_array
    d2 = ((samples[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    idx = np.argmin(d2, axis=1)
    return idx, np.sqrt(d2[np.arange(len(samples)), idx])


def mode_coverage(samples, spec: MixtureSpec, threshold_sigmas: float = 3.0,
                  min_fraction: float = 0.01) -> ModeReport:
    """A mode is covered when at least ``min_fraction * n / modes`` samples
    (and at least one) land within ``threshold_sigmas * std`` of its mean."""
    x = _as_array(samples)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("mode_coverage needs a non-empty (n, 2) sample set")
    if threshold_sigmas <= 0:
        raise ValueError("threshold_sigmas must be positive")
    idx, dist = nearest_mode(x, spec)
    good = dist <= threshold_sigmas * spec.std
    counts = np.bincount(idx[good], minlength=spec.n_modes)
    need = max(1, math.ceil(min_fraction * len(x) / spec.n_modes))
    return ModeReport(
        modes_covered=int((counts >= need).sum()),
        high_quality_fraction=float(good.mean()),
        per_mode_counts=counts,
        n_modes=spec.n_modes,
    )


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.einsum("id,id->i", a, a)[:, None] + np.einsum("jd,jd->j", b, b)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def _check_sets(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"sample sets must share a dimension, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each set needs at least 2 points")


def mmd2_unbiased(set_a, set_b, bandwidth: float) -> float:
    """Unbiased U-statistic for squared MMD with kernel ``exp(-|a-b|^2 / (2 bw^2))``."""
    a, b = _as_array(set_a), _as_array(set_b)
    _check_sets(a, b)
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    g = -1.0 / (2.0 * bandwidth**2)
    m, n = len(a), len(b)
    kaa = np.exp(g * _sq_dists(a, a))
    kbb = np.exp(g * _sq_dists(b, b))
    kab = np.exp(g * _sq_dists(a, b))
    saa = kaa.sum() - np.trace(kaa)
    sbb = kbb.sum() - np.trace(kbb)
    return float(saa / (m * (m - 1)) + sbb / (n * (n - 1)) - 2.0 * kab.mean())


def median_bandwidth(set_a, set_b) -> float:
    """Median pairwise distance over the pooled set.

    Falls back to the median of the non-zero distances when more than half
    the pairs coincide (common for quantized features), then to 1.
    """
    pooled = np.concatenate([_as_array(set_a), _as_array(set_b)])
    d2 = _sq_dists(pooled, pooled)
    iu = np.triu_indices(len(pooled), k=1)
    dist = np.sqrt(d2[iu])
    med = float(np.median(dist)) if dist.size else 0.0
    if med > 0:
        return med
    pos = dist[dist > 0]
    return float(np.median(pos)) if pos.size else 1.0


def mmd_permutation_test(set_a, set_b, bandwidth: float, n_perm: int = 200, seed: int = 0) -> tuple[float, float]:
    """Observed MMD^2 and its permutation p-value (pooled relabelling)."""
    a, b = _as_array(set_a), _as_array(set_b)
    _check_sets(a, b)
    pooled = np.concatenate([a, b])
    m, n = len(a), len(b)
    N = m + n
    K = np.exp(-_sq_dists(pooled, pooled) / (2.0 * bandwidth**2))
    np.fill_diagonal(K, 0.0)
    rng = SplitMix64(seed, 11)
    labels = np.zeros((n_perm + 1, N), dtype=bool)
    labels[0, :m] = True
    for p in range(1, n_perm + 1):
        # random-key shuffle: sort positions by fresh uniforms
        perm = np.argsort(rng.uniform(N), kind="stable")
        labels[p, perm[:m]] = True
    A = labels.astype(np.float64)
    Bm = 1.0 - A
    saa = np.einsum("pi,pi->p", A @ K, A)
    sbb = np.einsum("pi,pi->p", Bm @ K, Bm)
    sab = np.einsum("pi,pi->p", A @ K, Bm)
    # off-diagonal cross sum misses the zeroed diagonal pairs only when i == j,
    # which never happens across the two groups
    stats = saa / (m * (m - 1)) + sbb / (n * (n - 1)) - 2.0 * sab / (m * n)
    observed = float(stats[0])
    p_value = float((1 + np.sum(stats[1:] >= observed)) / (n_perm + 1))
    return observed, p_value


@dataclass
class FrechetScore:
    value: float
    mean_a: np.ndarray
    mean_b: np.ndarray
    cov_a: np.ndarray
    cov_b: np.ndarray
    regularized: bool = False


_REG = 1e-10


def _fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    c = x - mu
    return mu, c.T @ c / (len(x) - 1)


def frechet_2d(samples_a, samples_b) -> FrechetScore:
    """Frechet distance between Gaussians fitted to two 2-D sample sets.

    Uses ``Tr(sqrt(M)) = sqrt(tr M + 2 sqrt(det M))`` for the 2x2 product
    ``M = Sa Sb``, whose eigenvalues are real and non-negative.
    """
    a, b = _as_array(samples_a), _as_array(samples_b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != 2 or b.shape[1] != 2:
        raise ValueError("frechet_2d expects two (n, 2) sample sets")
    if len(a) < 3 or len(b) < 3:
        raise ValueError("frechet_2d needs at least 3 points per set")
    mu_a, ca = _fit(a)
    mu_b, cb = _fit(b)
    if np.array_equal(mu_a, mu_b) and np.array_equal(ca, cb):
        return FrechetScore(0.0, mu_a, mu_b, ca, cb)
    regularized = False
    if np.linalg.det(ca) <= 0 or np.linalg.det(cb) <= 0:
        ca = ca + _REG * np.eye(2)
        cb = cb + _REG * np.eye(2)
        regularized = True
    M = ca @ cb
    det = max(float(np.linalg.det(ca) * np.linalg.det(cb)), 0.0)
    tr_sqrt = math.sqrt(max(float(np.trace(M)) + 2.0 * math.sqrt(det), 0.0))
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * tr_sqrt)
    return FrechetScore(max(value, 0.0), mu_a, mu_b, ca, cb, regularized)


def per_mode_frechet(fake, real, spec: MixtureSpec, min_count: int = 3) -> dict[int, float]:
    """Frechet score per component over samples whose nearest mean is that component."""
    f, r = _as_array(fake), _as_array(real)
    fi, _ = nearest_mode(f, spec)
    ri, _ = nearest_mode(r, spec)
    out = {}
    for k in range(spec.n_modes):
        fs, rs = f[fi == k], r[ri == k]
        if len(fs) >= min_count and len(rs) >= min_count:
            out[k] = frechet_2d(fs, rs).value
    return out


def quantized_features(model, x, layer: int, quantized: bool = True) -> np.ndarray:
    """Per-position feature vectors at ``layer``, shape ``(batch * positions, D)``.

    With ``quantized`` the codebook values are returned; otherwise the raw
    pre-quantization features. A layer without a codebook is only valid with
    ``quantized=False`` and ``D`` supplied through ``model.feature_dim``.
    """
    from .gan import discriminate

    x = x if isinstance(x, Tensor) else Tensor(x)
    if layer in model.codebooks:
        _, results = discriminate(model, x)
        q = results[layer]
        return q.codes.reshape(-1, model.codebooks[layer].D) if quantized else q.features
    if quantized:
        raise ValueError(f"layer {layer} has no codebook")
    h = model.bottom(x, layer)
    return h.data.copy()


def _thin(rows: np.ndarray, max_rows: int | None) -> np.ndarray:
    """Evenly strided subset of at most ``max_rows`` rows (deterministic)."""
    if max_rows is None or len(rows) <= max_rows:
        return rows
    return rows[np.linspace(0, len(rows) - 1, max_rows).round().astype(int)]


def quantized_feature_mmd(model, real, fake, layer: int, max_rows: int | None = None) -> float:
    """MMD^2 between quantized per-position features of real and fake batches,
    median-heuristic bandwidth. ``max_rows`` caps each set for large maps."""
    if layer not in model.codebooks:
        raise ValueError(f"layer {layer} has no codebook")
    a = _thin(quantized_features(model, real, layer), max_rows)
    b = _thin(quantized_features(model, fake, layer), max_rows)
    return mmd2_unbiased(a, b, median_bandwidth(a, b))


def feature_mmd(model, real, fake, layer: int, dim: int | None = None, max_rows: int | None = None) -> float:
    """MMD^2 on quantized features when the layer has a codebook, else on raw
    features split into positions of width ``dim``."""
    if layer in model.codebooks:
        return quantized_feature_mmd(model, real, fake, layer, max_rows)
    a = quantized_features(model, real, layer, quantized=False)
    b = quantized_features(model, fake, layer, quantized=False)
    if dim:
        a, b = a.reshape(-1, dim), b.reshape(-1, dim)
    a, b = _thin(a, max_rows), _thin(b, max_rows)
    return mmd2_unbiased(a, b, median_bandwidth(a, b))
