"""Synthetic 2-D mixtures with exactly measurable mode coverage, plus CSV I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .rng import SplitMix64


@dataclass(frozen=True)
class MixtureSpec:
    """Equal-weight isotropic Gaussian mixture."""

    means: tuple[tuple[float, float], ...]
    std: float

    def __post_init__(self):
        if len(self.means) < 1:
            raise ValueError("mixture needs at least one component")
        if not self.std > 0:
            raise ValueError(f"std must be positive, got {self.std}")
        if len(set(self.means)) != len(self.means):
            raise ValueError("component means must be pairwise distinct")

    @property
    def n_modes(self) -> int:
        return len(self.means)

    @property
    def mean_array(self) -> np.ndarray:
        return np.array(self.means, dtype=np.float64)


def ring_mixture(modes: int = 8, radius: float = 2.0, std: float = 0.02) -> MixtureSpec:
    if modes < 1 or radius <= 0:
        raise ValueError("ring needs modes >= 1 and radius > 0")
    means = []
    for i in range(modes):
        t = 2.0 * math.pi * i / modes
        # snap 1e-16 residue of cos/sin to zero so symmetric rings compare exactly
        means.append((_clean(radius * math.cos(t)), _clean(radius * math.sin(t))))
    return MixtureSpec(tuple(means), float(std))


def _clean(v: float) -> float:
    return 0.0 if abs(v) < 1e-12 else v


def grid_mixture(side: int = 5, spacing: float = 1.0, std: float = 0.02) -> MixtureSpec:
    if side < 1:
        raise ValueError("grid side must be >= 1")
    offsets = [(i - (side - 1) / 2.0) * spacing for i in range(side)]
    means = tuple((float(x), float(y)) for x in offsets for y in offsets)
    return MixtureSpec(means, float(std))


def make_spec(kind: str, modes: int, radius: float, std: float) -> MixtureSpec:
    """Build a spec from flat config values; for grids ``modes`` must be a square."""
    if kind == "ring":
        return ring_mixture(modes, radius, std)
    if kind == "grid":
        side = int(round(math.sqrt(modes)))
        if side * side != modes:
            raise ValueError(f"grid dataset needs a square mode count, got {modes}")
        return grid_mixture(side, radius, std)
    raise ValueError(f"unknown dataset kind {kind!r}")


def draw(spec: MixtureSpec, n: int, rng: SplitMix64) -> np.ndarray:
    """``n`` samples: all component choices first, then all noise."""
    comp = rng.choice(spec.n_modes, n)
    noise = rng.normal((n, 2))
    return spec.mean_array[comp] + spec.std * noise


def sample(spec: MixtureSpec, n: int, seed: int, stream: int = 0) -> Tensor:
    if n < 1:
        raise ValueError("n must be >= 1")
    return Tensor(draw(spec, n, SplitMix64(seed, stream)))


def load_csv(path, expected_dim: int, skip_header: bool = False) -> Tensor:
    path = Path(path)
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if skip_header and lineno == 1:
                continue
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(v) for v in line.split(",")]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: unparseable row {line!r}") from exc
            if len(row) != expected_dim:
                raise ValueError(f"{path}:{lineno}: expected {expected_dim} columns, got {len(row)}")
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return Tensor(np.array(rows, dtype=np.float64))


def save_csv(path, values, header: list[str] | None = None) -> None:
    """Write rows with ``repr`` floats so a reload is exact."""
    values = np.asarray(values, dtype=np.float64)
    lines = [",".join(header)] if header else []
    lines += [",".join(repr(float(v)) for v in row) for row in values]
    Path(path).write_text("\n".join(lines) + "\n")
