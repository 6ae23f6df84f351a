"""Noise alphabets and path ensembles.

A noise path assigns one symbol, scaled by sqrt(n), to each of the n+1 grid
points of the time lattice.  The binary alphabet {-1, +1} gives the
coin-flip driving term; exhaustive mode enumerates all |A|^(n+1) paths
exactly once so ensemble averages are exact counting sums, while sampled
mode draws reproducible paths from a counter-based generator.

The generator is a pure function of (seed, path index, grid point), so a
path's value never depends on how work is batched or on how many workers
run; ensemble statistics cannot change with the degree of parallelism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .grids import GridLevel

__all__ = [
    "NoiseError",
    "NoiseAlphabet",
    "NoisePath",
    "NoiseEnsemble",
    "ConditionalEnsemble",
    "ExpectationResult",
    "enumerate_paths",
    "sample_paths",
    "conditional",
    "expectation",
    "expectation_detail",
    "DEFAULT_ENUMERATION_CAP",
]


class NoiseError(ValueError):
    """Invalid noise construction or unsupported ensemble operation."""


DEFAULT_ENUMERATION_CAP = 1 << 24
_DEFAULT_BATCH = 1 << 15

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix_int(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _uniform01(seed: int, counters: np.ndarray) -> np.ndarray:
    """Deterministic uniforms in [0, 1) addressed by (seed, counter)."""
    base = _mix_int(seed ^ 0xD1B54A32D192ED03)
    with np.errstate(over="ignore"):
        z = np.uint64(base) + (counters.astype(np.uint64) + np.uint64(1)) * np.uint64(_GOLDEN)
        u = _mix_array(z)
    return (u >> np.uint64(11)).astype(np.float64) * 2.0**-53


@dataclass(frozen=True)
class NoiseAlphabet:
    """Symbols q_i with sum 0 and mean square 1.

    Path values are symbol * sqrt(n), so the mean-square normalization makes
    the single-point second moment exactly n under uniform choice, which is
    what the exact expectation identities require.  ``from_symbols``
    rescales arbitrary zero-sum symbols to that normalization.
    """

    symbols: tuple[float, ...]

    def __post_init__(self):
        if len(self.symbols) < 2:
            raise NoiseError("alphabet needs at least 2 symbols")
        total = math.fsum(self.symbols)
        scale = max(abs(s) for s in self.symbols)
        if scale == 0.0 or abs(total) > 1e-12 * max(1.0, scale):
            raise NoiseError("alphabet symbols must sum to 0")
        ms = math.fsum(s * s for s in self.symbols) / len(self.symbols)
        if abs(ms - 1.0) > 1e-12:
            raise NoiseError("alphabet symbols must have mean square 1; use from_symbols")

    @classmethod
    def white(cls) -> "NoiseAlphabet":
        return cls((-1.0, 1.0))

    @classmethod
    def from_symbols(cls, raw: Sequence[float]) -> "NoiseAlphabet":
        raw = [float(v) for v in raw]
        if len(raw) < 2:
            raise NoiseError("alphabet needs at least 2 symbols")
        ms = math.fsum(v * v for v in raw) / len(raw)
        if ms == 0.0:
            raise NoiseError("alphabet symbols cannot all be zero")
        scale = math.sqrt(ms)
        return cls(tuple(v / scale for v in raw))

    @property
    def size(self) -> int:
        return len(self.symbols)

    def scaled(self, level: GridLevel) -> np.ndarray:
        return np.asarray(self.symbols, dtype=np.float64) * math.sqrt(level.n)


@dataclass(frozen=True)
class NoisePath:
    """One noise realization: n+1 values, each symbol * sqrt(n)."""

    level: GridLevel
    values: np.ndarray
    path_index: int | None = None

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        expected = self.level.n + 1
        if arr.ndim != 1 or arr.shape[0] != expected:
            raise NoiseError(f"noise path needs {expected} values, got shape {arr.shape}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return len(self.values)


def _validate_symbols(alphabet: NoiseAlphabet, level: GridLevel, values: np.ndarray) -> None:
    scaled = alphabet.scaled(level)
    dist = np.min(np.abs(np.asarray(values, dtype=np.float64)[:, None] - scaled[None, :]), axis=1)
    if np.any(dist > 1e-9 * max(1.0, float(np.max(np.abs(scaled))))):
        raise NoiseError("path values must come from the scaled alphabet")


@dataclass(frozen=True)
class NoiseEnsemble:
    """Descriptor of an exhaustive or sampled set of noise paths.

    Exhaustive mode iterates every path exactly once in lexicographic order
    (earliest grid point most significant, symbols ascending); sampled mode
    reproduces path i from (seed, i) alone.
    """

    mode: str
    level: GridLevel
    alphabet: NoiseAlphabet
    count: int
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in ("exhaustive", "sampled"):
            raise NoiseError(f"unknown ensemble mode {self.mode!r}")
        if self.count < 1:
            raise NoiseError("ensemble must contain at least one path")
        if self.mode == "sampled" and self.seed is None:
            raise NoiseError("sampled ensembles need a seed")

    def descriptor(self) -> dict:
        return {
            "mode": self.mode,
            "n": self.level.n,
            "alphabet": list(self.alphabet.symbols),
            "count": self.count,
            "seed": self.seed,
        }

    def _values_for(self, start: int, stop: int) -> np.ndarray:
        points = self.level.n + 1
        scaled = self.alphabet.scaled(self.level)
        if self.mode == "exhaustive":
            digits = _digit_matrix(np.arange(start, stop, dtype=np.int64), self.alphabet.size, points)
        else:
            idx = np.arange(start, stop, dtype=np.int64)
            counters = idx[:, None] * points + np.arange(points, dtype=np.int64)[None, :]
            u = _uniform01(self.seed, counters.reshape(-1)).reshape(stop - start, points)
            digits = np.minimum((u * self.alphabet.size).astype(np.int64), self.alphabet.size - 1)
        return scaled[digits]

    def batches(self, batch_size: int = _DEFAULT_BATCH) -> Iterator[tuple[int, np.ndarray]]:
        """Yield (first path index, value matrix [batch, n+1]) in index order."""
        for start in range(0, self.count, batch_size):
            stop = min(start + batch_size, self.count)
            yield start, self._values_for(start, stop)

    def path(self, index: int) -> NoisePath:
        if not 0 <= index < self.count:
            raise NoiseError(f"path index {index} out of range")
        values = self._values_for(index, index + 1)[0]
        return NoisePath(self.level, values, path_index=index)

    def paths(self) -> Iterator[NoisePath]:
        for start, block in self.batches():
            for row, values in enumerate(block):
                yield NoisePath(self.level, values, path_index=start + row)


def _digit_matrix(indices: np.ndarray, base: int, places: int) -> np.ndarray:
    powers = base ** np.arange(places - 1, -1, -1, dtype=np.int64)
    return (indices[:, None] // powers[None, :]) % base


def enumerate_paths(
    level: GridLevel,
    alphabet: NoiseAlphabet | None = None,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> NoiseEnsemble:
    """All |alphabet|^(n+1) noise paths at this level, exactly once each."""
    alphabet = alphabet or NoiseAlphabet.white()
    count = alphabet.size ** (level.n + 1)
    if count > cap:
        raise NoiseError(
            f"exhaustive enumeration of {count} paths exceeds the cap {cap}; use sampled mode"
        )
    return NoiseEnsemble("exhaustive", level, alphabet, count)


def sample_paths(
    level: GridLevel,
    count: int,
    seed: int,
    alphabet: NoiseAlphabet | None = None,
) -> NoiseEnsemble:
    """A reproducible sample of noise paths, uniform over the alphabet per point."""
    if count < 1:
        raise NoiseError("sample count must be at least 1")
    alphabet = alphabet or NoiseAlphabet.white()
    return NoiseEnsemble("sampled", level, alphabet, count, seed=int(seed))


@dataclass(frozen=True)
class ConditionalEnsemble:
    """All exhaustive paths agreeing with a fixed prefix on its grid points.

    The suffix count |alphabet|^(n+1-p) does not depend on which prefix was
    fixed; that independence is what makes conditional averages exact.
    """

    base: NoiseEnsemble
    prefix: tuple[float, ...]

    def __post_init__(self):
        if self.base.mode != "exhaustive":
            raise NoiseError("conditioning on a prefix requires an exhaustive ensemble")
        if len(self.prefix) > self.base.level.n + 1:
            raise NoiseError("prefix longer than the path")
        _validate_symbols(self.base.alphabet, self.base.level, np.asarray(self.prefix))

    @property
    def level(self) -> GridLevel:
        return self.base.level

    @property
    def count(self) -> int:
        free = self.base.level.n + 1 - len(self.prefix)
        return self.base.alphabet.size**free

    def batches(self, batch_size: int = _DEFAULT_BATCH) -> Iterator[tuple[int, np.ndarray]]:
        level = self.base.level
        points = level.n + 1
        free = points - len(self.prefix)
        scaled = self.base.alphabet.scaled(level)
        prefix_row = np.asarray(self.prefix, dtype=np.float64)
        for start in range(0, self.count, batch_size):
            stop = min(start + batch_size, self.count)
            block = np.empty((stop - start, points))
            block[:, : len(self.prefix)] = prefix_row
            if free:
                digits = _digit_matrix(np.arange(start, stop, dtype=np.int64), self.base.alphabet.size, free)
                block[:, len(self.prefix) :] = scaled[digits]
            yield start, block

    def paths(self) -> Iterator[NoisePath]:
        for start, block in self.batches():
            for row, values in enumerate(block):
                yield NoisePath(self.level, values, path_index=start + row)


def conditional(ensemble: NoiseEnsemble, prefix: Sequence[float] | NoisePath) -> ConditionalEnsemble:
    """Restrict an exhaustive ensemble to paths matching a prefix on [0, s).

    ``prefix`` holds the fixed values at grid points 0..p-1 (pass a plain
    sequence, or a NoisePath together with slicing done by the caller).
    """
    if isinstance(prefix, NoisePath):
        values = tuple(float(v) for v in prefix.values)
    else:
        values = tuple(float(v) for v in prefix)
    return ConditionalEnsemble(ensemble, values)


@dataclass(frozen=True)
class ExpectationResult:
    mean: float
    stderr: float
    count: int


def _iter_values(ensemble, phi: Callable[[NoisePath], float]) -> Iterator[float]:
    for path in ensemble.paths():
        value = float(phi(path))
        if not math.isfinite(value):
            raise NoiseError(f"functional returned a non-finite value for path {path.path_index}")
        yield value


def expectation_detail(ensemble, phi: Callable[[NoisePath], float]) -> ExpectationResult:
    """Uniform average of a path functional, with standard error when sampled.

    Exhaustive ensembles give the exact counting mean; the summation is
    exactly rounded (fsum), so the result does not depend on iteration
    batching.
    """
    values = list(_iter_values(ensemble, phi))
    count = len(values)
    mean = math.fsum(values) / count
    mode = getattr(ensemble, "mode", None) or ensemble.base.mode
    if mode == "sampled" and count > 1:
        var = math.fsum((v - mean) ** 2 for v in values) / (count - 1)
        stderr = math.sqrt(var / count)
    else:
        stderr = 0.0
    return ExpectationResult(mean=mean, stderr=stderr, count=count)


def expectation(ensemble, phi: Callable[[NoisePath], float]) -> float:
    """Uniform average of a path functional over the ensemble."""
    return expectation_detail(ensemble, phi).mean
