"""Exact expectation identities on exhaustive ensembles.

On an exhaustive ensemble with a symmetric alphabet these identities hold
by counting, not asymptotically, so the checks assert equality up to
floating-point roundoff (1e-10 relative is generous):

* single-point moments: E[xi(t)] = 0, E[xi(t)^2] = n, E[xi(t) xi(s)] = 0;
* the tower property: a full-ensemble average equals the average over
  prefixes of conditional averages, for any path functional, because the
  conditional classes partition the ensemble into equal-sized blocks;
* increment orthogonality: E[F(t, x(t)) * xi(t)] = 0 and
  E[F(t, x(t)) * xi(t)^2] = n * E[F(t, x(t))] whenever F reads only the
  state, which depends on strictly earlier noise values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .expr import as_expr
from .noise import NoiseEnsemble, NoisePath, conditional, expectation
from .sde import CauchyProblem, simulate_ensemble

__all__ = [
    "MomentReport",
    "TowerReport",
    "IncrementReport",
    "moment_report",
    "tower_property_report",
    "increment_report",
]


@dataclass(frozen=True)
class MomentReport:
    """Worst-case deviations of the empirical noise moments from exact values."""

    n: int
    count: int
    max_abs_mean: float
    max_diag_deviation: float
    max_offdiag_abs: float

    def max_relative_deviation(self) -> float:
        scale = float(self.n)
        return max(
            self.max_abs_mean / scale,
            self.max_diag_deviation / scale,
            self.max_offdiag_abs / scale,
        )

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "count": self.count,
            "max_abs_mean": self.max_abs_mean,
            "max_diag_deviation": self.max_diag_deviation,
            "max_offdiag_abs": self.max_offdiag_abs,
            "max_relative_deviation": self.max_relative_deviation(),
        }


def moment_report(ensemble: NoiseEnsemble, batch_size: int = 1 << 15) -> MomentReport:
    """E[xi(t)], and the full matrix E[xi(t) xi(s)], against 0 and n*[t == s]."""
    points = ensemble.level.n + 1
    sums = np.zeros(points)
    cross = np.zeros((points, points))
    for _, block in ensemble.batches(batch_size):
        sums += block.sum(axis=0)
        cross += block.T @ block
    means = sums / ensemble.count
    second = cross / ensemble.count
    diag = np.diag(second)
    off = second - np.diag(diag)
    return MomentReport(
        n=ensemble.level.n,
        count=ensemble.count,
        max_abs_mean=float(np.max(np.abs(means))),
        max_diag_deviation=float(np.max(np.abs(diag - ensemble.level.n))),
        max_offdiag_abs=float(np.max(np.abs(off))),
    )


@dataclass(frozen=True)
class TowerReport:
    """Full-ensemble averages against prefix-decomposed averages."""

    n: int
    split_index: int
    entries: tuple[tuple[str, float, float, float], ...]  # (label, full, decomposed, |gap|)

    def max_gap(self) -> float:
        return max(entry[3] for entry in self.entries)

    def max_relative_gap(self) -> float:
        return max(
            gap / max(1.0, abs(full)) for _, full, _, gap in self.entries
        )

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "split_index": self.split_index,
            "entries": [
                {"functional": label, "full": full, "decomposed": dec, "gap": gap}
                for label, full, dec, gap in self.entries
            ],
            "max_relative_gap": self.max_relative_gap(),
        }


def tower_property_report(
    ensemble: NoiseEnsemble,
    functionals: Sequence[tuple[str, Callable[[NoisePath], float]]],
    split_index: int,
) -> TowerReport:
    """Compare E[Phi] with the mean over prefixes of conditional means.

    Exhaustive only; the prefixes run over every assignment of the first
    ``split_index`` grid points.
    """
    size = ensemble.alphabet.size
    scaled = ensemble.alphabet.scaled(ensemble.level)
    prefix_count = size**split_index
    entries = []
    for label, phi in functionals:
        full = expectation(ensemble, phi)
        partial_means = []
        for prefix_id in range(prefix_count):
            digits = []
            rest = prefix_id
            for _ in range(split_index):
                digits.append(rest % size)
                rest //= size
            digits.reverse()
            prefix = tuple(float(scaled[d]) for d in digits)
            partial_means.append(expectation(conditional(ensemble, prefix), phi))
        decomposed = math.fsum(partial_means) / prefix_count
        entries.append((label, full, decomposed, abs(full - decomposed)))
    return TowerReport(n=ensemble.level.n, split_index=split_index, entries=tuple(entries))


@dataclass(frozen=True)
class IncrementEntry:
    label: str
    time_index: int
    orthogonality_gap: float  # |E[F xi]|
    orthogonality_scale: float  # E[|F xi|]
    quadratic_gap: float  # |E[F xi^2] - n E[F]|
    quadratic_scale: float  # max(1, |n E[F]|)


@dataclass(frozen=True)
class IncrementReport:
    """E[F(t, x(t)) xi(t)] vs 0 and E[F xi(t)^2] vs n E[F], per F and t."""

    n: int
    count: int
    entries: tuple[IncrementEntry, ...]

    def max_orthogonality_rel(self) -> float:
        return max(e.orthogonality_gap / max(1.0, e.orthogonality_scale) for e in self.entries)

    def max_quadratic_rel(self) -> float:
        return max(e.quadratic_gap / e.quadratic_scale for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "count": self.count,
            "max_orthogonality_rel": self.max_orthogonality_rel(),
            "max_quadratic_rel": self.max_quadratic_rel(),
            "entries": [
                {
                    "F": e.label,
                    "time_index": e.time_index,
                    "orthogonality_gap": e.orthogonality_gap,
                    "quadratic_gap": e.quadratic_gap,
                }
                for e in self.entries
            ],
        }


def increment_report(
    problem: CauchyProblem,
    ensemble: NoiseEnsemble,
    state_functions: Sequence,
    time_indices: Sequence[int] | None = None,
    batch_size: int = 1 << 15,
) -> IncrementReport:
    """Check increment orthogonality for expressions F(t, x) along solutions.

    F is evaluated at (t_k, x(t_k)); adaptedness of the solver (x(t_k) never
    reads xi(t_k) or later) is exactly what makes these counting identities
    exact, so a nonzero gap beyond roundoff indicates a lookahead bug.
    """
    n = problem.level.n
    if time_indices is None:
        time_indices = (0, n // 2, n - 1)
    exprs = [(str(as_expr(src)), as_expr(src).vectorized()) for src in state_functions]
    trajset = simulate_ensemble(problem, ensemble, batch_size=batch_size)

    sums_f = np.zeros((len(exprs), len(time_indices)))
    sums_fxi = np.zeros_like(sums_f)
    sums_fxi2 = np.zeros_like(sums_f)
    sums_abs = np.zeros_like(sums_f)
    with np.errstate(all="ignore"):
        for _, noise_block, values in trajset.batches(with_noise=True):
            for col, k in enumerate(time_indices):
                xk = values[:, k]
                xik = noise_block[:, k]
                for row, (_, fn) in enumerate(exprs):
                    fv = np.broadcast_to(np.asarray(fn(k / n, xk), dtype=np.float64), xk.shape)
                    sums_f[row, col] += float(fv.sum())
                    sums_fxi[row, col] += float((fv * xik).sum())
                    sums_fxi2[row, col] += float((fv * xik * xik).sum())
                    sums_abs[row, col] += float(np.abs(fv * xik).sum())
    count = trajset.count
    entries = []
    for row, (label, _) in enumerate(exprs):
        for col, k in enumerate(time_indices):
            mean_f = sums_f[row, col] / count
            target = n * mean_f
            entries.append(
                IncrementEntry(
                    label=label,
                    time_index=int(k),
                    orthogonality_gap=abs(sums_fxi[row, col] / count),
                    orthogonality_scale=sums_abs[row, col] / count,
                    quadratic_gap=abs(sums_fxi2[row, col] / count - target),
                    quadratic_scale=max(1.0, abs(target)),
                )
            )
    return IncrementReport(n=n, count=count, entries=tuple(entries))
