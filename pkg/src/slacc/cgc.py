"""Channel grouping compression and the baseline compressors.

Channels are clustered on their importance scores with exact 1-D k-means,
each group gets ``clamp(floor(mean score), b_min, b_max)`` bits, and every
channel is linearly quantised against its group's (min, max) range.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .acii import ImportanceVector
from .core import Direction, SmashedData, channels_matrix, from_channels


@dataclass(frozen=True, eq=False)
class ChannelGrouping:
    assignment: np.ndarray  # [C] group ids, ascending centroid order
    centroids: np.ndarray | None  # [g]; None when decoded from the wire

    @property
    def g(self) -> int:
        return int(self.assignment.max()) + 1 if self.assignment.size else 0

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == j)

    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.g)


@dataclass(frozen=True, eq=False)
class CompressionPlan:
    grouping: ChannelGrouping
    group_entropy: np.ndarray | None
    bits: np.ndarray  # [g] ints
    ranges: np.ndarray  # [g, 2] (x_min, x_max), exactly representable in f32

    @property
    def g(self) -> int:
        return len(self.bits)

    def channel_bits(self) -> np.ndarray:
        return self.bits[self.grouping.assignment]


@dataclass(frozen=True, eq=False)
class QuantizedSmashed:
    plan: CompressionPlan
    codes: np.ndarray  # [C, N] uint32
    shape: tuple[int, int, int, int]
    round: int
    direction: Direction

    def payload_bits(self) -> int:
        """Sum over channels of N * b_group(c)."""
        n = self.codes.shape[1]
        return int(n * self.plan.channel_bits().sum())

    def __eq__(self, other):
        # Compares what travels on the wire; centroids and group entropies do not.
        if not isinstance(other, QuantizedSmashed):
            return NotImplemented
        return (
            tuple(self.shape) == tuple(other.shape)
            and self.round == other.round
            and self.direction == other.direction
            and np.array_equal(self.plan.grouping.assignment, other.plan.grouping.assignment)
            and np.array_equal(self.plan.bits, other.plan.bits)
            and np.array_equal(self.plan.ranges, other.plan.ranges)
            and np.array_equal(self.codes, other.codes)
        )


# -- 1-D k-means ---------------------------------------------------------------

def kmeans_objective(values, assignment) -> float:
    """Within-group sum of squared deviations from the group mean."""
    v = np.asarray(values, dtype=np.float64)
    a = np.asarray(assignment)
    total = 0.0
    for j in np.unique(a):
        m = v[a == j]
        total += float(((m - m.mean()) ** 2).sum())
    return total


def _segment_costs(x: np.ndarray) -> np.ndarray:
    n = len(x)
    cost = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            seg = x[i : j + 1]
            cost[i, j] = ((seg - seg.mean()) ** 2).sum()
    return cost


def group_channels(entropies, g: int, seed: int = 0) -> ChannelGrouping:
    """Partition channels into ``g`` non-empty groups minimising within-group SSE.

    Solved exactly by dynamic programming over the sorted scores (optimal 1-D
    clusters are contiguous runs), so the result is the global optimum and
    therefore also a fixed point of Lloyd's iteration. ``seed`` is accepted for
    interface symmetry with the sampling compressors and is unused.
    """
    x = np.asarray(entropies, dtype=np.float64).reshape(-1)
    c = x.size
    if g < 1:
        raise ValueError("group count must be >= 1")
    if g > c:
        raise ValueError(f"group count {g} exceeds channel count {c}")
    if not np.all(np.isfinite(x)):
        raise ValueError("entropies must be finite")

    order = np.argsort(x, kind="stable")
    xs = x[order]
    cost = _segment_costs(xs)

    # best[k, i]: optimal cost of splitting xs[: i + 1] into k + 1 groups
    best = np.full((g, c), np.inf)
    cut = np.zeros((g, c), dtype=np.int64)
    best[0] = cost[0]
    for k in range(1, g):
        for i in range(k, c):
            cands = best[k - 1, k - 1 : i] + cost[k : i + 1, i]
            m = int(np.argmin(cands))
            best[k, i] = cands[m]
            cut[k, i] = m + k  # first index of the last group

    labels_sorted = np.empty(c, dtype=np.int64)
    end = c - 1
    for k in range(g - 1, -1, -1):
        start = cut[k, end] if k > 0 else 0
        labels_sorted[start : end + 1] = k
        end = start - 1

    assignment = np.empty(c, dtype=np.int64)
    assignment[order] = labels_sorted
    centroids = np.array([x[assignment == j].mean() for j in range(g)])
    return ChannelGrouping(assignment=assignment, centroids=centroids)


def group_mean_entropy(grouping: ChannelGrouping, entropies) -> np.ndarray:
    h = np.asarray(entropies, dtype=np.float64).reshape(-1)
    if h.size != grouping.assignment.size:
        raise ValueError(
            f"grouping covers {grouping.assignment.size} channels, got {h.size} entropies"
        )
    return np.array([h[grouping.assignment == j].mean() for j in range(grouping.g)])


def allocate_bits(h_group: float, b_min: int = 2, b_max: int = 8) -> int:
    if not 1 <= b_min <= b_max <= 32:
        raise ValueError(f"need 1 <= b_min <= b_max <= 32, got ({b_min}, {b_max})")
    return int(min(b_max, max(b_min, math.floor(h_group))))


# -- linear quantiser ------------------------------------------------------------

def round_half_away(y: np.ndarray) -> np.ndarray:
    """Nearest integer, ties away from zero (not numpy's ties-to-even)."""
    y = np.asarray(y, dtype=np.float64)
    a = np.abs(y)
    fl = np.floor(a)
    r = np.where(a - fl >= 0.5, fl + 1.0, fl)
    return np.copysign(r, y)


def _check_bits(b: int) -> None:
    if not 1 <= b <= 32:
        raise ValueError(f"bit width must lie in [1, 32], got {b}")


def quantize(values, b: int, x_min: float, x_max: float) -> np.ndarray:
    _check_bits(b)
    if not x_min <= x_max:
        raise ValueError(f"empty range [{x_min}, {x_max}]")
    x = np.asarray(values, dtype=np.float64)
    if x.size and (x.min() < x_min or x.max() > x_max):
        raise ValueError("value outside quantisation range")
    if x_max == x_min:
        return np.zeros(x.shape, dtype=np.uint32)
    levels = float(2**b - 1)
    y = (x - x_min) / (x_max - x_min) * levels
    return np.clip(round_half_away(y), 0, levels).astype(np.uint32)


def dequantize(codes, b: int, x_min: float, x_max: float) -> np.ndarray:
    _check_bits(b)
    q = np.asarray(codes)
    levels = 2**b - 1
    if q.size and int(q.max()) > levels:
        raise ValueError(f"code exceeds {b}-bit range")
    if x_max == x_min:
        return np.full(q.shape, float(x_min))
    return x_min + q.astype(np.float64) / levels * (x_max - x_min)


def f32_range(lo: float, hi: float) -> tuple[float, float]:
    """Widen (lo, hi) outward to the nearest float32 values."""
    lo32, hi32 = np.float32(lo), np.float32(hi)
    if float(lo32) > lo:
        lo32 = np.nextafter(lo32, np.float32(-np.inf))
    if float(hi32) < hi:
        hi32 = np.nextafter(hi32, np.float32(np.inf))
    return float(lo32), float(hi32)


def _quantize_channels(s: SmashedData, grouping: ChannelGrouping, bits, group_entropy) -> QuantizedSmashed:
    chans = s.channels()
    g = grouping.g
    ranges = np.empty((g, 2))
    for j in range(g):
        block = chans[grouping.assignment == j]
        ranges[j] = f32_range(block.min(), block.max())
    codes = np.empty(chans.shape, dtype=np.uint32)
    for c in range(chans.shape[0]):
        j = grouping.assignment[c]
        codes[c] = quantize(chans[c], int(bits[j]), ranges[j, 0], ranges[j, 1])
    plan = CompressionPlan(grouping, group_entropy, np.asarray(bits, dtype=np.int64), ranges)
    return QuantizedSmashed(plan, codes, tuple(s.shape), s.round, s.direction)


def compress(
    s: SmashedData,
    scores: ImportanceVector | np.ndarray,
    g: int = 4,
    b_min: int = 2,
    b_max: int = 8,
    seed: int = 0,
) -> QuantizedSmashed:
    h = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    if h.size != s.num_channels:
        raise ValueError(f"{h.size} scores for {s.num_channels} channels")
    grouping = group_channels(h, min(g, s.num_channels), seed)
    h_group = group_mean_entropy(grouping, h)
    bits = np.array([allocate_bits(v, b_min, b_max) for v in h_group])
    return _quantize_channels(s, grouping, bits, h_group)


def decompress(q: QuantizedSmashed) -> SmashedData:
    plan = q.plan
    c = q.shape[1]
    a = plan.grouping.assignment
    if a.size != c or q.codes.shape[0] != c or len(plan.ranges) != plan.g or a.max() >= plan.g:
        raise ValueError("malformed compression plan")
    out = np.empty(q.codes.shape)
    for ch in range(c):
        j = a[ch]
        out[ch] = dequantize(q.codes[ch], int(plan.bits[j]), plan.ranges[j, 0], plan.ranges[j, 1])
    return SmashedData(from_channels(out, q.shape), q.round, q.direction)


# -- baselines -------------------------------------------------------------------

def baseline_uniform(s: SmashedData, b: int) -> QuantizedSmashed:
    """One group, fixed width ``b``, global min/max."""
    _check_bits(b)
    grouping = ChannelGrouping(np.zeros(s.num_channels, dtype=np.int64), None)
    return _quantize_channels(s, grouping, [b], None)


@dataclass(frozen=True, eq=False)
class SparseSmashed:
    indices: np.ndarray  # ascending flat indices into the [B, C, H, W] tensor
    values: np.ndarray  # float32
    shape: tuple[int, int, int, int]
    round: int
    direction: Direction

    def to_smashed(self) -> SmashedData:
        dense = np.zeros(int(np.prod(self.shape)))
        dense[self.indices] = self.values.astype(np.float64)
        return SmashedData(dense.reshape(self.shape), self.round, self.direction)

    def __eq__(self, other):
        if not isinstance(other, SparseSmashed):
            return NotImplemented
        return (
            tuple(self.shape) == tuple(other.shape)
            and self.round == other.round
            and self.direction == other.direction
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


def baseline_topk(s: SmashedData, keep_fraction: float, rand_fraction: float = 0.0, seed: int = 0) -> SparseSmashed:
    """Keep the largest-magnitude elements plus a uniform sample of the rest."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if not 0.0 <= rand_fraction < 1.0 or keep_fraction + rand_fraction > 1.0:
        raise ValueError(f"invalid rand_fraction {rand_fraction} for keep_fraction {keep_fraction}")
    flat = s.tensor.reshape(-1)
    total = flat.size
    n_keep = min(total, math.ceil(keep_fraction * total))
    n_rand = math.ceil(rand_fraction * total)
    # stable sort on -|x|: equal magnitudes keep the lower flat index first
    order = np.argsort(-np.abs(flat), kind="stable")
    top = order[:n_keep]
    rest = order[n_keep:]
    n_rand = min(n_rand, rest.size)
    if n_rand:
        rng = np.random.default_rng(seed)
        extra = rng.choice(np.sort(rest), size=n_rand, replace=False)
        top = np.concatenate([top, extra])
    idx = np.sort(top).astype(np.uint32)
    return SparseSmashed(idx, flat[idx].astype(np.float32), tuple(s.shape), s.round, s.direction)
