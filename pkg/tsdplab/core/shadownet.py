"""
ShadowNet weight obfuscation and its recovery attack.

Obfuscation: for n filters w_1..w_n and m = ceil(r*n) slots, draw m-n random
mask filters f_1..f_{m-n}, add a randomly chosen mask to each filter, append
the raw masks and publish the result under a random permutation.

Attack: differences of two published filters sharing the same mask have low
variance (either w_a or w_a - w_b). With the public layer as a reference,
filters connected by low-variance differences are grouped, each group's pure
mask becomes its root and the weights are read off as differences to it.
Without a reference every low-variance difference is kept with both signs.
Positions are recovered by nearest public filter.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- mask_slot_count(n, r): Number of published filters m
- obfuscate(weights, r, seed, mask_std, mask_scale, identity): Build an ObfuscatedLayer
- deobfuscate(obf): Defender-side inverse using the secret
- attack_unmask(filters, var_threshold, reference, tol): Candidate weight filters
- attack_recover_positions(candidates, public_layer, truth, mode): RecoveryReport
- attack_layer(obf, public_layer, var_threshold, mode): Unmask + recover in one call
- calibrated_threshold(public_layer, factor): Threshold scaled to the public weights

PRIVATE FUNCTIONS (Internal Implementation):
-------------------------------------------
- _low_variance_pairs(flat, threshold): Ordered pairs with low difference variance
- _groups(m, pairs): Union-find connected components
- _choose_root(flat, members, reference): Pure-mask member of a group
- _signed_differences(flat, pairs): Both signs of every pair, exact duplicates dropped
- _rooted_differences(flat, pairs, ref, tol): Differences to each group root

DATA CLASSES:
-------------
- ObfuscationSecret: mask assignment and permutation (defender only)
- ObfuscatedLayer: published filters plus the secret
- RecoveryReport: recovered filters and recovery rates
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from tsdplab.utils.logging import TSDPValidationError, logger
from tsdplab.utils.rng import make_rng

DEFAULT_R = 1.2
DEFAULT_VAR_THRESHOLD = 0.01
DEFAULT_MASK_SCALE = 10.0
MATCH_ATOL = 1e-6


@dataclass
class ObfuscationSecret:
    """Mask assignment (filter i uses mask assignment[i]) and permutation.

    Published filter j is w'[perm[j]], where w' = [w_1 + f_a1, ..., w_n + f_an, f_1, ...].
    """

    assignment: np.ndarray
    perm: np.ndarray

    def positions(self, n: int) -> Tuple[np.ndarray, np.ndarray]:
        """Published positions of (w_i + mask) and of the mask used by w_i."""
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        return inv[:n], inv[n + self.assignment]


@dataclass
class ObfuscatedLayer:
    """Published filters of one layer; `secret` never leaves the defender."""

    filters: np.ndarray
    n: int
    r: float
    secret: ObfuscationSecret = field(repr=False)
    mask_std: float = 0.0

    @property
    def m(self) -> int:
        return int(self.filters.shape[0])


@dataclass
class RecoveryReport:
    """Filters recovered per public position, with rates scored against truth."""

    recovered_filters: np.ndarray
    weight_recovery_rate: Optional[float]
    position_recovery_rate: Optional[float]
    n_candidates: int
    assignment: List[int]
    mode: str = "greedy"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "weight_recovery_rate": self.weight_recovery_rate,
            "position_recovery_rate": self.position_recovery_rate,
            "n_candidates": self.n_candidates,
            "assignment": list(self.assignment),
            "mode": self.mode,
            "filter_shape": list(self.recovered_filters.shape),
        }


def mask_slot_count(n: int, r: float) -> int:
    # round() guards against ceil(1.2 * 5) == 7
    return max(n + 1, int(math.ceil(round(r * n, 9))))


def obfuscate(
    weights: np.ndarray,
    r: float = DEFAULT_R,
    seed: int = 0,
    mask_std: Optional[float] = None,
    mask_scale: float = DEFAULT_MASK_SCALE,
    identity: bool = False,
) -> ObfuscatedLayer:
    """
    Obfuscate the n filters along axis 0 of `weights`.

    Masks are N(0, mask_std^2); by default mask_std is `mask_scale` times the
    weight standard deviation. `identity` gives zero masks and no permutation.
    """
    weights = np.asarray(weights, dtype=np.float64)
    n = int(weights.shape[0]) if weights.ndim else 0
    if n < 1:
        raise TSDPValidationError("obfuscate needs at least one filter")
    if r <= 1:
        raise TSDPValidationError(f"r must be > 1 to leave room for masks, got {r}")

    m = mask_slot_count(n, r)
    rng = make_rng(seed, "shadownet", n, m)
    shape = weights.shape[1:]
    if identity:
        std = 0.0
        masks = np.zeros((m - n,) + shape)
        assignment = np.zeros(n, dtype=np.int64)
        perm = np.arange(m)
    else:
        w_std = float(weights.std())
        std = mask_std if mask_std is not None else mask_scale * (w_std or 1.0)
        masks = rng.normal(0.0, std, size=(m - n,) + shape)
        assignment = rng.integers(0, m - n, size=n)
        perm = rng.permutation(m)

    staged = np.concatenate([weights + masks[assignment], masks])
    return ObfuscatedLayer(
        filters=staged[perm],
        n=n,
        r=r,
        secret=ObfuscationSecret(assignment=assignment, perm=perm),
        mask_std=std,
    )


def deobfuscate(obf: ObfuscatedLayer) -> np.ndarray:
    staged = np.empty_like(obf.filters)
    staged[obf.secret.perm] = obf.filters
    masks = staged[obf.n:]
    return staged[:obf.n] - masks[obf.secret.assignment]


def calibrated_threshold(public_layer: np.ndarray, factor: float = 4.0) -> float:
    """Variance threshold between weight-difference and mask-difference scales."""
    var = float(np.var(np.asarray(public_layer, dtype=np.float64)))
    return factor * var if var > 0 else DEFAULT_VAR_THRESHOLD


def _low_variance_pairs(flat: np.ndarray, threshold: float) -> List[Tuple[int, int]]:
    m = flat.shape[0]
    pairs = []
    for i in range(m):
        diffs = flat[i] - flat
        var = diffs.var(axis=1)
        for j in np.flatnonzero(var < threshold):
            if j != i:
                pairs.append((i, int(j)))
    return pairs


def _groups(m: int, pairs: Sequence[Tuple[int, int]]) -> List[List[int]]:
    parent = list(range(m))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    comps: Dict[int, List[int]] = {}
    for i in range(m):
        comps.setdefault(find(i), []).append(i)
    return [members for members in comps.values() if len(members) > 1]


def _choose_root(flat: np.ndarray, members: List[int], reference: np.ndarray) -> int:
    best, best_score = members[0], math.inf
    for c in members:
        implied = np.stack([flat[j] - flat[c] for j in members if j != c])
        d = ((implied[:, None, :] - reference[None, :, :]) ** 2).sum(axis=2)
        score = float(d.min(axis=1).sum())
        if score < best_score:
            best, best_score = c, score
    return best


def attack_unmask(
    filters: Union[np.ndarray, ObfuscatedLayer],
    var_threshold: float = DEFAULT_VAR_THRESHOLD,
    reference: Optional[np.ndarray] = None,
    tol: Optional[float] = None,
) -> np.ndarray:
    """
    Candidate weight filters recovered from published filters.

    All ordered pairwise differences with variance below `var_threshold` are
    collected. With a `reference` each connected group gets one root (the pure
    mask) and its differences to the root are kept; any other low-variance
    difference that equals the difference of two kept candidates within mean
    squared error `tol` (default `var_threshold`) is redundant and dropped.

    Without a reference the root is ambiguous (a two-member group scores the
    same either way), so both signed differences of every low-variance pair are
    kept and only exact duplicates are dropped. The result is then a superset
    of the true filters.
    """
    if var_threshold <= 0:
        raise TSDPValidationError("var_threshold must be > 0")
    published = filters.filters if isinstance(filters, ObfuscatedLayer) else filters
    published = np.asarray(published, dtype=np.float64)
    if published.shape[0] < 2:
        return np.zeros((0,) + published.shape[1:])
    shape = published.shape[1:]
    flat = published.reshape(published.shape[0], -1)
    ref = None if reference is None else np.asarray(reference, dtype=np.float64).reshape(
        np.asarray(reference).shape[0], -1)
    tol = var_threshold if tol is None else tol

    pairs = _low_variance_pairs(flat, var_threshold)
    if ref is None:
        candidates, dropped = _signed_differences(flat, pairs)
    else:
        candidates, dropped = _rooted_differences(flat, pairs, ref, tol)

    logger.debug(
        f"attack_unmask: {len(pairs)} low-variance pairs, "
        f"{len(candidates)} candidates, {dropped} redundant"
    )
    if not candidates:
        return np.zeros((0,) + shape)
    return np.stack(candidates).reshape((len(candidates),) + shape)


def _signed_differences(
    flat: np.ndarray, pairs: Sequence[Tuple[int, int]]
) -> Tuple[List[np.ndarray], int]:
    candidates: List[np.ndarray] = []
    dropped = 0
    for i, j in pairs:
        diff = flat[i] - flat[j]
        if any(np.allclose(diff, c, rtol=0.0, atol=MATCH_ATOL) for c in candidates):
            dropped += 1
        else:
            candidates.append(diff)
    return candidates, dropped


def _rooted_differences(
    flat: np.ndarray, pairs: Sequence[Tuple[int, int]], ref: np.ndarray, tol: float
) -> Tuple[List[np.ndarray], int]:
    candidates: List[np.ndarray] = []
    dropped = 0
    for members in _groups(flat.shape[0], pairs):
        root = _choose_root(flat, members, ref)
        kept = {j: flat[j] - flat[root] for j in members if j != root}
        kept[root] = np.zeros(flat.shape[1])
        candidates.extend(v for j, v in kept.items() if j != root)
        member_set = set(members)
        for i, j in pairs:
            if i not in member_set or j == root:
                continue
            diff = flat[i] - flat[j]
            if np.mean((diff - (kept[i] - kept[j])) ** 2) < tol:
                dropped += 1
            else:
                candidates.append(diff)
    return candidates, dropped


def attack_recover_positions(
    candidates: np.ndarray,
    public_layer: np.ndarray,
    truth: Optional[np.ndarray] = None,
    mode: str = "greedy",
) -> RecoveryReport:
    """
    Assign candidates to public filter positions by L2 distance.

    `greedy` sends each candidate to its nearest public filter (several may
    share a position); `hungarian` solves a one-to-one assignment. Each
    position keeps its closest assigned candidate and falls back to the public
    filter when none was assigned. Rates need the defender's `truth`.
    """
    public_layer = np.asarray(public_layer, dtype=np.float64)
    n = public_layer.shape[0]
    pub = public_layer.reshape(n, -1)
    cand = np.asarray(candidates, dtype=np.float64).reshape(len(candidates), -1) \
        if len(candidates) else np.zeros((0, pub.shape[1]))

    dist = ((cand[:, None, :] - pub[None, :, :]) ** 2).sum(axis=2)
    if mode == "greedy":
        assign = dist.argmin(axis=1) if cand.shape[0] else np.zeros(0, dtype=np.int64)
        pairs = list(zip(range(cand.shape[0]), assign))
    elif mode == "hungarian":
        rows, cols = linear_sum_assignment(dist) if cand.shape[0] else ([], [])
        pairs = list(zip(rows, cols))
        assign = np.full(cand.shape[0], -1, dtype=np.int64)
        for row, col in pairs:
            assign[row] = col
    else:
        raise TSDPValidationError(f"Unknown assignment mode '{mode}'")

    recovered = pub.copy()
    best = np.full(n, np.inf)
    for ci, pos in pairs:
        if dist[ci, pos] < best[pos]:
            best[pos] = dist[ci, pos]
            recovered[pos] = cand[ci]

    weight_rate = position_rate = None
    if truth is not None:
        tru = np.asarray(truth, dtype=np.float64).reshape(n, -1)
        if cand.shape[0]:
            hit = [bool(np.any(np.all(np.abs(cand - t) <= MATCH_ATOL, axis=1))) for t in tru]
        else:
            hit = [False] * n
        weight_rate = float(np.mean(hit))
        position_rate = float(np.mean(np.all(np.abs(recovered - tru) <= MATCH_ATOL, axis=1)))

    return RecoveryReport(
        recovered_filters=recovered.reshape(public_layer.shape),
        weight_recovery_rate=weight_rate,
        position_recovery_rate=position_rate,
        n_candidates=int(cand.shape[0]),
        assignment=[int(a) for a in assign],
        mode=mode,
    )


def attack_layer(
    obf: ObfuscatedLayer,
    public_layer: np.ndarray,
    var_threshold: Optional[float] = None,
    mode: str = "greedy",
    truth: Optional[np.ndarray] = None,
) -> RecoveryReport:
    """Run unmasking and position recovery on one published layer."""
    threshold = var_threshold if var_threshold is not None else \
        calibrated_threshold(public_layer)
    candidates = attack_unmask(obf.filters, threshold, reference=public_layer)
    return attack_recover_positions(candidates, public_layer, truth=truth, mode=mode)
