"""Kuhn-Munkres assignment and the masked-tag losses built on it.

The tag-prediction loss scores a set of masked tags without caring which
masked span each tag came from: a minimum-cost assignment between spans and
target tags is found with cost ``1 - p`` (bounded), and the loss is the
negative log-likelihood at that assignment.  Token order inside a multi-token
tag is fixed, so a k-token target tag may only fill a k-token span; blocks of
different lengths are matched separately.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .batching import MaskSlot
from .errors import BlockLengthMismatch, EmptyPlan, NonFinite, NonSquare

_TIE_TOL = 1e-12


@dataclass(frozen=True)
class AssignmentResult:
    """``perm[i]`` is the target index assigned to prediction ``i``."""

    perm: tuple[int, ...]
    total_cost: float
    loss: float = float("nan")


def _solve(cost: np.ndarray) -> tuple[list[int], float]:
    """O(n^3) shortest-augmenting-path Hungarian method with potentials."""
    n = cost.shape[0]
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match_row = [0] * (n + 1)  # match_row[j] = row (1-based) holding column j
    way = [0] * (n + 1)
    rows = cost.tolist()
    for i in range(1, n + 1):
        match_row[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match_row[j0]
            r = rows[i0 - 1]
            ui = u[i0]
            delta, j1 = inf, 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = r[j - 1] - ui - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[match_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_row[j0] = match_row[j1]
            j0 = j1
    perm = [0] * n
    for j in range(1, n + 1):
        perm[match_row[j] - 1] = j - 1
    return perm, sum(rows[i][perm[i]] for i in range(n))


def hungarian(cost) -> AssignmentResult:
    """Minimum-cost perfect assignment of rows (predictions) to columns (targets).

    Among optimal permutations the lexicographically smallest is returned:
    rows are fixed one at a time to the lowest column that still admits an
    optimal completion.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise NonSquare(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise NonFinite("cost matrix contains NaN or Inf")
    n = c.shape[0]
    if n == 0:
        return AssignmentResult((), 0.0)
    _, best = _solve(c)
    tol = _TIE_TOL * max(1.0, float(np.abs(c).max()) * n)

    rows = list(range(n))
    cols = list(range(n))
    perm = [0] * n
    fixed = 0.0
    for i in range(n):
        rows.remove(i)
        for j in sorted(cols):
            rest = [x for x in cols if x != j]
            sub = c[np.ix_(rows, rest)]
            tail = _solve(sub)[1] if rows else 0.0
            if fixed + c[i, j] + tail <= best + tol:
                perm[i] = j
                fixed += c[i, j]
                cols.remove(j)
                break
    total = float(sum(c[i, perm[i]] for i in range(n)))
    return AssignmentResult(tuple(perm), total)


def brute_force_assignment(cost) -> AssignmentResult:
    """Exhaustive minimum over all permutations (first minimum in lexicographic order)."""
    from itertools import permutations

    c = np.asarray(cost, dtype=np.float64)
    n = c.shape[0]
    if n == 0:
        return AssignmentResult((), 0.0)
    perms = np.array(list(permutations(range(n))), dtype=np.int64)
    totals = np.zeros(len(perms))
    for i in range(n):
        totals = totals + c[i, perms[:, i]]
    k = int(np.argmin(totals))
    return AssignmentResult(tuple(int(x) for x in perms[k]), float(totals[k]))


# ---------------------------------------------------------------- mask plans


@dataclass(frozen=True)
class _Group:
    length: int
    spans: list[list[int]]  # slot indices per masked block, in position order
    targets: list[list[int]]  # target token ids per masked block


def _blocks(slots: Sequence[MaskSlot]) -> list[list[int]]:
    """Slot indices grouped by owning block, in order of first appearance."""
    order: list[object] = []
    groups: dict[object, list[int]] = {}
    for idx, slot in enumerate(slots):
        key = ("slot", idx) if slot.block is None else slot.block
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(idx)
    for key in order:
        groups[key].sort(key=lambda i: slots[i].position)
    return [groups[k] for k in order]


def _length_groups(slots: Sequence[MaskSlot]) -> list[_Group]:
    by_len: dict[int, _Group] = {}
    for block in _blocks(slots):
        pos = [slots[i].position for i in block]
        if any(b - a != 1 for a, b in zip(pos, pos[1:])):
            raise BlockLengthMismatch(f"masked block at positions {pos} is not contiguous (partially masked tag?)")
        g = by_len.setdefault(len(block), _Group(len(block), [], []))
        g.spans.append(block)
        g.targets.append([slots[i].target_id for i in block])
    return [by_len[k] for k in sorted(by_len)]


def _check(probs: np.ndarray, slots: Sequence[MaskSlot]) -> np.ndarray:
    if len(slots) == 0:
        raise EmptyPlan("no masked slots")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != len(slots):
        raise BlockLengthMismatch(f"{probs.shape[0] if probs.ndim else 0} distributions for {len(slots)} slots")
    return probs


def _neg_log(p: float) -> float:
    return float(-np.log(p)) if p > 0 else float("inf")


def match_targets(probs, slots: Sequence[MaskSlot]) -> tuple[np.ndarray, AssignmentResult]:
    """Target token per slot under the minimum-cost valid assignment.

    Returns the per-slot target ids and the token-level assignment, where
    ``perm[i]`` indexes into ``slots`` (slot ``i`` receives the original
    target of slot ``perm[i]``).
    """
    probs = _check(probs, slots)
    n = len(slots)
    perm = list(range(n))
    total = 0.0
    for g in _length_groups(slots):
        m = len(g.spans)
        cost = np.zeros((m, m))
        for a, span in enumerate(g.spans):
            for b, tgt in enumerate(g.targets):
                cost[a, b] = sum(1.0 - probs[s, t] for s, t in zip(span, tgt))
        res = hungarian(cost)
        total += res.total_cost
        for a, b in enumerate(res.perm):
            for s_from, s_to in zip(g.spans[a], g.spans[b]):
                perm[s_from] = s_to
    targets = np.array([slots[perm[i]].target_id for i in range(n)], dtype=np.int64)
    loss = sum(_neg_log(probs[i, targets[i]]) for i in range(n))
    return targets, AssignmentResult(tuple(perm), total, loss)


def vivo_loss(probs, slots: Sequence[MaskSlot]) -> tuple[float, AssignmentResult]:
    """Set-matched masked-tag loss: sum of -log p at the minimum-cost assignment."""
    _, res = match_targets(probs, slots)
    return res.loss, res


def identity_loss(probs, slots: Sequence[MaskSlot]) -> float:
    probs = _check(probs, slots)
    return sum(_neg_log(probs[i, s.target_id]) for i, s in enumerate(slots))


def mlm_loss(probs, slots: Sequence[MaskSlot]) -> float:
    """Ordered masked-LM loss: every slot predicts its own original token."""
    return identity_loss(probs, slots)


def assignment_cost(probs, slots: Sequence[MaskSlot], perm: Sequence[int]) -> float:
    probs = _check(probs, slots)
    return float(sum(1.0 - probs[i, slots[j].target_id] for i, j in enumerate(perm)))


def format_assignment(probs, slots: Sequence[MaskSlot], vocab=None) -> str:
    """Human-readable dump of the block cost matrices and chosen assignment."""
    probs = _check(probs, slots)
    name = (lambda t: vocab.token(t)) if vocab is not None else str
    lines = []
    for g in _length_groups(slots):
        lines.append(f"block length {g.length}: {len(g.spans)} blocks")
        tgt_names = [" ".join(name(t) for t in tgt) for tgt in g.targets]
        lines.append("  targets: " + " | ".join(tgt_names))
        for span in g.spans:
            row = [sum(1.0 - probs[s, t] for s, t in zip(span, tgt)) for tgt in g.targets]
            pos = [slots[s].position for s in span]
            lines.append(f"  slots@{pos}: " + " ".join(f"{x:.4f}" for x in row))
    _, res = match_targets(probs, slots)
    lines.append(f"perm {list(res.perm)} total_cost {res.total_cost:.6f} loss {res.loss:.6f}")
    return "\n".join(lines)
