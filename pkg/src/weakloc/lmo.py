"""Exact linear minimization over one video's integer assignments.

Minimize ``<G, Y>`` over one-hot rows subject to the fixings and the
at-least-one bags of a :class:`~weakloc.constraints.LocalBlock`.

Every free row starts at its cheapest allowed class. Bags left unsatisfied
are repaired by a depth-first branch-and-bound: pick the unsatisfied bag
with the fewest candidate rows and branch on which row covers it, cheapest
switch first. Bags are split into independent groups (no shared free
rows) and each group is searched separately.

The bound used for pruning adds, per class, the cheapest switch cost of a
row-disjoint packing of that class's unsatisfied bags. A row takes one
class, so bags of different classes need different rows, and disjoint
bags of one class do too.
"""

from __future__ import annotations

import itertools
import math
import weakref
from dataclasses import dataclass
from typing import Callable, Dict, List, Set, Tuple, Union

import numpy as np

from .constraints import ConstraintError, LocalBlock, VideoConstraintSet

BRUTE_FORCE_LIMIT = 4 ** 12  # 12 rows, 4 classes
CHUNK = 1 << 18


@dataclass(frozen=True, eq=False)
class BlockVertex:
    video_id: str
    labels: np.ndarray
    value: float
    num_classes: int

    @property
    def assignment(self) -> np.ndarray:
        Y = np.zeros((len(self.labels), self.num_classes))
        Y[np.arange(len(self.labels)), self.labels] = 1.0
        return Y


def _as_block(s: Union[LocalBlock, VideoConstraintSet]) -> LocalBlock:
    return s.compile() if isinstance(s, VideoConstraintSet) else s


def _check_G(block: LocalBlock, G) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    if G.shape != block.allowed.shape:
        raise ValueError(f"gradient block has shape {G.shape}, expected {block.allowed.shape}")
    return G


def _vertex(block: LocalBlock, G: np.ndarray, labels: np.ndarray) -> BlockVertex:
    value = math.fsum(G[np.arange(len(labels)), labels].tolist())
    labels = labels.astype(np.int64)
    labels.setflags(write=False)
    return BlockVertex(block.video_id, labels, value, block.num_classes)


class _Group:
    """Branch-and-bound over one group of bags sharing free rows.

    Coverage counts per bag are updated incrementally as rows are decided.
    """

    def __init__(self, bags: List[Tuple[int, List[int]]], regret: np.ndarray,
                 base: np.ndarray, tol: float):
        self.bags = bags
        self.base = base
        self.tol = tol
        self.decided: Dict[int, int] = {}
        self.banned: Set[Tuple[int, int]] = set()
        self.best = math.inf
        self.best_decided: Dict[int, int] = {}
        self.row_bags: Dict[int, List[int]] = {}
        for i, (_, rows) in enumerate(bags):
            for r in rows:
                self.row_bags.setdefault(r, []).append(i)
        self.cover = [sum(1 for r in rows if base[r] == k) for k, rows in bags]
        self.open = {i for i, c in enumerate(self.cover) if c == 0}
        # candidate (switch cost, row) per bag, cheapest first
        self.cands = []
        for k, rows in bags:
            c = sorted((float(regret[r, k]), r) for r in rows if regret[r, k] < math.inf)
            self.cands.append(c)

    def _set(self, r: int, k: int, sign: int):
        old = int(self.base[r])
        for i in self.row_bags[r]:
            kb = self.bags[i][0]
            delta = sign * (int(kb == k) - int(kb == old))
            if delta:
                self.cover[i] += delta
                if self.cover[i] == 0:
                    self.open.add(i)
                else:
                    self.open.discard(i)

    def decide(self, r: int, k: int):
        self.decided[r] = k
        self._set(r, k, 1)

    def undo(self, r: int):
        k = self.decided.pop(r)
        self._set(r, k, -1)

    def candidates(self, i: int) -> List[Tuple[float, int]]:
        k = self.bags[i][0]
        return [(c, r) for c, r in self.cands[i]
                if r not in self.decided and (r, k) not in self.banned]

    def bound(self, open_bags: List[int], cands: Dict[int, List[Tuple[float, int]]]
              ) -> Tuple[float, Dict[int, float]]:
        per_class: Dict[int, List[Tuple[float, Set[int]]]] = {}
        for i in open_bags:
            k = self.bags[i][0]
            c = cands[i]
            per_class.setdefault(k, []).append((c[0][0], {r for _, r in c}))
        total, contrib = 0.0, {}
        for k, items in per_class.items():
            items.sort(key=lambda t: -t[0])
            used: Set[int] = set()
            pack = 0.0
            for cost, rows in items:
                if used.isdisjoint(rows):
                    pack += cost
                    used |= rows
            contrib[k] = pack
            total += pack
        return total, contrib

    def greedy(self):
        """Cheap feasible completion used as the first incumbent."""
        done, cost = [], 0.0
        while self.open:
            i = min(self.open)
            c = self.candidates(i)
            if not c:
                break
            self.decide(c[0][1], self.bags[i][0])
            done.append(c[0][1])
            cost += c[0][0]
        if not self.open:
            self.best = cost
            self.best_decided = dict(self.decided)
        for r in reversed(done):
            self.undo(r)

    def search(self, cost: float):
        if not self.open:
            if cost < self.best - self.tol:
                self.best = cost
                self.best_decided = dict(self.decided)
            return
        open_bags = sorted(self.open)
        cands = {i: self.candidates(i) for i in open_bags}
        if any(not c for c in cands.values()):
            return
        lb, contrib = self.bound(open_bags, cands)
        if cost + lb >= self.best - self.tol:
            return
        pick = min(open_bags, key=lambda i: (len(cands[i]), i))
        k = self.bags[pick][0]
        rest = lb - contrib[k]
        banned_here = []
        for c, r in cands[pick]:
            # later candidates cost at least as much; the other classes' bound only grows
            if cost + c + rest >= self.best - self.tol:
                break
            self.decide(r, k)
            self.search(cost + c)
            self.undo(r)
            self.banned.add((r, k))
            banned_here.append((r, k))
        for p in banned_here:
            self.banned.discard(p)


def _drop_implied(bags: List[Tuple[int, List[int]]]) -> List[Tuple[int, List[int]]]:
    """Remove bags implied by a smaller bag of the same class."""
    sets = [(k, frozenset(rows)) for k, rows in bags]
    keep = []
    for i, (k, rs) in enumerate(sets):
        implied = any(kj == k and (rj < rs or (rj == rs and j < i))
                      for j, (kj, rj) in enumerate(sets) if j != i)
        if not implied:
            keep.append(bags[i])
    return keep


def _spans(seq: List[List[int]], allowed: np.ndarray, k: int
           ) -> Union[Dict[int, Tuple[int, int]], None]:
    """First and last bag index covered by each usable row, if all runs are contiguous."""
    idx: Dict[int, List[int]] = {}
    for i, rows in enumerate(seq):
        for r in rows:
            if allowed[r, k]:
                idx.setdefault(r, []).append(i)
    out = {}
    for r, ii in idx.items():
        if ii[-1] - ii[0] + 1 != len(ii):
            return None
        out[r] = (ii[0], ii[-1])
    return out


def _interval_cover(cover: List[List[Tuple[int, int]]], cost: Callable[[int], float]
                    ) -> Tuple[float, List[int]]:
    """Cheapest rows covering every bag of a sequence.

    ``cover[j]`` lists ``(first, row)`` for the rows covering bag ``j``,
    where ``first`` is the first bag the row covers. ``f[j]`` is the
    cheapest cover of bags ``0..j-1``. In an optimal cover, the row covering
    bag ``j-1`` with the leftmost start ``a`` leaves only bags before ``a``
    to the other rows, so ``f[j] = min f[a] + cost``.
    """
    n = len(cover)
    f = [0.0] + [math.inf] * n
    choice: List[Tuple[int, int]] = [(-1, -1)] * (n + 1)
    for j in range(n):
        best = math.inf
        for a, r in cover[j]:
            v = f[a] + cost(r)
            if v < best:
                best = v
                choice[j + 1] = (a, r)
        f[j + 1] = best
    if f[n] == math.inf:
        return math.inf, []
    rows, j = [], n
    while j > 0:
        j, r = choice[j]
        rows.append(r)
    return f[n], rows


class _CoverSearch:
    """Exact repair when every class's bags have the interval structure.

    Each class alone is an interval cover solved by :func:`_interval_cover`.
    Their sum bounds the joint problem from below, since only the rule that
    a row takes one class is dropped. Rows claimed by two classes are
    branched on: the row takes one of the claiming classes or its base.
    """

    def __init__(self, plan: "_GroupPlan", regret: np.ndarray, base: np.ndarray, tol: float):
        self.R = regret
        self.base = base
        self.tol = tol
        self.classes = plan.classes
        self.cover = plan.cover
        self.rows = plan.rows
        self.cols = {k: regret[:, k].tolist() for k in self.classes}
        self.best = math.inf
        self.best_decided: Dict[int, int] = {}

    def relax(self, assign: Dict[int, int]):
        total = math.fsum(float(self.R[r, k]) for r, k in assign.items())
        chosen = {}
        for k in self.classes:
            col = self.cols[k]

            def cost(r, k=k, col=col):
                got = assign.get(r)
                if got is None:
                    return col[r]
                return 0.0 if got == k else math.inf

            c, rows = _interval_cover(self.cover[k], cost)
            if c == math.inf:
                return math.inf, chosen
            total += c
            chosen[k] = rows
        return total, chosen

    def search(self, assign: Dict[int, int]):
        lb, chosen = self.relax(assign)
        if lb >= self.best - self.tol:
            return
        owners: Dict[int, List[int]] = {}
        for k, rows in chosen.items():
            for r in rows:
                owners.setdefault(r, []).append(k)
        clash = sorted(r for r, ks in owners.items() if len(ks) > 1)
        if not clash:
            self.best = lb
            self.best_decided = dict(assign)
            for k, rows in chosen.items():
                for r in rows:
                    self.best_decided[r] = k
            return
        r = clash[0]
        claim = sorted((k for k in self.classes if r in self.rows[k]),
                       key=lambda k: (float(self.R[r, k]), k))
        # the base label helps no claiming class, so it is tried last
        options = claim + [int(self.base[r])] if int(self.base[r]) not in claim else claim
        for k in options:
            assign[r] = k
            self.search(assign)
            del assign[r]


@dataclass
class _GroupPlan:
    bags: List[Tuple[int, List[int]]]
    classes: List[int]
    # per class: rows covering each bag with the first bag they cover, and the usable rows
    cover: Union[Dict[int, List[List[Tuple[int, int]]]], None]
    rows: Dict[int, Set[int]]


_PLANS: "weakref.WeakKeyDictionary[LocalBlock, List[_GroupPlan]]" = weakref.WeakKeyDictionary()


def _plan(block: LocalBlock) -> List[_GroupPlan]:
    """Gradient-independent bag structure of a block, computed once per block."""
    cached = _PLANS.get(block)
    if cached is not None:
        return cached
    free = block.forced < 0
    # drop bags already satisfied by a fixed row; group the rest by shared free rows
    live: List[Tuple[int, List[int]]] = []
    for k, rows in zip(block.bag_classes.tolist(), block.bag_rows):
        if np.any(block.forced[rows] == k):
            continue
        fr = rows[free[rows]].tolist()
        if not fr:
            raise ConstraintError(f"video {block.video_id}: unsatisfiable bag for class {k}")
        live.append((k, fr))

    parent = list(range(len(live)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    owner: Dict[int, int] = {}
    for i, (_, rows) in enumerate(live):
        for r in rows:
            j = owner.setdefault(r, i)
            if j != i:
                a, b = find(i), find(j)
                if a != b:
                    parent[max(a, b)] = min(a, b)
    members: Dict[int, List[int]] = {}
    for i in range(len(live)):
        members.setdefault(find(i), []).append(i)

    plans = []
    for idx in members.values():
        bags = _drop_implied([live[i] for i in idx])
        classes = sorted({k for k, _ in bags})
        seq = {k: [rows for kb, rows in bags if kb == k] for k in classes}
        cover: Union[Dict[int, List[List[Tuple[int, int]]]], None] = {}
        usable: Dict[int, Set[int]] = {}
        for k in classes:
            sp = _spans(seq[k], block.allowed, k)
            if sp is None:
                cover = None
                break
            usable[k] = set(sp)
            cover[k] = [sorted((sp[r][0], r) for r in rows if r in sp) for rows in seq[k]]
        plans.append(_GroupPlan(bags, classes, cover, usable))
    _PLANS[block] = plans
    return plans


def lmo(s: Union[LocalBlock, VideoConstraintSet], G) -> BlockVertex:
    """Exact minimizer of ``<G, Y>`` over the block's feasible one-hot assignments.

    Rows outside every bag take their cheapest allowed class, lowest index
    on ties.
    """
    block = _as_block(s)
    G = _check_G(block, G)
    cost = np.where(block.allowed, G, np.inf)
    base = np.argmin(cost, axis=1)
    n = len(base)
    if n and not np.all(np.isfinite(cost[np.arange(n), base])):
        raise ConstraintError(f"video {block.video_id}: a row has no allowed class")
    labels = base.copy()
    if not len(block.bag_classes):
        return _vertex(block, G, labels)

    plans = _plan(block)
    if not plans:
        return _vertex(block, G, labels)
    regret = cost - cost[np.arange(n), base][:, None]
    finite = np.abs(G[np.isfinite(cost)])
    tol = 1e-12 * (1.0 + (float(finite.max()) if finite.size else 0.0))
    for plan in plans:
        if all(any(base[r] == k for r in rows) for k, rows in plan.bags):
            continue
        if plan.cover is not None:
            search = _CoverSearch(plan, regret, base, tol)
            search.search({})
        else:
            search = _Group(plan.bags, regret, base, tol)
            search.greedy()
            search.search(0.0)
        if search.best == math.inf:
            raise ConstraintError(f"video {block.video_id}: bags cannot be satisfied jointly")
        for r, k in search.best_decided.items():
            labels[r] = k
    return _vertex(block, G, labels)


def lmo_bruteforce(s: Union[LocalBlock, VideoConstraintSet], G,
                   limit: int = BRUTE_FORCE_LIMIT) -> BlockVertex:
    """Exhaustive minimum over feasible assignments (test oracle).

    Rows that appear in no bag are independent of everything else, so they
    take their cheapest allowed class; all rows that appear in a bag are
    enumerated jointly over their allowed classes.
    """
    block = _as_block(s)
    G = _check_G(block, G)
    n, K = block.allowed.shape
    cost = np.where(block.allowed, G, np.inf)
    labels = np.argmin(cost, axis=1)
    if n and not np.all(np.isfinite(cost[np.arange(n), labels])):
        raise ConstraintError(f"video {block.video_id}: a row has no allowed class")
    in_bag = sorted(set(itertools.chain.from_iterable(r.tolist() for r in block.bag_rows)))
    options = [np.flatnonzero(block.allowed[r]) for r in in_bag]
    total = math.prod(len(o) for o in options) if options else 1
    if total > limit:
        raise ValueError(f"{total} assignments exceed the enumeration limit {limit}")
    if not in_bag:
        return _vertex(block, G, labels)
    sizes = np.array([len(o) for o in options])
    strides = np.concatenate([np.cumprod(sizes[::-1])[::-1][1:], [1]])
    col = {r: j for j, r in enumerate(in_bag)}
    best_value, best_combo = math.inf, None
    # lexicographic enumeration in chunks; earlier combos win ties
    for lo in range(0, total, CHUNK):
        idx = np.arange(lo, min(lo + CHUNK, total))
        combos = np.stack([options[j][(idx // strides[j]) % sizes[j]]
                           for j in range(len(in_bag))], axis=1)
        values = np.zeros(len(combos))
        for j, r in enumerate(in_bag):
            values += G[r, combos[:, j]]
        ok = np.ones(len(combos), dtype=bool)
        for k, rows in zip(block.bag_classes.tolist(), block.bag_rows):
            hit = np.zeros(len(combos), dtype=bool)
            for r in rows.tolist():
                hit |= combos[:, col[r]] == k
            ok &= hit
        if not ok.any():
            continue
        values[~ok] = np.inf
        i = int(np.argmin(values))
        if values[i] < best_value:
            best_value, best_combo = values[i], combos[i]
    if best_combo is None:
        raise ConstraintError(f"video {block.video_id}: no feasible assignment")
    labels[in_bag] = best_combo
    return _vertex(block, G, labels)
