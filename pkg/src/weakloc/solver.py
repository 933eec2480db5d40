"""Block-coordinate Frank-Wolfe over the product of per-video hulls.

One iteration touches one video: take the gradient block, call the exact
oracle, and move toward its vertex with the optimal step of the quadratic
objective. Videos are sampled in proportion to their last known block gap,
mixed with a uniform floor.

The state keeps ``X^T Y`` and ``P = A^{-1} X^T Y`` up to date incrementally,
so one step costs O(M_v d K + d^2 K) rather than O(M d K).
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .constraints import ConstraintError, LocalBlock, VideoConstraintSet, validate
from .lmo import lmo
from .objective import Classifier, NumericalError, RidgeCache, recover_classifier

logger = logging.getLogger(__name__)

REFRESH_EVERY = 1000


@dataclass
class SolverConfig:
    iterations: int = 30000
    lam: float = 1e-4
    seed: int = 0
    gap_tolerance: float = 1e-3
    epsilon: float = 0.05
    log_every: int = 1000
    track_vertices: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.epsilon < 1:
            raise ValueError("epsilon must lie in [0, 1)")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")


@dataclass
class SolverState:
    """Relaxed assignment and the quantities maintained alongside it.

    ``gaps[v]`` is ``inf`` until video ``v`` is first visited. When
    ``vertices`` is kept, ``vertices[v]`` maps a vertex label tuple to its
    convex weight in block ``v``.
    """

    Y: np.ndarray
    XtY: np.ndarray
    P: np.ndarray
    sq_norm: float
    gaps: np.ndarray
    iteration: int = 0
    vertices: Optional[List[Dict[bytes, float]]] = None


@dataclass
class Trace:
    iteration: List[int] = field(default_factory=list)
    video: List[str] = field(default_factory=list)
    h: List[float] = field(default_factory=list)
    total_gap: List[float] = field(default_factory=list)
    gamma: List[float] = field(default_factory=list)

    def append(self, it, video, h, gap, gamma):
        self.iteration.append(it)
        self.video.append(video)
        self.h.append(h)
        self.total_gap.append(gap)
        self.gamma.append(gamma)

    def __len__(self):
        return len(self.iteration)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "video_id", "h", "total_gap", "gamma"])
        for row in zip(self.iteration, self.video, self.h, self.total_gap, self.gamma):
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4])])
        return buf.getvalue()


@dataclass
class SolveResult:
    Y: np.ndarray
    classifier: Classifier
    trace: Trace
    h0: float
    h: float
    final_gap: float
    block_gaps: np.ndarray
    iterations: int
    converged: bool
    state: SolverState


class BCFWSolver:
    """Holds the cache, the compiled per-video blocks and the step logic."""

    def __init__(self, cache: RidgeCache, constraints: Sequence[VideoConstraintSet],
                 config: SolverConfig):
        self.cache = cache
        self.config = config
        self.sets = list(constraints)
        if not self.sets:
            raise ConstraintError("no videos to solve")
        problems = [p for s in self.sets for p in validate(s)]
        if problems:
            raise ConstraintError("; ".join(problems[:5]))
        self.K = self.sets[0].num_classes
        covered = sorted((s.row_start, s.row_end) for s in self.sets)
        if covered[0][0] != 0 or covered[-1][1] != cache.M or any(
                a[1] != b[0] for a, b in zip(covered, covered[1:])):
            raise ConstraintError("constraint sets do not tile the feature rows")
        self.blocks: List[LocalBlock] = [s.compile() for s in self.sets]
        self.ranges = [(s.row_start, s.row_end) for s in self.sets]

    # -- state ---------------------------------------------------------------

    def _refresh(self, state: SolverState):
        state.XtY = self.cache.X.T @ state.Y
        state.P = self.cache.solve(state.XtY)
        state.sq_norm = float(np.vdot(state.Y, state.Y))

    def init_state(self) -> SolverState:
        M = self.cache.M
        Y = np.zeros((M, self.K))
        vertices = [] if self.config.track_vertices else None
        for block, (a, b) in zip(self.blocks, self.ranges):
            v = lmo(block, np.zeros((b - a, self.K)))
            Y[a:b] = v.assignment
            if vertices is not None:
                vertices.append({v.labels.tobytes(): 1.0})
        state = SolverState(Y, None, None, 0.0, np.full(len(self.blocks), np.inf),
                            vertices=vertices)
        self._refresh(state)
        return state

    def h(self, state: SolverState) -> float:
        return (state.sq_norm - float(np.vdot(state.XtY, state.P))) / (2 * self.cache.M)

    def block_gradient(self, state: SolverState, v: int) -> np.ndarray:
        a, b = self.ranges[v]
        X = self.cache.X
        return (state.Y[a:b] - X[a:b] @ state.P) / self.cache.M

    def block_gap(self, state: SolverState, v: int) -> float:
        G = self.block_gradient(state, v)
        S = lmo(self.blocks[v], G).assignment
        a, b = self.ranges[v]
        return max(float(np.vdot(G, state.Y[a:b] - S)), 0.0)

    def exact_gaps(self, state: SolverState) -> np.ndarray:
        return np.array([self.block_gap(state, v) for v in range(len(self.blocks))])

    def step(self, state: SolverState, v: int) -> float:
        """One BCFW step on video ``v``; returns the step size taken."""
        a, b = self.ranges[v]
        M = self.cache.M
        G = self.block_gradient(state, v)
        vertex = lmo(self.blocks[v], G)
        Yv = state.Y[a:b]
        D = vertex.assignment - Yv
        gap = max(float(np.vdot(G, -D)), 0.0)
        state.gaps[v] = gap
        state.iteration += 1
        if gap == 0.0:
            return 0.0
        U = self.cache.X[a:b].T @ D
        V = self.cache.solve(U)
        curv = max(float(np.vdot(D, D)) - float(np.vdot(U, V)), 0.0) / M
        gamma = 1.0 if curv <= 1e-18 else min(max(gap / curv, 0.0), 1.0)
        if gamma > 0.0:
            old = float(np.vdot(Yv, Yv))
            Yv += gamma * D
            state.sq_norm += float(np.vdot(Yv, Yv)) - old
            state.XtY += gamma * U
            state.P += gamma * V
            if state.vertices is not None:
                self._update_weights(state.vertices[v], vertex.labels.tobytes(), gamma)
        if state.iteration % REFRESH_EVERY == 0:
            self._refresh(state)
        return gamma

    @staticmethod
    def _update_weights(weights: Dict[bytes, float], key: bytes, gamma: float):
        if gamma >= 1.0:
            weights.clear()
            weights[key] = 1.0
            return
        for k in list(weights):
            weights[k] *= 1.0 - gamma
        weights[key] = weights.get(key, 0.0) + gamma

    def sample_block(self, state: SolverState, rng: np.random.Generator) -> int:
        return sample_block(state.gaps, rng, self.config.epsilon)

    # -- checks --------------------------------------------------------------

    def check_invariants(self, state: SolverState, tol: float = 1e-9) -> List[str]:
        """Row sums, entry range, and (if tracked) hull membership of every block."""
        out = []
        rs = state.Y.sum(axis=1)
        if np.max(np.abs(rs - 1.0)) > tol:
            out.append(f"row sums deviate by {np.max(np.abs(rs - 1.0)):.3g}")
        if state.Y.min() < -1e-12 or state.Y.max() > 1 + 1e-12:
            out.append("entries outside [0, 1]")
        if state.vertices is not None:
            for v, weights in enumerate(state.vertices):
                a, b = self.ranges[v]
                w = np.array(list(weights.values()))
                if np.any(w < 0) or abs(w.sum() - 1.0) > tol:
                    out.append(f"block {v}: weights are not a convex combination")
                    continue
                rec = np.zeros((b - a, self.K))
                for key, wt in weights.items():
                    labels = np.frombuffer(key, dtype=np.int64)
                    rec[np.arange(b - a), labels] += wt
                if np.max(np.abs(rec - state.Y[a:b]), initial=0.0) > 1e-8:
                    out.append(f"block {v}: Y does not match its vertex combination")
        return out

    # -- driver --------------------------------------------------------------

    def run(self, rng: Optional[np.random.Generator] = None,
            callback: Optional[Callable[[SolverState, int], None]] = None) -> SolveResult:
        cfg = self.config
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        state = self.init_state()
        h0 = self.h(state)
        target = cfg.gap_tolerance * max(h0, 1e-12)
        trace = Trace()
        n = len(self.blocks)
        next_check = 0
        converged = False
        for it in range(1, cfg.iterations + 1):
            v = self.sample_block(state, rng)
            gamma = self.step(state, v)
            total = float(state.gaps.sum())
            h = self.h(state)
            if not math.isfinite(h):
                raise NumericalError("objective became non-finite")
            trace.append(it, self.sets[v].video_id, h, total, gamma)
            if callback is not None and it % cfg.log_every == 0:
                callback(state, it)
            if it % cfg.log_every == 0:
                logger.info("iter %d  h=%.6g  gap=%.3g", it, h, total)
            if total <= target and it >= next_check:
                # stale estimates look converged; confirm with fresh gaps
                state.gaps = self.exact_gaps(state)
                if state.gaps.sum() <= target:
                    converged = True
                    break
                next_check = it + n
        self._refresh(state)
        state.gaps = self.exact_gaps(state)
        final_gap = float(state.gaps.sum())
        return SolveResult(
            Y=state.Y, classifier=recover_classifier(self.cache, state.Y), trace=trace,
            h0=h0, h=self.h(state), final_gap=final_gap, block_gaps=state.gaps.copy(),
            iterations=state.iteration, converged=converged or final_gap <= target,
            state=state)


def sample_block(gaps: np.ndarray, rng: np.random.Generator, epsilon: float) -> int:
    """Draw a block index: uniform with probability ``epsilon``, else by gap.

    Unvisited blocks (``inf``) weigh ten times the largest finite gap; if no
    block has a positive weight the draw is uniform.
    """
    n = len(gaps)
    if n == 1:
        return 0
    u = rng.random()
    if u < epsilon:
        return int(rng.integers(n))
    w = np.asarray(gaps, dtype=np.float64)
    inf = ~np.isfinite(w)
    if inf.any():
        finite = w[~inf]
        top = float(finite.max()) if finite.size and finite.max() > 0 else 1.0
        w = np.where(inf, 10.0 * top, w)
    total = w.sum()
    if total <= 0:
        return int(rng.integers(n))
    c = np.cumsum(w)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), n - 1))


def run(cache: RidgeCache, constraints: Sequence[VideoConstraintSet], config: SolverConfig,
        callback=None) -> SolveResult:
    return BCFWSolver(cache, constraints, config).run(callback=callback)
