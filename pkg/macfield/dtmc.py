"""
Finite-N slotted backoff simulator on the occupancy (stage-count) chain.

Each slot draws the number of attempters per class and stage from a binomial,
which is exact because nodes sharing a stage are exchangeable. The AIFS
counter decides whether a slot is reserved (only class H may attempt) or
common. Windowed statistics follow the short-term averaging protocol used to
compare against the mean-field ODE.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.signal import find_peaks

from .model import INF, OccupancyState, Scenario, SimulationError, largest_remainder, validate

logger = logging.getLogger(__name__)

TRACE_MAX_NODES = 16
DEFAULT_WINDOW = 2000


class SlotType(str, Enum):
    RESERVED = "R"
    COMMON = "C"


class Outcome(str, Enum):
    IDLE = "idle"
    SUCCESS = "success"
    COLLISION = "collision"


@dataclass(frozen=True)
class _Layout:
    """Flat stage indexing shared by every run of one scenario."""

    sizes: Tuple[int, ...]
    stage_counts: Tuple[int, ...]
    labels: Tuple[str, ...]
    offsets: Tuple[int, ...]
    prev: np.ndarray          # index of the stage a collision moves into this one from
    zero: np.ndarray          # stage-0 index of each flat index's class
    p_common: np.ndarray
    p_reserved: np.ndarray
    delta: Union[int, float]
    uses_counter: bool
    always_reserved: bool


@lru_cache(maxsize=32)
def _layout(s: Scenario) -> _Layout:
    sizes = s.class_sizes()
    offsets, prev, zero, p_c, p_r = [], [], [], [], []
    start = 0
    for i, c in enumerate(s.classes):
        n = c.n_stages
        offsets.append(start)
        idx = np.arange(n)
        prev.append(start + (idx - 1) % n)
        zero.append(np.full(n, start))
        p = s.slot_probabilities(i)
        p_c.append(p)
        p_r.append(p if i == 0 else np.zeros(n))
        start += n
    two = s.is_heterogeneous
    return _Layout(
        sizes=sizes, stage_counts=s.stage_counts, labels=tuple(c.label for c in s.classes),
        offsets=tuple(offsets), prev=np.concatenate(prev), zero=np.concatenate(zero),
        p_common=np.concatenate(p_c), p_reserved=np.concatenate(p_r), delta=s.delta,
        uses_counter=two and s.delta not in (0, INF), always_reserved=two and s.delta == INF,
    )


@dataclass
class SimState:
    counts: np.ndarray
    aifs_counter: int
    slot_index: int
    rng: np.random.Generator

    def class_counts(self, s: Scenario) -> Tuple[np.ndarray, ...]:
        lay = _layout(s)
        return tuple(self.counts[o:o + n] for o, n in zip(lay.offsets, lay.stage_counts))


@dataclass(frozen=True)
class SlotRecord:
    slot_index: int
    slot_type: SlotType
    attempts: Tuple[np.ndarray, ...]
    outcome: Outcome


def init_state(s: Scenario, initial: Union[str, OccupancyState, None] = "all-stage-0",
               seed: int = 0) -> SimState:
    """
    Initial stage counts from an occupancy (largest-remainder rounding per
    class) or with every node in stage 0. The AIFS counter starts at 0.
    """
    s = validate(s)
    lay = _layout(s)
    counts = np.zeros(sum(lay.stage_counts), dtype=np.int64)
    if initial is None or (isinstance(initial, str) and initial == "all-stage-0"):
        for off, n in zip(lay.offsets, lay.sizes):
            counts[off] = n
    elif isinstance(initial, OccupancyState):
        if len(initial.phi) != len(lay.sizes):
            raise SimulationError(f"initial occupancy has {len(initial.phi)} classes, scenario {len(lay.sizes)}")
        for i, (phi, off, n, size) in enumerate(zip(initial.phi, lay.offsets, lay.stage_counts, lay.sizes)):
            if phi.shape != (n,) or np.any(phi < 0) or phi.sum() <= 0:
                raise SimulationError(f"class {lay.labels[i]}: occupancy cannot be rounded to {size} nodes")
            if abs(phi.sum() - s.classes[i].sigma) > 1e-6:
                raise SimulationError(f"class {lay.labels[i]}: occupancy sums to {phi.sum():.6f}, "
                                      f"share is {s.classes[i].sigma}")
            counts[off:off + n] = largest_remainder(phi, size)
    else:
        raise SimulationError(f"unsupported initial state {initial!r}")
    counter = 0
    return SimState(counts=counts, aifs_counter=counter, slot_index=0, rng=np.random.default_rng(seed))


def _slot_reserved(lay: _Layout, counter: int) -> bool:
    if lay.always_reserved:
        return True
    return lay.uses_counter and counter < lay.delta


def _apply(lay: _Layout, state: SimState, att: np.ndarray, total: int) -> Outcome:
    if total == 0:
        if lay.uses_counter and state.aifs_counter < lay.delta:
            state.aifs_counter += 1
        return Outcome.IDLE
    state.aifs_counter = 0
    if total == 1:
        i = int(np.flatnonzero(att)[0])
        state.counts[i] -= 1
        state.counts[lay.zero[i]] += 1
        return Outcome.SUCCESS
    state.counts += att[lay.prev] - att
    return Outcome.COLLISION


def step(state: SimState, s: Scenario) -> Tuple[SimState, SlotRecord]:
    """Advance one slot in place; returns the state and what happened in the slot."""
    lay = _layout(s)
    reserved = _slot_reserved(lay, state.aifs_counter)
    att = state.rng.binomial(state.counts, lay.p_reserved if reserved else lay.p_common)
    outcome = _apply(lay, state, att, int(att.sum()))
    record = SlotRecord(
        slot_index=state.slot_index,
        slot_type=SlotType.RESERVED if reserved else SlotType.COMMON,
        attempts=tuple(att[o:o + n].copy() for o, n in zip(lay.offsets, lay.stage_counts)),
        outcome=outcome,
    )
    state.slot_index += 1
    return state, record


@dataclass
class SimStats:
    """Windowed and total statistics of one run."""

    windows: pd.DataFrame
    totals: Dict[str, float]
    window_length: int
    seed: int
    runtime_s: float = 0.0
    trace: Optional[np.ndarray] = None

    @property
    def gamma_hat(self) -> np.ndarray:
        return self.windows["gamma_hat"].to_numpy()

    def occupancy_columns(self) -> List[str]:
        return [c for c in self.windows.columns if c.startswith("occ_")]

    def summary(self) -> Dict[str, object]:
        return {**self.totals, "window_length": self.window_length, "windows": len(self.windows),
                "seed": self.seed, "runtime_s": self.runtime_s}


def _occupancy_names(lay: _Layout) -> List[str]:
    return [f"occ_{label}_{k}" for label, n in zip(lay.labels, lay.stage_counts) for k in range(n)]


class BackoffSimulator:
    """
    Slot-by-slot simulator owning one SimState.

    ``run`` accumulates occupancy lazily: stage counts only change on
    non-idle slots, so each constant stretch is added in one go.
    """

    def __init__(self, scenario: Scenario, seed: int = 0,
                 initial: Union[str, OccupancyState, None] = "all-stage-0"):
        self.scenario = validate(scenario)
        self.seed = seed
        self.layout = _layout(self.scenario)
        self.state = init_state(self.scenario, initial, seed)

    def step(self) -> SlotRecord:
        _, record = step(self.state, self.scenario)
        return record

    def run(self, total_slots: int, window: int = DEFAULT_WINDOW, trace: bool = False) -> SimStats:
        if window < 1 or total_slots < window:
            raise SimulationError(f"need total_slots >= window >= 1, got {total_slots} and {window}")
        if trace:
            return self._run_nodes(total_slots, window)

        lay = self.layout
        st = self.state
        n_win = int(math.ceil(total_slots / window))
        dim = len(st.counts)
        attempts = np.zeros(n_win, dtype=np.int64)
        collided = np.zeros(n_win, dtype=np.int64)
        successes = np.zeros(n_win, dtype=np.int64)
        occ = np.zeros((n_win, dim))

        binomial = st.rng.binomial
        p_r, p_c = lay.p_reserved, lay.p_common
        counts = st.counts
        seg_start = 0
        progress = max(1, total_slots // 10)
        started = time.perf_counter()

        for n in range(total_slots):
            w = n // window
            reserved = lay.always_reserved or (lay.uses_counter and st.aifs_counter < lay.delta)
            att = binomial(counts, p_r if reserved else p_c)
            total = int(att.sum())
            if total == 0:
                if lay.uses_counter and st.aifs_counter < lay.delta:
                    st.aifs_counter += 1
            else:
                occ[w] += counts * (n + 1 - seg_start)
                seg_start = n + 1
                attempts[w] += total
                if total == 1:
                    successes[w] += 1
                else:
                    collided[w] += total
                _apply(lay, st, att, total)
            if (n + 1) % window == 0 or n + 1 == total_slots:
                occ[w] += counts * (n + 1 - seg_start)
                seg_start = n + 1
            if (n + 1) % progress == 0:
                logger.info("simulated %d/%d slots (%.0f%%)", n + 1, total_slots, 100.0 * (n + 1) / total_slots)
        st.slot_index += total_slots

        runtime = time.perf_counter() - started
        return self._stats(attempts, collided, successes, occ, total_slots, window, runtime)

    def _run_nodes(self, total_slots: int, window: int) -> SimStats:
        """Per-node Bernoulli version with a full stage trace; debug sizes only."""
        lay = self.layout
        N = int(sum(lay.sizes))
        if N > TRACE_MAX_NODES:
            raise SimulationError(f"per-node trace limited to N <= {TRACE_MAX_NODES}, got {N}")
        st = self.state
        nodes = np.repeat(np.arange(len(st.counts)), st.counts)
        trace = np.empty((total_slots, N), dtype=np.int16)
        n_win = int(math.ceil(total_slots / window))
        attempts = np.zeros(n_win, dtype=np.int64)
        collided = np.zeros(n_win, dtype=np.int64)
        successes = np.zeros(n_win, dtype=np.int64)
        occ = np.zeros((n_win, len(st.counts)))
        started = time.perf_counter()

        for n in range(total_slots):
            w = n // window
            trace[n] = nodes
            occ[w] += np.bincount(nodes, minlength=len(st.counts))
            reserved = _slot_reserved(lay, st.aifs_counter)
            p = (lay.p_reserved if reserved else lay.p_common)[nodes]
            tx = st.rng.random(N) < p
            total = int(tx.sum())
            att = np.bincount(nodes[tx], minlength=len(st.counts))
            _apply(lay, st, att, total)
            if total == 1:
                nodes[tx] = lay.zero[nodes[tx]]
                successes[w] += 1
            elif total > 1:
                nodes[tx] = np.argsort(lay.prev)[nodes[tx]]
                collided[w] += total
            attempts[w] += total
        st.slot_index += total_slots

        stats = self._stats(attempts, collided, successes, occ, total_slots, window,
                            time.perf_counter() - started)
        stats.trace = trace
        return stats

    def _stats(self, attempts, collided, successes, occ, total_slots, window, runtime) -> SimStats:
        lay = self.layout
        n_win = len(attempts)
        starts = np.arange(n_win) * window
        lengths = np.minimum(window, total_slots - starts)
        with np.errstate(divide="ignore", invalid="ignore"):
            gamma_hat = np.where(attempts > 0, collided / np.maximum(attempts, 1), np.nan)
        df = pd.DataFrame({
            "window_start": starts, "length": lengths, "attempts": attempts,
            "collided": collided, "successes": successes, "gamma_hat": gamma_hat,
        })
        N = float(sum(lay.sizes))
        occ_frac = occ / lengths[:, None] / N
        df = pd.concat([df, pd.DataFrame(occ_frac, columns=_occupancy_names(lay))], axis=1)
        tot_att = int(attempts.sum())
        tot_col = int(collided.sum())
        totals = {
            "slots": int(total_slots),
            "attempts": tot_att,
            "collided": tot_col,
            "successes": int(successes.sum()),
            "gamma_hat": tot_col / tot_att if tot_att else float("nan"),
        }
        logger.info("run finished: %d slots, overall gamma_hat %.4f, %.1f s",
                    total_slots, totals["gamma_hat"], runtime)
        return SimStats(windows=df, totals=totals, window_length=window, seed=self.seed, runtime_s=runtime)


def run(s: Scenario, total_slots: int, seed: int = 0, W: int = DEFAULT_WINDOW,
        initial: Union[str, OccupancyState, None] = "all-stage-0", trace: bool = False) -> SimStats:
    """Simulate ``total_slots`` slots from the initial state; deterministic per seed."""
    return BackoffSimulator(s, seed=seed, initial=initial).run(total_slots, W, trace=trace)


def _run_one(args) -> SimStats:
    s, total_slots, seed, W = args
    return run(s, total_slots, seed=seed, W=W)


def run_seeds(s: Scenario, seeds: Sequence[int], total_slots: int, W: int = DEFAULT_WINDOW,
              max_workers: int = 1) -> List[SimStats]:
    """Independent runs, one per seed, returned in seed order."""
    jobs = [(s, total_slots, seed, W) for seed in seeds]
    if max_workers <= 1:
        return [_run_one(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(_run_one, jobs))


def state_histogram(s: Scenario, total_slots: int, seed: int = 0, burn_in: int = 0,
                    batches: int = 1) -> List[Counter]:
    """
    Visit counts of stage-count vectors, sampled at the start of each slot.

    With ``batches > 1`` the post-burn-in slots are split into that many
    consecutive batches, one Counter each.
    """
    sim = BackoffSimulator(s, seed=seed)
    for _ in range(burn_in):
        sim.step()
    per_batch = total_slots // batches
    out = []
    for _ in range(batches):
        hist = Counter()
        for _ in range(per_batch):
            hist[tuple(int(v) for v in sim.state.counts)] += 1
            sim.step()
        out.append(hist)
    return out


def exact_stationary_counts(s: Scenario) -> Dict[Tuple[int, ...], float]:
    """
    Stationary distribution of stage counts from the full per-node chain.

    Enumerates every (node stages, AIFS counter) state and every attempt
    pattern, solves for the stationary vector and aggregates it to count
    vectors. Only for tiny systems.
    """
    s = validate(s)
    lay = _layout(s)
    N = int(sum(lay.sizes))
    if N > 6:
        raise SimulationError(f"exact enumeration limited to N <= 6, got {N}")
    node_choices = []
    for off, n, size in zip(lay.offsets, lay.stage_counts, lay.sizes):
        node_choices.extend([range(off, off + n)] * size)
    counters = range(int(lay.delta) + 1) if lay.uses_counter else range(1)
    states = [(nodes, c) for nodes in itertools.product(*node_choices) for c in counters]
    index = {st: i for i, st in enumerate(states)}
    P = np.zeros((len(states), len(states)))
    step_to = np.argsort(lay.prev)

    for (nodes, counter), i in index.items():
        nodes_arr = np.array(nodes)
        reserved = _slot_reserved(lay, counter)
        p = (lay.p_reserved if reserved else lay.p_common)[nodes_arr]
        for pattern in itertools.product((False, True), repeat=N):
            tx = np.array(pattern)
            prob = float(np.prod(np.where(tx, p, 1.0 - p)))
            if prob == 0.0:
                continue
            total = int(tx.sum())
            nxt = nodes_arr.copy()
            if total == 0:
                c2 = counter + 1 if lay.uses_counter and counter < lay.delta else counter
            else:
                c2 = 0
                nxt[tx] = lay.zero[nxt[tx]] if total == 1 else step_to[nxt[tx]]
            P[i, index[(tuple(int(v) for v in nxt), c2)]] += prob

    A = np.vstack([P.T - np.eye(len(states)), np.ones(len(states))])
    b = np.zeros(len(states) + 1)
    b[-1] = 1.0
    pi = np.linalg.lstsq(A, b, rcond=None)[0]

    dim = sum(lay.stage_counts)
    out: Dict[Tuple[int, ...], float] = {}
    for (nodes, _), prob in zip(states, pi):
        key = tuple(int(v) for v in np.bincount(np.array(nodes), minlength=dim))
        out[key] = out.get(key, 0.0) + float(prob)
    return out


def mode_concentration(stats: SimStats, centers: Sequence[float], tol: float = 0.05,
                       burn_in: int = 0, min_attempts: int = 50) -> float:
    """Share of post-burn-in windows (with enough attempts) whose gamma_hat sits near a center."""
    df = stats.windows
    eligible = df[(df["window_start"] >= burn_in) & (df["attempts"] >= min_attempts)]
    if eligible.empty:
        return float("nan")
    g = eligible["gamma_hat"].to_numpy()
    near = np.zeros(len(g), dtype=bool)
    for c in centers:
        near |= np.abs(g - c) <= tol
    return float(near.mean())


def nearest_root_shares(stats: SimStats, roots: Sequence[float], burn_in: int = 0,
                        min_attempts: int = 50) -> List[float]:
    """
    Share of post-burn-in windows (with enough attempts) whose gamma_hat lies
    closer to each root than to any other, in the order of ``roots``. Windows
    with undefined gamma_hat count toward no root.
    """
    df = stats.windows
    eligible = df[(df["window_start"] >= burn_in) & (df["attempts"] >= min_attempts)]
    if eligible.empty or not len(roots):
        return [float("nan")] * len(roots)
    g = eligible["gamma_hat"].to_numpy(dtype=float)
    defined = g[~np.isnan(g)]
    nearest = np.argmin(np.abs(defined[:, None] - np.asarray(roots, dtype=float)[None, :]), axis=1)
    counts = np.bincount(nearest, minlength=len(roots))
    return [float(c) / len(g) for c in counts]


def dominant_period(stats: SimStats, burn_in: int = 0) -> float:
    """
    Lag (in slots) of the first autocorrelation peak of windowed gamma_hat
    after the autocorrelation has first gone negative. NaN if none.
    """
    df = stats.windows[stats.windows["window_start"] >= burn_in]
    g = df["gamma_hat"].to_numpy(dtype=float)
    if np.all(np.isnan(g)) or len(g) < 4:
        return float("nan")
    g = np.where(np.isnan(g), np.nanmean(g), g) - np.nanmean(g)
    n = len(g)
    spectrum = np.fft.rfft(g, 2 * n)
    acf = np.fft.irfft(spectrum * np.conj(spectrum))[:n]
    if acf[0] <= 0:
        return float("nan")
    acf = acf / acf[0]
    negative = np.flatnonzero(acf < 0)
    if not negative.size:
        return float("nan")
    start = int(negative[0])
    peaks, _ = find_peaks(acf[start:n // 2])
    if not peaks.size:
        return float("nan")
    i = start + int(peaks[0])
    denom = acf[i - 1] - 2 * acf[i] + acf[i + 1]
    offset = 0.5 * (acf[i - 1] - acf[i + 1]) / denom if denom != 0 else 0.0
    return float((i + np.clip(offset, -0.5, 0.5)) * stats.window_length)
