# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.
"""Ensemble-based estimation of the echo index and related diagnostics.

The echo index of an input sequence is the number of uniformly attracting entire solutions
that together attract almost every initial condition. It is estimated by evolving an ensemble
of initial conditions under one input realization, discarding a transient and clustering the
tails by their largest pointwise distance.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pydantic
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist, pdist

from contraction import Region
from core_dynamics import InputDrivenSystem, Trajectory, evolve, evolve_stacked, iterate
from errors import ConfigurationError, EstimationError, SeparatrixError
from input_space import InputSequence, Stream, shift, substream

logger = logging.getLogger(__name__)

INDEFINITE = "indefinite"
# Labelled when within tol of one reference and at least this many tols from the other.
COMMIT_FACTOR = 10.0
# Ambiguity band around the clustering tolerance: [tol / 4, 4 tol].
AMBIGUITY_FACTOR = 4.0
MIN_WINDOW = 10


class EchoIndexProtocol(pydantic.BaseModel):
    """Ensemble sizes, transients and tolerances used by `estimate_echo_index`."""

    class Config:
        """Pydantic config."""

        extra = "forbid"

    ic_count: int = pydantic.Field(30, ge=1, description="Initial conditions at level 0.")
    ic_seed: int = pydantic.Field(0, ge=0, description="Seed of the initial condition substreams.")
    transient: int = pydantic.Field(200, ge=0, description="Discarded steps at level 0.")
    horizon: int = pydantic.Field(200, ge=MIN_WINDOW, description="Retained steps.")
    window: int = pydantic.Field(100, ge=MIN_WINDOW, description="Tail used for clustering.")
    cluster_tol: float = pydantic.Field(1e-3, gt=0.0)
    growth: int = pydantic.Field(2, ge=2, description="Escalation factor for ICs and transient.")
    max_escalations: int = pydantic.Field(3, ge=1)
    shift_check: int = pydantic.Field(50, ge=0, description="Anchor offset of the shift check.")
    start: Optional[int] = pydantic.Field(None, description="Start index; default input start.")

    @pydantic.root_validator(skip_on_failure=True)
    def _window_fits(cls, values):  # noqa: N805
        if values["window"] > values["horizon"]:
            raise ValueError("window must not exceed horizon")
        return values

    def level(self, escalation: int) -> Tuple[int, int]:
        """(IC count, transient) at an escalation level."""
        factor = self.growth**escalation
        return self.ic_count * factor, self.transient * factor

    def required_steps(self) -> int:
        """Input steps needed after the start index, shift check included."""
        return self.transient * self.growth**self.max_escalations + self.horizon + self.shift_check


def sample_initial_conditions(count: int, dim: int, bound: float, seed: int) -> np.ndarray:
    """Uniform ICs in [-L, L]^dim; IC i comes from its own substream."""
    return np.stack(
        [substream(seed, Stream.INITIAL_CONDITIONS, i).uniform(-bound, bound, dim) for i in range(count)]
    )


@dataclass(eq=False)
class EnsembleRun:
    """Ensemble of orbits under one input realization.

    `states[i, j]` is the state of IC i at time `start + transient + j`.
    """

    system: InputDrivenSystem
    input: InputSequence
    initial_conditions: np.ndarray
    transient: int
    horizon: int
    start: int
    states: np.ndarray

    @property
    def first_kept(self) -> int:
        """Time index of `states[:, 0]`."""
        return self.start + self.transient

    @property
    def trajectories(self) -> List[Trajectory]:
        """Retained part of each orbit."""
        return [Trajectory(anchor=self.first_kept, states=s) for s in self.states]

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Write one row per IC per retained step: `ic_id, k, x_1 .. x_N`."""
        path = Path(path)
        n_ic, n_t, dim = self.states.shape
        ids = np.repeat(np.arange(n_ic), n_t)[:, None]
        ks = np.tile(np.arange(self.first_kept, self.first_kept + n_t), n_ic)[:, None]
        table = np.hstack([ids, ks, self.states.reshape(n_ic * n_t, dim)])
        header = ",".join(["ic_id", "k"] + [f"x_{i + 1}" for i in range(dim)])
        np.savetxt(path, table, delimiter=",", header=header, comments="", fmt=["%d", "%d"] + ["%.17g"] * dim)
        return path


def run_ensemble(
    system: InputDrivenSystem,
    seq: InputSequence,
    ics: Union[int, np.ndarray],
    transient: int,
    horizon: int,
    start: Optional[int] = None,
    seed: int = 0,
) -> EnsembleRun:
    """Evolve sampled (an int count) or explicit ICs and keep the last `horizon` steps.

    Raises:
        InputWindowError: when the input does not cover the transient and horizon.
    """
    start = seq.start if start is None else start
    if isinstance(ics, (int, np.integer)):
        initial = sample_initial_conditions(int(ics), system.state_dim, system.bound, seed)
    else:
        initial = np.array(ics, dtype=np.float64, ndmin=2)
    states = evolve(system, seq, initial, start, transient + horizon, keep=horizon)
    logger.debug("ensemble of %d ICs from k=%d, transient %d, horizon %d", initial.shape[0], start, transient, horizon)
    return EnsembleRun(
        system=system,
        input=seq,
        initial_conditions=initial,
        transient=transient,
        horizon=horizon,
        start=start,
        states=states,
    )


def run_ensembles(
    system: InputDrivenSystem,
    seqs: Sequence[InputSequence],
    ics: int,
    transient: int,
    horizon: int,
    start: int,
    seed: int = 0,
) -> List[EnsembleRun]:
    """`run_ensemble` with the same sampled ICs under several realizations, evolved as one stack."""
    initial = sample_initial_conditions(ics, system.state_dim, system.bound, seed)
    stacked = evolve_stacked(system, seqs, initial, start, transient + horizon, keep=horizon)
    logger.debug("%d ensembles of %d ICs from k=%d, transient %d", len(seqs), ics, start, transient)
    return [
        EnsembleRun(
            system=system,
            input=seq,
            initial_conditions=initial,
            transient=transient,
            horizon=horizon,
            start=start,
            states=states,
        )
        for seq, states in zip(seqs, stacked)
    ]


@dataclass
class Cluster:
    """One asymptotic response: its representative tail and member ICs."""

    representative: np.ndarray
    members: List[int]

    @property
    def count(self) -> int:
        """Number of member ICs."""
        return len(self.members)


@dataclass
class EchoIndexReport:
    """Estimated echo index, or `"indefinite"`, with its supporting statistics."""

    index: Union[int, str]
    clusters: List[Cluster]
    min_separation: float
    max_diameter: float
    cluster_tol: float
    window: int
    coverage: float
    tail_variance: float
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def is_definite(self) -> bool:
        """Whether a finite index was supported."""
        return self.index != INDEFINITE

    def mark_indefinite(self, reason: str) -> "EchoIndexReport":
        """Downgrade the verdict, keeping every statistic."""
        logger.info("echo index indefinite: %s", reason)
        self.diagnostics.setdefault("cluster_count", len(self.clusters))
        self.diagnostics["reason"] = reason
        self.index = INDEFINITE
        return self

    def summary(self) -> Dict[str, Any]:
        """Plain-data view for YAML export."""
        return {
            "index": self.index,
            "cluster_sizes": [c.count for c in self.clusters],
            "min_separation": float(self.min_separation),
            "max_diameter": float(self.max_diameter),
            "cluster_tol": self.cluster_tol,
            "window": self.window,
            "coverage": self.coverage,
            "tail_variance": self.tail_variance,
            "representatives_final": [c.representative[-1].tolist() for c in self.clusters],
            "diagnostics": self.diagnostics,
        }


def _distance_extremes(tail: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Max and min over time of pairwise state distances for a (n, w, N) tail."""
    n = tail.shape[0]
    d_max = np.zeros((n, n))
    d_min = np.zeros((n, n))
    for i in range(n):
        dist = np.linalg.norm(tail - tail[i], axis=2)
        d_max[i] = dist.max(axis=1)
        d_min[i] = dist.min(axis=1)
    return d_max, d_min


def _single_linkage(d_max: np.ndarray, tol: float) -> np.ndarray:
    """Cluster labels numbered by first member; linked when the max distance is <= tol."""
    _, raw = connected_components(csr_matrix(d_max <= tol), directed=False)
    order: Dict[int, int] = {}
    return np.array([order.setdefault(int(r), len(order)) for r in raw])


def cluster_asymptotics(run: EnsembleRun, cluster_tol: float = 1e-3, window: int = 100) -> EchoIndexReport:
    """Cluster the ensemble tails and decide the echo index.

    The verdict is indefinite when the cluster count differs across the last three equal
    subwindows, when any pairwise distance falls in [tol / 4, 4 tol], or when the
    separation/diameter ordering `min_separation > tol > max_diameter` fails.

    Raises:
        EstimationError: when the window is shorter than 10 steps or longer than the horizon.
    """
    if window < MIN_WINDOW:
        raise EstimationError(f"window too short: {window} < {MIN_WINDOW}")
    if window > run.horizon:
        raise EstimationError(f"window {window} exceeds horizon {run.horizon}")
    tail = run.states[:, -window:, :]
    d_max, d_min = _distance_extremes(tail)
    labels = _single_linkage(d_max, cluster_tol)
    n_clusters = int(labels.max()) + 1

    clusters = []
    max_diameter = 0.0
    tail_variance = 0.0
    for c in range(n_clusters):
        members = np.flatnonzero(labels == c)
        representative = tail[members[0]]
        clusters.append(Cluster(representative=representative, members=members.tolist()))
        if members.size > 1:
            max_diameter = max(max_diameter, float(pdist(tail[members, -1, :]).max()))
        tail_variance = max(tail_variance, float(np.mean(np.var(representative, axis=0))))
    different = labels[:, None] != labels[None, :]
    min_separation = float(d_min[different].min()) if n_clusters > 1 else float("inf")

    upper = np.triu(np.ones_like(d_max, dtype=bool), k=1)
    band = (d_max >= cluster_tol / AMBIGUITY_FACTOR) & (d_max <= AMBIGUITY_FACTOR * cluster_tol) & upper
    ambiguous_ics = np.unique(np.concatenate(np.nonzero(band))) if band.any() else np.array([], dtype=int)
    coverage = 1.0 - ambiguous_ics.size / tail.shape[0]

    part = window // 3
    sub_counts = [
        int(_single_linkage(_distance_extremes(tail[:, window - (3 - s) * part : window - (2 - s) * part])[0], cluster_tol).max()) + 1
        for s in range(3)
    ]

    report = EchoIndexReport(
        index=n_clusters,
        clusters=clusters,
        min_separation=min_separation,
        max_diameter=max_diameter,
        cluster_tol=cluster_tol,
        window=window,
        coverage=coverage,
        tail_variance=tail_variance,
        diagnostics={
            "subwindow_counts": sub_counts,
            "ambiguous_pairs": int(band.sum()),
            "ic_count": int(tail.shape[0]),
            "transient": run.transient,
        },
    )
    if len(set(sub_counts)) > 1:
        return report.mark_indefinite(f"cluster count unstable across subwindows: {sub_counts}")
    if band.any():
        return report.mark_indefinite(f"{int(band.sum())} pairwise distances inside the ambiguity band")
    if not min_separation > cluster_tol > max_diameter:
        return report.mark_indefinite(
            f"separation {min_separation:.3g} / diameter {max_diameter:.3g} do not bracket tol {cluster_tol:.3g}"
        )
    return report


def estimate_echo_index(
    system: InputDrivenSystem, seq: InputSequence, protocol: Optional[EchoIndexProtocol] = None
) -> EchoIndexReport:
    """Escalate ICs and transient until two consecutive levels agree, then check a shifted anchor.

    Raises:
        InputWindowError: when the input is shorter than `protocol.required_steps()`.
    """
    return estimate_echo_indices(system, [seq], protocol)[0]


@dataclass
class _Escalation:
    history: List[Dict[str, Any]] = field(default_factory=list)
    previous: Optional[EchoIndexReport] = None
    report: Optional[EchoIndexReport] = None
    level: Tuple[int, int] = (0, 0)
    settled: bool = False


def estimate_echo_indices(
    system: InputDrivenSystem, seqs: Sequence[InputSequence], protocol: Optional[EchoIndexProtocol] = None
) -> List[EchoIndexReport]:
    """`estimate_echo_index` for several realizations sharing a start index, in one stack.

    Each realization escalates on its own; the ones still unsettled at a level are evolved
    together, so the cost per step does not grow with the number of realizations.

    Raises:
        ConfigurationError: when the realizations start at different indices.
        InputWindowError: when an input is shorter than `protocol.required_steps()`.
    """
    protocol = protocol or EchoIndexProtocol()
    if not seqs:
        return []
    if protocol.start is None and len({seq.start for seq in seqs}) > 1:
        raise ConfigurationError("input realizations must share their start index")
    start = seqs[0].start if protocol.start is None else protocol.start
    tracks = [_Escalation() for _ in seqs]

    for escalation in range(protocol.max_escalations + 1):
        pending = [i for i, st in enumerate(tracks) if not st.settled]
        if not pending:
            break
        ics, transient = protocol.level(escalation)
        runs = run_ensembles(
            system, [seqs[i] for i in pending], ics, transient, protocol.horizon, start, protocol.ic_seed
        )
        for i, run in zip(pending, runs):
            st = tracks[i]
            report = cluster_asymptotics(run, protocol.cluster_tol, protocol.window)
            st.history.append({"ic_count": ics, "transient": transient, "index": report.index})
            st.report, st.level = report, (ics, transient)
            logger.debug("escalation %d: %d ICs, transient %d -> index %s", escalation, ics, transient, report.index)
            previous = st.previous
            if previous is not None and previous.is_definite and report.is_definite and previous.index == report.index:
                st.settled = True
            st.previous = report

    for st in tracks:
        assert st.report is not None
        if not st.settled:
            st.report.mark_indefinite(f"index not stable across escalations: {[h['index'] for h in st.history]}")
        st.report.diagnostics["levels"] = st.history

    if protocol.shift_check:
        by_level: Dict[Tuple[int, int], List[int]] = {}
        for i, st in enumerate(tracks):
            if st.report is not None and st.report.is_definite:
                by_level.setdefault(st.level, []).append(i)
        for (ics, transient), members in sorted(by_level.items()):
            shifted = [shift(seqs[i], protocol.shift_check) for i in members]
            runs = run_ensembles(system, shifted, ics, transient, protocol.horizon, start, protocol.ic_seed)
            for i, run in zip(members, runs):
                report = tracks[i].report
                assert report is not None
                shifted_index = cluster_asymptotics(run, protocol.cluster_tol, protocol.window).index
                report.diagnostics["shift_check"] = {"offset": protocol.shift_check, "index": shifted_index}
                if shifted_index != report.index:
                    report.mark_indefinite(
                        f"index {report.index} at anchor 0 but {shifted_index} at shift {protocol.shift_check}"
                    )
    return [st.report for st in tracks if st.report is not None]


@dataclass
class FibreApproximation:
    """Image at time n of a grid (or cloud) pushed forward from time n - depth."""

    n: int
    depth: int
    points: np.ndarray
    diameter_trace: np.ndarray

    @property
    def diameter(self) -> float:
        """Diameter of the final point set."""
        return float(self.diameter_trace[-1])

    @property
    def centroid(self) -> np.ndarray:
        """Mean of the final point set."""
        return self.points.mean(axis=0)


def _diameter(points: np.ndarray) -> float:
    return float(pdist(points).max()) if points.shape[0] > 1 else 0.0


def pullback_fibre(
    system: InputDrivenSystem,
    seq: InputSequence,
    n: int,
    depth: int,
    boundary_grid: int = 33,
    region: Optional[Region] = None,
    seed: int = 0,
    cloud_size: int = 1000,
) -> FibreApproximation:
    """Approximate the pullback fibre X_n by evolving a grid over X from n - depth to n.

    Grids are used up to two dimensions; higher dimensions use a seeded uniform cloud.

    Raises:
        InputWindowError: when the input does not cover n - depth + 1 .. n.
    """
    region = region or Region.full(system.state_dim, system.bound)
    if system.state_dim <= 2:
        points = region.grid(boundary_grid)
    else:
        rng = substream(seed, Stream.FIBRE_CLOUD)
        points = rng.uniform(region.lo, region.hi, size=(cloud_size, system.state_dim))
    trace = [_diameter(points)]
    for points in iterate(system, seq, points, n - depth, depth):
        trace.append(_diameter(points))
    logger.debug("pullback fibre at n=%d depth %d: diameter %.3g", n, depth, trace[-1])
    return FibreApproximation(n=n, depth=depth, points=points, diameter_trace=np.array(trace))


def _commit(traj: np.ndarray, ref_lo: np.ndarray, ref_hi: np.ndarray, tol: float) -> Tuple[Optional[str], Optional[int]]:
    """Label a trajectory by the reference it settles on, and the step it settles at."""
    d_lo = np.linalg.norm(traj - ref_lo, axis=1)
    d_hi = np.linalg.norm(traj - ref_hi, axis=1)
    for label, near, far in (("lo", d_lo, d_hi), ("hi", d_hi, d_lo)):
        settled = (near <= tol) & (far >= COMMIT_FACTOR * tol)
        if settled[-1]:
            unsettled = np.flatnonzero(~settled)
            return label, int(unsettled[-1]) + 1 if unsettled.size else 0
    return None, None


@dataclass
class SeparatrixResult:
    """Bracket around the basin boundary on the segment [lo, hi]."""

    boundary: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    bracket_length: float
    iterations: int
    converged: bool
    escape_trace: List[Dict[str, Any]]

    @property
    def escape_time(self) -> int:
        """Escape time of the tightest bracket."""
        return int(self.escape_trace[-1]["escape"]) if self.escape_trace else 0

    def summary(self) -> Dict[str, Any]:
        """Plain-data view for YAML export."""
        return {
            "boundary": self.boundary.tolist(),
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "bracket_length": self.bracket_length,
            "iterations": self.iterations,
            "converged": self.converged,
            "escape_time": self.escape_time,
            "escape_trace": self.escape_trace,
        }


def separatrix_bisect(
    system: InputDrivenSystem,
    seq: InputSequence,
    lo: np.ndarray,
    hi: np.ndarray,
    horizon: int = 1000,
    max_iters: int = 60,
    start: Optional[int] = None,
    cluster_tol: float = 1e-3,
    bracket_tol: float = 1e-12,
) -> SeparatrixResult:
    """Bisect [lo, hi] until the bracket around the basin boundary is <= `bracket_tol`.

    Midpoints are labelled by the reference orbit (of lo or hi) they settle on; the escape
    time recorded per iteration is the earlier settling step of the two bracket ends.

    Raises:
        SeparatrixError: when lo and hi settle in the same basin.
    """
    start = seq.start if start is None else start
    lo = np.array(lo, dtype=np.float64)
    hi = np.array(hi, dtype=np.float64)
    refs = evolve(system, seq, np.stack([lo, hi]), start, horizon)
    ref_lo, ref_hi = refs[0], refs[1]
    if np.linalg.norm(ref_lo[-1] - ref_hi[-1]) < COMMIT_FACTOR * cluster_tol:
        raise SeparatrixError(f"{lo.tolist()} and {hi.tolist()} converge to the same response")
    escape = {"lo": _commit(ref_lo, ref_lo, ref_hi, cluster_tol)[1], "hi": _commit(ref_hi, ref_lo, ref_hi, cluster_tol)[1]}

    trace: List[Dict[str, Any]] = []
    converged = False
    iterations = 0
    while iterations < max_iters:
        if np.linalg.norm(hi - lo) <= bracket_tol:
            converged = True
            break
        mid = 0.5 * (lo + hi)
        label, settle = _commit(evolve(system, seq, mid[None, :], start, horizon)[0], ref_lo, ref_hi, cluster_tol)
        iterations += 1
        if label is None:
            logger.warning("midpoint %s unlabelled after %d steps; returning current bracket", mid.tolist(), horizon)
            break
        if label == "lo":
            lo = mid
        else:
            hi = mid
        escape[label] = settle
        trace.append(
            {
                "iteration": iterations,
                "bracket_length": float(np.linalg.norm(hi - lo)),
                "label": label,
                "escape": int(min(escape["lo"], escape["hi"])),
            }
        )
        logger.debug("bisection %d: bracket %.3g, midpoint -> %s after %d steps", iterations, trace[-1]["bracket_length"], label, settle)
    else:
        converged = bool(np.linalg.norm(hi - lo) <= bracket_tol)

    return SeparatrixResult(
        boundary=0.5 * (lo + hi),
        lo=lo,
        hi=hi,
        bracket_length=float(np.linalg.norm(hi - lo)),
        iterations=iterations,
        converged=converged,
        escape_trace=trace,
    )


@dataclass
class SeparatrixTrack:
    """Approximation of the separatrix entire solution: one boundary point per time step."""

    times: np.ndarray
    points: np.ndarray
    refinements: int

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Write `k, x_1 .. x_N`."""
        path = Path(path)
        dim = self.points.shape[1]
        header = ",".join(["k"] + [f"x_{i + 1}" for i in range(dim)])
        table = np.hstack([self.times[:, None], self.points])
        np.savetxt(path, table, delimiter=",", header=header, comments="", fmt=["%d"] + ["%.17g"] * dim)
        return path


def separatrix_track(
    system: InputDrivenSystem,
    seq: InputSequence,
    lo: np.ndarray,
    hi: np.ndarray,
    start: int,
    steps: int,
    bracket_tol: float = 1e-9,
    separation: float = 1e-4,
    horizon: int = 600,
    cluster_tol: float = 1e-3,
) -> SeparatrixTrack:
    """Follow the basin boundary forward in time by alternating bisection and evolution.

    The bracket is refined to `bracket_tol`, both ends are evolved together while they stay
    within `separation`, and the (still straddling) pair is bisected again.
    """
    times: List[int] = []
    points: List[np.ndarray] = []
    refinements = 0
    k = start
    lo = np.array(lo, dtype=np.float64)
    hi = np.array(hi, dtype=np.float64)
    while k < start + steps:
        result = separatrix_bisect(
            system, seq, lo, hi, horizon=horizon, start=k, cluster_tol=cluster_tol, bracket_tol=bracket_tol
        )
        refinements += 1
        pair = np.stack([result.lo, result.hi])
        times.append(k)
        points.append(result.boundary)
        for pair in iterate(system, seq, pair, k, start + steps - k):
            k += 1
            times.append(k)
            points.append(0.5 * (pair[0] + pair[1]))
            if np.linalg.norm(pair[1] - pair[0]) > separation:
                break
        lo, hi = pair[0], pair[1]
        # the last recorded point is re-bisected, so drop it unless the run ends here
        if k < start + steps:
            times.pop()
            points.pop()
    return SeparatrixTrack(times=np.array(times), points=np.array(points), refinements=refinements)


def hausdorff_semidistance(a: Sequence[Sequence[float]], b: Sequence[Sequence[float]]) -> float:
    """h(A, B) = max over a in A of min over b in B of |a - b|; not symmetric.

    Raises:
        EstimationError: when either set is empty.
    """
    first = np.array(a, dtype=np.float64, ndmin=2)
    second = np.array(b, dtype=np.float64, ndmin=2)
    if first.size == 0 or second.size == 0:
        raise EstimationError("Hausdorff semi-distance of an empty set")
    return float(cdist(first, second).min(axis=1).max())


def hausdorff_distance(a: Sequence[Sequence[float]], b: Sequence[Sequence[float]]) -> float:
    """Symmetric Hausdorff distance max(h(A, B), h(B, A))."""
    return max(hausdorff_semidistance(a, b), hausdorff_semidistance(b, a))
