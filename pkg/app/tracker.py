# app/tracker.py
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import TopoTrackError
from .cloud_objects import CloudSystem

log = logging.getLogger(__name__)

Pair = Tuple[int, int]

MAIN = "main"
SECONDARY = "secondary"

BIRTH = "birth"
TERMINATION = "termination"
MERGE = "merge"
SPLIT = "split"


class TrackingError(TopoTrackError, ValueError):
    pass


# ---------------------------------------------
# Scores
# ---------------------------------------------

@dataclass(frozen=True)
class ScoreTable:
    """Matching scores between systems of frame t (sources) and t+1 (targets); zeros omitted."""
    scores: Dict[Pair, float]
    row_totals: Dict[int, float]
    col_totals: Dict[int, float]
    sources: Tuple[int, ...] = ()
    targets: Tuple[int, ...] = ()

    def get(self, x: int, y: int) -> float:
        return self.scores.get((x, y), 0.0)

    def scaled(self, factor: float) -> "ScoreTable":
        return _table({k: v * factor for k, v in self.scores.items()}, self.sources, self.targets)


def _table(scores: Dict[Pair, float], sources: Sequence[int], targets: Sequence[int]) -> ScoreTable:
    rows = {x: 0.0 for x in sources}
    cols = {y: 0.0 for y in targets}
    for (x, y), s in sorted(scores.items()):
        rows[x] += s
        cols[y] += s
    return ScoreTable(dict(sorted(scores.items())), rows, cols, tuple(sources), tuple(targets))


def compute_matching_scores(
    coupling: np.ndarray,
    systems_t: Sequence[CloudSystem],
    systems_t1: Sequence[CloudSystem],
    nodes_t: Sequence[int],
    nodes_t1: Sequence[int],
) -> ScoreTable:
    """
    S(X, Y) = sum of coupling[x, y] over anchors x of X and y of Y.
    `nodes_t` / `nodes_t1` give the tree node id behind each coupling row / column.
    """
    C = np.asarray(coupling, dtype=np.float64)
    if C.shape != (len(nodes_t), len(nodes_t1)):
        raise TrackingError(f"coupling shape {C.shape} does not match {len(nodes_t)}x{len(nodes_t1)} nodes")
    row_of = {nid: i for i, nid in enumerate(nodes_t)}
    col_of = {nid: j for j, nid in enumerate(nodes_t1)}

    def indices(system: CloudSystem, where: Dict[int, int], side: str) -> np.ndarray:
        missing = sorted(a for a in system.anchors if a not in where)
        if missing:
            raise TrackingError(f"{side} system {system.system_id}: anchors {missing} not in the network")
        return np.array(sorted(where[a] for a in system.anchors), dtype=np.int64)

    rows = {s.system_id: indices(s, row_of, "source") for s in systems_t}
    cols = {s.system_id: indices(s, col_of, "target") for s in systems_t1}

    scores: Dict[Pair, float] = {}
    for x, ri in rows.items():
        block = C[ri]
        for y, cj in cols.items():
            s = float(block[:, cj].sum())
            if s > 0:
                scores[(x, y)] = s
    return _table(scores, sorted(rows), sorted(cols))


# ---------------------------------------------
# Valid and main matches
# ---------------------------------------------

def _best(candidates: Iterable[Tuple[int, float]], areas: Mapping[int, int]) -> Optional[int]:
    # highest score, then larger area, then lower id
    best = None
    for sid, s in candidates:
        key = (s, areas.get(sid, 0), -sid)
        if best is None or key > best[0]:
            best = (key, sid)
    return None if best is None else best[1]


def enumerate_valid_matches(
    scores: ScoreTable,
    r: float = 0.1,
    areas_t: Optional[Mapping[int, int]] = None,
    areas_t1: Optional[Mapping[int, int]] = None,
) -> FrozenSet[Pair]:
    """
    (X, Y) is valid when S(X, Y) > 0 and either X and Y are each other's best match,
    or S(X, Y) >= r * max(S(X, *), S(*, Y)).
    """
    if not (0 < r <= 1):
        raise TrackingError(f"r must lie in (0, 1], got {r}")
    areas_t, areas_t1 = areas_t or {}, areas_t1 or {}

    out_of: Dict[int, List[Tuple[int, float]]] = {}
    into: Dict[int, List[Tuple[int, float]]] = {}
    for (x, y), s in scores.scores.items():
        out_of.setdefault(x, []).append((y, s))
        into.setdefault(y, []).append((x, s))
    best_y = {x: _best(c, areas_t1) for x, c in out_of.items()}
    best_x = {y: _best(c, areas_t) for y, c in into.items()}

    valid = set()
    for (x, y), s in scores.scores.items():
        if s <= 0:
            continue
        mutual = best_y[x] == y and best_x[y] == x
        if mutual or s >= r * max(scores.row_totals[x], scores.col_totals[y]):
            valid.add((x, y))
    return frozenset(valid)


def select_main_matching(
    valid: Iterable[Pair], areas_t: Mapping[int, int], areas_t1: Mapping[int, int]
) -> Dict[int, int]:
    """
    Greedy one-to-one matching: sources by descending area take their largest
    still-unmatched valid target. Area ties go to the lower system id.
    """
    options: Dict[int, List[int]] = {}
    for x, y in valid:
        if x not in areas_t or y not in areas_t1:
            raise TrackingError(f"no area for pair ({x}, {y})")
        options.setdefault(x, []).append(y)

    taken = set()
    main: Dict[int, int] = {}
    for x in sorted(options, key=lambda s: (-areas_t[s], s)):
        free = [y for y in options[x] if y not in taken]
        if free:
            y = min(free, key=lambda s: (-areas_t1[s], s))
            main[x] = y
            taken.add(y)
    return dict(sorted(main.items()))


@dataclass(frozen=True)
class PairMatching:
    scores: ScoreTable
    valid: FrozenSet[Pair]
    main: Dict[int, int]


def track_pair(
    coupling: np.ndarray,
    systems_t: Sequence[CloudSystem],
    systems_t1: Sequence[CloudSystem],
    nodes_t: Sequence[int],
    nodes_t1: Sequence[int],
    r: float = 0.1,
) -> PairMatching:
    """Scores, valid links and main matching for one transition t -> t+1."""
    scores = compute_matching_scores(coupling, systems_t, systems_t1, nodes_t, nodes_t1)
    areas_t = {s.system_id: s.area_px for s in systems_t}
    areas_t1 = {s.system_id: s.area_px for s in systems_t1}
    valid = enumerate_valid_matches(scores, r, areas_t, areas_t1)
    return PairMatching(scores, valid, select_main_matching(valid, areas_t, areas_t1))


def empty_matching() -> PairMatching:
    return PairMatching(_table({}, (), ()), frozenset(), {})


# ---------------------------------------------
# Trajectories
# ---------------------------------------------

@dataclass
class Trajectory:
    trajectory_id: int
    kind: str
    entries: List[Tuple[int, int]] = field(default_factory=list)   # (time_index, system_id)
    split_born: bool = False

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def start(self) -> int:
        return self.entries[0][0]

    @property
    def end(self) -> int:
        return self.entries[-1][0]


@dataclass(frozen=True)
class TrackEvent:
    time_index: int
    kind: str
    from_ids: Tuple[int, ...]
    to_ids: Tuple[int, ...]


@dataclass
class TrajectorySet:
    trajectories: List[Trajectory]
    events: List[TrackEvent]
    frames: int

    def main(self) -> List[Trajectory]:
        return [t for t in self.trajectories if t.kind == MAIN]

    def secondary(self) -> List[Trajectory]:
        return [t for t in self.trajectories if t.kind == SECONDARY]

    def events_of(self, kind: str) -> List[TrackEvent]:
        return [e for e in self.events if e.kind == kind]


def assemble_trajectories(
    matchings: Sequence[PairMatching], frame_systems: Sequence[Sequence[int]]
) -> TrajectorySet:
    """
    Chain main matches into main trajectories, frame by frame.

    Non-main valid links become events at t+1: a merge when the target also has a
    main predecessor (grouped by target), a split otherwise (grouped by source). A
    split-off target starts a new main trajectory without a birth event. Sources
    that neither continue nor merge terminate at t. Each non-main link is also kept
    as a two-entry secondary trajectory.
    """
    frames = len(frame_systems)
    if frames == 0:
        raise TrackingError("no frames to assemble")
    if len(matchings) != frames - 1:
        raise TrackingError(f"{len(matchings)} transitions for {frames} frames")

    mains: List[Trajectory] = []
    links: List[Trajectory] = []
    events: List[TrackEvent] = []

    def start(t: int, sid: int, split_born: bool = False) -> Trajectory:
        traj = Trajectory(len(mains) + 1, MAIN, [(t, sid)], split_born)
        mains.append(traj)
        return traj

    active: Dict[int, Trajectory] = {}
    for sid in sorted(frame_systems[0]):
        active[sid] = start(0, sid)
        events.append(TrackEvent(0, BIRTH, (), (sid,)))

    for t, pm in enumerate(matchings):
        here, there = set(frame_systems[t]), set(frame_systems[t + 1])
        for x, y in pm.valid:
            if x not in here or y not in there:
                raise TrackingError(f"pair {t}->{t + 1}: link ({x}, {y}) names an unknown system")

        nxt: Dict[int, Trajectory] = {}
        for x, y in sorted(pm.main.items()):
            traj = active[x]
            traj.entries.append((t + 1, y))
            nxt[y] = traj

        main_links = set(pm.main.items())
        has_pred = set(pm.main.values())
        merges: Dict[int, List[int]] = {}
        splits: Dict[int, List[int]] = {}
        for x, y in sorted(pm.valid - main_links):
            if y in has_pred:
                merges.setdefault(y, []).append(x)
            else:
                splits.setdefault(x, []).append(y)
            links.append(Trajectory(0, SECONDARY, [(t, x), (t + 1, y)]))

        merging = {x for xs in merges.values() for x in xs}
        for y, xs in sorted(merges.items()):
            src = next(x for x, yy in pm.main.items() if yy == y)
            events.append(TrackEvent(t + 1, MERGE, tuple(sorted(set(xs) | {src})), (y,)))
        for x, ys in sorted(splits.items()):
            to = set(ys) | ({pm.main[x]} if x in pm.main else set())
            events.append(TrackEvent(t + 1, SPLIT, (x,), tuple(sorted(to))))
            for y in sorted(ys):
                if y not in nxt:
                    nxt[y] = start(t + 1, y, split_born=True)

        for x in sorted(here):
            if x not in pm.main and x not in merging:
                events.append(TrackEvent(t, TERMINATION, (x,), ()))
        for y in sorted(there - set(nxt)):
            nxt[y] = start(t + 1, y)
            events.append(TrackEvent(t + 1, BIRTH, (), (y,)))
        active = nxt

    for i, link in enumerate(links, start=len(mains) + 1):
        link.trajectory_id = i
    order = {BIRTH: 0, SPLIT: 1, MERGE: 2, TERMINATION: 3}
    events.sort(key=lambda e: (e.time_index, order[e.kind], e.from_ids, e.to_ids))

    log.info(
        "%d main trajectories, %d secondary links, %d merges, %d splits over %d frames",
        len(mains), len(links),
        sum(e.kind == MERGE for e in events), sum(e.kind == SPLIT for e in events), frames,
    )
    return TrajectorySet(mains + links, events, frames)
