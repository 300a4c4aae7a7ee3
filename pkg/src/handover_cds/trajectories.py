"""Demonstration ingestion, preprocessing, and synthetic generation.

Demos are wrist trajectories tagged with an agent role and an action
label. Preprocessing moves them into the target frame (handover point at
the origin), resamples to a uniform rate, smooths, and fills velocities.
The synthetic generators produce desk-scale handover and place motions
from minimum-jerk profiles so the whole pipeline runs without recorded
data.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import jsonio
from .errors import FormatError, InputError, ParseError

log = logging.getLogger(__name__)

CSV_BASE_COLUMNS = ("demo_id", "role", "action", "t")


class Role(enum.Enum):
    LEADER = "leader"
    FOLLOWER = "follower"


class ActionLabel(enum.Enum):
    HANDOVER = "handover"
    PLACE = "place"


class Frame(enum.Enum):
    WORLD = "world"
    TARGET = "target"


@dataclass(frozen=True)
class Demonstration:
    """One timestamped trajectory of a single agent."""

    t: np.ndarray                      # (n,) seconds, strictly increasing
    positions: np.ndarray              # (n, d) meters
    velocities: Optional[np.ndarray]   # (n, d) m/s, None until preprocessing
    role: Role
    action: ActionLabel
    frame: Frame
    demo_id: str = ""

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        pos = np.asarray(self.positions, dtype=np.float64)
        vel = self.velocities
        if vel is not None:
            vel = np.asarray(vel, dtype=np.float64)
        if t.ndim != 1 or pos.ndim != 2 or pos.shape[0] != t.shape[0]:
            raise InputError(
                f"inconsistent sample shapes t{t.shape} pos{pos.shape}"
            )
        if t.shape[0] < 3:
            raise InputError("demonstration needs at least 3 samples")
        if not np.all(np.diff(t) > 0.0):
            raise InputError("timestamps must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(pos))):
            raise InputError("non-finite demonstration samples")
        if vel is not None and vel.shape != pos.shape:
            raise InputError("velocities shape differs from positions")
        if (
            self.frame is Frame.TARGET
            and self.action is ActionLabel.HANDOVER
            and float(np.linalg.norm(pos[-1])) > 0.05
        ):
            raise InputError(
                "target-frame handover demo ends "
                f"{np.linalg.norm(pos[-1]):.3f} m from the origin"
            )
        for arr in (t, pos, vel):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "velocities", vel)

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def n_samples(self) -> int:
        return self.t.shape[0]

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])


@dataclass(frozen=True)
class DemoSet:
    """A collection of demonstrations sharing one handover point."""

    demos: tuple[Demonstration, ...]
    handover_point: np.ndarray    # (d,) meters, in the demos' frame
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        demos = tuple(self.demos)
        point = np.asarray(self.handover_point, dtype=np.float64)
        if demos:
            d = demos[0].dim
            if any(demo.dim != d for demo in demos):
                raise InputError("demonstrations differ in dimensionality")
            if point.shape != (d,):
                raise InputError(
                    f"handover point shape {point.shape} != ({d},)"
                )
        point.setflags(write=False)
        object.__setattr__(self, "demos", demos)
        object.__setattr__(self, "handover_point", point)

    def __len__(self) -> int:
        return len(self.demos)

    @property
    def dim(self) -> int:
        return self.demos[0].dim

    def by_role(self, role: Role) -> "DemoSet":
        return replace(self, demos=tuple(d for d in self.demos if d.role is role))

    def by_action(self, action: ActionLabel) -> "DemoSet":
        return replace(
            self, demos=tuple(d for d in self.demos if d.action is action)
        )

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        stacked = np.vstack([d.positions for d in self.demos])
        return stacked.min(axis=0), stacked.max(axis=0)


def minimum_jerk(tau):
    """Fifth-order position profile: 0 at tau=0, 1 at tau=1."""
    tau = np.asarray(tau, dtype=np.float64)
    return 10.0 * tau**3 - 15.0 * tau**4 + 6.0 * tau**5


@dataclass(frozen=True)
class GeometryConfig:
    """Desk-scale geometry for the synthetic demonstration generators.

    Boxes are expressed relative to the handover point; axis order is
    (lateral x, proximity y, height z).
    """

    handover_point: tuple[float, ...] = (0.30, 0.40, 1.00)
    leader_start_low: tuple[float, ...] = (-0.05, 0.35, 0.05)
    leader_start_high: tuple[float, ...] = (0.05, 0.55, 0.20)
    follower_start_low: tuple[float, ...] = (-0.05, -0.50, 0.00)
    follower_start_high: tuple[float, ...] = (0.05, -0.30, 0.15)
    duration_range: tuple[float, float] = (1.5, 2.5)
    sample_hz: float = 120.0
    noise_sigma: float = 0.003
    follower_lag: float = 0.3
    # place target offset from the handover point: nearer to the giver
    # along proximity, and down toward the table
    place_offset: tuple[float, ...] = (0.0, 0.15, -0.25)

    @property
    def dim(self) -> int:
        return len(self.handover_point)


def _meta_path(path) -> str:
    return f"{path}.meta.json"


def load_demos(path, infer_handover_point: bool = True) -> DemoSet:
    """Parse the CSV demo contract; returns a world-frame DemoSet.

    Columns: demo_id,role,action,t,<coordinate columns>; rows grouped by
    demo_id and sorted by t. Velocities are left unset. The metadata
    sidecar (``<path>.meta.json``) supplies the handover point; without
    it the mean final leader position over handover demos is used, or the
    origin when inference is disabled (already target-frame files).
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    rows = [row for row in rows if row]
    if not rows:
        raise FormatError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if tuple(header[: len(CSV_BASE_COLUMNS)]) != CSV_BASE_COLUMNS:
        raise FormatError(
            f"header must start with {','.join(CSV_BASE_COLUMNS)}, "
            f"got {','.join(header)}"
        )
    coord_names = header[len(CSV_BASE_COLUMNS):]
    if not coord_names:
        raise FormatError("no coordinate columns in header")
    dim = len(coord_names)

    order: list[str] = []
    grouped: dict[str, dict] = {}
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FormatError(
                f"line {line_no}: expected {len(header)} fields, "
                f"got {len(row)}"
            )
        demo_id = row[0].strip()
        try:
            role = Role(row[1].strip())
            action = ActionLabel(row[2].strip())
        except ValueError as exc:
            raise ParseError(str(exc), line_number=line_no) from exc
        try:
            t = float(row[3])
            coords = [float(v) for v in row[4:]]
        except ValueError as exc:
            raise ParseError(f"bad number: {exc}", line_number=line_no) from exc
        entry = grouped.get(demo_id)
        if entry is None:
            entry = {"role": role, "action": action, "t": [], "pos": []}
            grouped[demo_id] = entry
            order.append(demo_id)
        if entry["t"] and t <= entry["t"][-1]:
            raise ParseError(
                f"non-monotonic t for demo {demo_id!r}", line_number=line_no
            )
        entry["t"].append(t)
        entry["pos"].append(coords)

    demos = []
    for demo_id in order:
        entry = grouped[demo_id]
        try:
            demos.append(
                Demonstration(
                    t=np.asarray(entry["t"]),
                    positions=np.asarray(entry["pos"]),
                    velocities=None,
                    role=entry["role"],
                    action=entry["action"],
                    frame=Frame.WORLD,
                    demo_id=demo_id,
                )
            )
        except InputError as exc:
            raise FormatError(f"demo {demo_id!r}: {exc}") from exc

    metadata = {"source": str(path)}
    handover_point = None
    meta_path = _meta_path(path)
    try:
        meta = jsonio.read_document(meta_path)
        handover_point = np.asarray(meta["handover_point"], dtype=np.float64)
        metadata.update({k: v for k, v in meta.items()
                         if k != "handover_point"})
    except FileNotFoundError:
        if infer_handover_point:
            handover_point = _handover_point_from_finals(demos)
    if handover_point is None:
        handover_point = np.zeros(dim)
    if handover_point.shape != (dim,):
        raise FormatError(
            f"sidecar handover_point has dimension "
            f"{handover_point.shape[0]}, data has {dim}"
        )
    return DemoSet(tuple(demos), handover_point, metadata)


def _handover_point_from_finals(demos) -> Optional[np.ndarray]:
    finals = [
        d.positions[-1]
        for d in demos
        if d.role is Role.LEADER and d.action is ActionLabel.HANDOVER
    ]
    if not finals:
        return None
    return np.mean(finals, axis=0)


def save_demos(demo_set: DemoSet, path) -> None:
    """Write the CSV contract plus the metadata sidecar."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        coord_names = ["x", "y", "z"][: demo_set.dim] if demo_set.dim <= 3 \
            else [f"c{i}" for i in range(demo_set.dim)]
        writer.writerow(list(CSV_BASE_COLUMNS) + coord_names)
        for i, demo in enumerate(demo_set.demos):
            demo_id = demo.demo_id or f"demo{i:03d}"
            for t, pos in zip(demo.t, demo.positions):
                writer.writerow(
                    [demo_id, demo.role.value, demo.action.value,
                     format(t, ".17g")]
                    + [format(v, ".17g") for v in pos]
                )
    meta = {
        "handover_point": [float(v) for v in demo_set.handover_point],
        "source": demo_set.metadata.get("source", "export"),
        "hz": demo_set.metadata.get("hz"),
    }
    jsonio.write_document(_meta_path(path), meta)


def _moving_average(pos: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; the window shrinks symmetrically at the
    edges so affine signals (and both endpoints) pass through unchanged."""
    if window <= 1:
        return pos
    half = window // 2
    out = np.empty_like(pos)
    n = pos.shape[0]
    for i in range(n):
        h = min(half, i, n - 1 - i)
        out[i] = pos[i - h:i + h + 1].mean(axis=0)
    return out


def _central_differences(pos: np.ndarray, dt: float) -> np.ndarray:
    vel = np.empty_like(pos)
    vel[1:-1] = (pos[2:] - pos[:-2]) / (2.0 * dt)
    vel[0] = (pos[1] - pos[0]) / dt
    vel[-1] = (pos[-1] - pos[-2]) / dt
    return vel


def resample_uniform(demo: Demonstration, target_hz: float) -> Demonstration:
    """Linear resampling onto a uniform grid starting at the demo's t0."""
    period = 1.0 / target_hz
    n_new = int(np.floor(demo.duration * target_hz + 1e-9)) + 1
    t_new = demo.t[0] + period * np.arange(n_new)
    pos_new = np.column_stack(
        [np.interp(t_new, demo.t, demo.positions[:, j])
         for j in range(demo.dim)]
    )
    return replace(demo, t=t_new, positions=pos_new, velocities=None)


def preprocess(demo_set: DemoSet, target_hz: float,
               smooth_window: int = 5) -> DemoSet:
    """Move demos to the target frame, resample, smooth, fill velocities.

    Positions are translated so the handover point is the origin, linearly
    resampled to ``target_hz``, smoothed with a centered moving average,
    and differentiated centrally (one-sided at the ends). Demos too short
    to resample and smooth are dropped with a warning recorded in the
    returned metadata.
    """
    if target_hz <= 0.0:
        raise InputError("target_hz must be positive")
    offset = demo_set.handover_point
    kept = []
    dropped = []
    for i, demo in enumerate(demo_set.demos):
        demo_id = demo.demo_id or f"demo{i:03d}"
        if demo.frame is Frame.WORLD:
            demo = replace(demo, positions=demo.positions - offset,
                           frame=Frame.TARGET, velocities=None)
        resampled_n = int(np.floor(demo.duration * target_hz + 1e-9)) + 1
        if resampled_n < max(3, smooth_window):
            dropped.append(demo_id)
            log.warning(
                "dropping demo %s: %d resampled samples is shorter than "
                "the smoothing window", demo_id, resampled_n,
            )
            continue
        demo = resample_uniform(demo, target_hz)
        smoothed = _moving_average(demo.positions, smooth_window)
        vel = _central_differences(smoothed, 1.0 / target_hz)
        kept.append(replace(demo, positions=smoothed, velocities=vel))
    metadata = dict(demo_set.metadata)
    metadata["hz"] = float(target_hz)
    if dropped:
        metadata["dropped_demos"] = dropped
    return DemoSet(tuple(kept), np.zeros_like(offset), metadata)


def trim_leading_rest(demo_set: DemoSet,
                      min_displacement: float = 0.03) -> DemoSet:
    """Drop each demo's leading samples up to its motion onset.

    Onset is the first sample displaced more than ``min_displacement``
    from the demo's start (robust to sensor noise, unlike speed
    thresholds). Pre-motion dwell teaches a point-attractor field to
    stand still far from the attractor, which stalls rollouts passing
    that region; coupling models, by contrast, need the dwell and should
    be fit on untrimmed demos. Demos that never move are dropped with a
    warning.
    """
    kept = []
    dropped = []
    for i, demo in enumerate(demo_set.demos):
        displacement = np.linalg.norm(
            demo.positions - demo.positions[0], axis=1
        )
        moved = np.flatnonzero(displacement > min_displacement)
        if moved.size == 0 or demo.n_samples - moved[0] < 3:
            dropped.append(demo.demo_id or f"demo{i:03d}")
            log.warning("dropping demo %s: no motion onset found",
                        demo.demo_id or i)
            continue
        # keep one pre-onset sample of context; already-moving demos
        # (onset at the second sample) pass through untouched
        onset = max(int(moved[0]) - 1, 0)
        if onset == 0:
            kept.append(demo)
            continue
        vel = None if demo.velocities is None else demo.velocities[onset:]
        kept.append(replace(demo, t=demo.t[onset:],
                            positions=demo.positions[onset:],
                            velocities=vel))
    metadata = dict(demo_set.metadata)
    if dropped:
        metadata["dropped_demos"] = (
            metadata.get("dropped_demos", []) + dropped
        )
    return DemoSet(tuple(kept), demo_set.handover_point, metadata)


def project_yz(demo_set: DemoSet, proximity_axis: int, height_axis: int,
               norm_proximity: bool = False) -> DemoSet:
    """Reduce demos to the 2-D (proximity, height) plane.

    With ``norm_proximity`` the proximity coordinate is replaced by its
    absolute value (velocities get the matching sign flip).
    """
    dim = demo_set.dim
    for axis in (proximity_axis, height_axis):
        if not 0 <= axis < dim:
            raise InputError(f"axis {axis} out of range for dimension {dim}")
    if proximity_axis == height_axis:
        raise InputError("proximity and height axes must be distinct")
    axes = [proximity_axis, height_axis]
    demos = []
    for demo in demo_set.demos:
        pos = demo.positions[:, axes].copy()
        vel = None if demo.velocities is None \
            else demo.velocities[:, axes].copy()
        if norm_proximity:
            sign = np.sign(pos[:, 0])
            pos[:, 0] = np.abs(pos[:, 0])
            if vel is not None:
                vel[:, 0] = sign * vel[:, 0]
        demos.append(replace(demo, positions=pos, velocities=vel))
    point = demo_set.handover_point[axes].copy()
    if norm_proximity:
        point[0] = abs(point[0])
    return DemoSet(tuple(demos), point, dict(demo_set.metadata))


def translate_demoset(demo_set: DemoSet, offset) -> DemoSet:
    """Shift all positions and the handover point by a constant vector."""
    offset = np.asarray(offset, dtype=np.float64)
    demos = tuple(
        replace(d, positions=d.positions + offset) for d in demo_set.demos
    )
    return DemoSet(demos, demo_set.handover_point + offset,
                   dict(demo_set.metadata))


def _uniform_in_box(rng, low, high) -> np.ndarray:
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    if np.any(high < low):
        raise InputError("degenerate start box: high < low")
    return rng.uniform(low, high)


def _minimum_jerk_demo(start, goal, progress, t, noise, role, action,
                       demo_id) -> Demonstration:
    path = start + np.outer(minimum_jerk(progress), goal - start)
    return Demonstration(
        t=t, positions=path + noise, velocities=None,
        role=role, action=action, frame=Frame.WORLD, demo_id=demo_id,
    )


def generate_synthetic_handover(
    n_pairs: int, seed: int, geometry: GeometryConfig = GeometryConfig()
) -> tuple[DemoSet, DemoSet]:
    """Paired leader/follower handover demos, deterministic per seed.

    Leaders run a minimum-jerk reach from a random start box to the
    handover point. Followers run a minimum-jerk reach whose progress is
    a lagged, saturating function of the leader's remaining distance, so
    they arrive just after the leader.
    """
    if n_pairs < 1:
        raise InputError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    point = np.asarray(geometry.handover_point, dtype=np.float64)
    hz = geometry.sample_hz
    leaders, followers = [], []
    for i in range(n_pairs):
        start_l = point + _uniform_in_box(
            rng, geometry.leader_start_low, geometry.leader_start_high
        )
        start_f = point + _uniform_in_box(
            rng, geometry.follower_start_low, geometry.follower_start_high
        )
        # snap the duration to the sample grid so the final sample sits
        # exactly on the handover point
        duration = max(1, round(rng.uniform(*geometry.duration_range) * hz)) / hz
        n_lead = round(duration * hz) + 1
        t_lead = np.arange(n_lead) / hz
        tau = t_lead / duration

        # follower progress: saturating response to the leader's
        # remaining (noise-free) distance, delayed by the lag
        t_follow = np.arange(
            int(np.ceil((duration + geometry.follower_lag) * hz - 1e-9)) + 1
        ) / hz
        t_seen = np.clip(t_follow - geometry.follower_lag, 0.0, duration)
        d_rel = minimum_jerk(t_seen / duration)  # 1 - distance ratio
        progress = np.clip(d_rel, 0.0, 1.0)

        noise_l = rng.normal(0.0, geometry.noise_sigma,
                             (n_lead, geometry.dim))
        noise_f = rng.normal(0.0, geometry.noise_sigma,
                             (t_follow.shape[0], geometry.dim))
        leaders.append(_minimum_jerk_demo(
            start_l, point, tau, t_lead, noise_l,
            Role.LEADER, ActionLabel.HANDOVER, f"lead{i:03d}",
        ))
        followers.append(_minimum_jerk_demo(
            start_f, point, progress, t_follow, noise_f,
            Role.FOLLOWER, ActionLabel.HANDOVER, f"follow{i:03d}",
        ))
    metadata = {"source": "synthetic-handover", "hz": hz, "seed": seed}
    return (
        DemoSet(tuple(leaders), point, dict(metadata)),
        DemoSet(tuple(followers), point, dict(metadata)),
    )


def generate_place_then_handover(
    seed: int,
    geometry: GeometryConfig = GeometryConfig(),
    hz: float = 50.0,
    dwell: float = 0.4,
):
    """Leader scenario: place an object, pick it back up, then hand over.

    Returns (t, positions, segment) in the 2-D target frame, where
    segment codes each sample 0=place, 1=dwell, 2=pickup, 3=handover.
    Used to replay the ambiguous-action sequence against a recognizer.
    """
    rng = np.random.default_rng(seed)
    d = geometry.dim
    axes = [d - 2, d - 1]  # (proximity, height) columns of the boxes
    low = np.asarray(geometry.leader_start_low, dtype=np.float64)[axes]
    high = np.asarray(geometry.leader_start_high, dtype=np.float64)[axes]
    place_pt = np.asarray(geometry.place_offset, dtype=np.float64)[axes]
    start = rng.uniform(low, high)
    lift = rng.uniform(low, high)
    goal = np.zeros(2)

    def segment(p0, p1, duration):
        n = max(2, round(duration * hz))
        tau = np.arange(1, n + 1) / n
        return p0 + np.outer(minimum_jerk(tau), p1 - p0)

    parts = [
        (0, segment(start, place_pt, rng.uniform(1.6, 2.2))),
        (1, np.tile(place_pt, (max(2, round(dwell * hz)), 1))),
        (2, segment(place_pt, lift, rng.uniform(1.2, 1.8))),
        (3, segment(lift, goal, rng.uniform(1.6, 2.2))),
    ]
    positions = np.vstack([np.vstack([start]), *(p for _, p in parts)])
    labels = np.concatenate(
        [[0]] + [np.full(p.shape[0], code) for code, p in parts]
    )
    positions += rng.normal(0.0, geometry.noise_sigma, positions.shape)
    t = np.arange(positions.shape[0]) / hz
    return t, positions, labels


def generate_synthetic_place(
    n: int, seed: int, geometry: GeometryConfig = GeometryConfig()
) -> DemoSet:
    """Leader-role place motions ending on the table, away from the
    handover point; deterministic per seed."""
    if n < 1:
        raise InputError("n must be >= 1")
    rng = np.random.default_rng(seed)
    point = np.asarray(geometry.handover_point, dtype=np.float64)
    target = point + np.asarray(geometry.place_offset, dtype=np.float64)
    hz = geometry.sample_hz
    demos = []
    for i in range(n):
        start = point + _uniform_in_box(
            rng, geometry.leader_start_low, geometry.leader_start_high
        )
        duration = max(1, round(rng.uniform(*geometry.duration_range) * hz)) / hz
        n_samples = round(duration * hz) + 1
        t = np.arange(n_samples) / hz
        noise = rng.normal(0.0, geometry.noise_sigma,
                           (n_samples, geometry.dim))
        demos.append(_minimum_jerk_demo(
            start, target, t / duration, t, noise,
            Role.LEADER, ActionLabel.PLACE, f"place{i:03d}",
        ))
    metadata = {"source": "synthetic-place", "hz": hz, "seed": seed}
    return DemoSet(tuple(demos), point, metadata)
