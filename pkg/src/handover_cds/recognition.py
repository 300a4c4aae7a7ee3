"""Handover-vs-other intent recognition on a streaming leader trajectory.

Windows of (position, velocity) samples are scored by their average log
density under the leader's learned dynamics mixture; a calibrated
threshold plus hysteresis and a proximity gate turn the scores into a
stable intent label that gates the follower's coupling.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import jsonio
from .errors import FormatError, InputError
from .gaussians import log_density
from .seds import StableDS, State
from .trajectories import DemoSet

RECOGNIZER_DOC_VERSION = 1


class IntentLabel(enum.Enum):
    HANDOVER = "handover"
    OTHER = "other"


@dataclass(frozen=True)
class RecognizerConfig:
    """Windowing, calibrated score threshold, hysteresis, proximity gate."""

    window: int = 25                  # samples; 0.5 s at 50 Hz
    threshold: float = 0.0            # average log-likelihood cutoff
    spread: float = 0.0               # calibrated score-population gap
    hysteresis_on: int = 3
    hysteresis_off: int = 5
    proximity_gate: float = 0.20      # meters

    def __post_init__(self):
        if self.window < 3:
            raise InputError("window must be >= 3 samples")
        if self.hysteresis_on < 1 or self.hysteresis_off < 1:
            raise InputError("hysteresis counts must be >= 1")
        if self.proximity_gate <= 0.0:
            raise InputError("proximity gate must be positive")


@dataclass(frozen=True)
class IntentEstimate:
    label: IntentLabel
    score: float          # average per-sample log-likelihood
    since_t: float        # when the current label took effect


def _joint_rows(states: Sequence[State]) -> np.ndarray:
    return np.array(
        [np.concatenate([s.position, s.velocity]) for s in states]
    )


def score_window(leader_model: StableDS, window: Sequence[State],
                 config: RecognizerConfig = RecognizerConfig()) -> float:
    """Mean log density of the samples under the leader dynamics mixture."""
    if len(window) < config.window:
        raise InputError(
            f"window has {len(window)} samples, needs {config.window}"
        )
    rows = _joint_rows(window)
    return float(np.mean(log_density(leader_model.dynamics_mix, rows)))


class StreamClassifier:
    """Stateful per-session classifier; feed samples in time order."""

    def __init__(self, leader_model: StableDS, config: RecognizerConfig):
        self.model = leader_model
        self.config = config
        self._log_pdfs: deque[float] = deque(maxlen=config.window)
        self._last_t = -np.inf
        self._label = IntentLabel.OTHER
        self._since_t = 0.0
        self._on_streak = 0
        self._off_streak = 0

    @property
    def label(self) -> IntentLabel:
        return self._label

    def reset(self) -> None:
        self._log_pdfs.clear()
        self._last_t = -np.inf
        self._label = IntentLabel.OTHER
        self._since_t = 0.0
        self._on_streak = 0
        self._off_streak = 0

    def update(self, t: float, sample: State) -> IntentEstimate:
        """Ingest one timestamped sample and return the current estimate.

        The label flips to Handover only after ``hysteresis_on``
        consecutive super-threshold windows and either the leader within
        the proximity gate or a score margin above twice the calibrated
        spread; it flips back after ``hysteresis_off`` sub-threshold
        windows.
        """
        if t <= self._last_t:
            raise InputError(
                f"out-of-order timestamp {t} after {self._last_t}"
            )
        if not self._log_pdfs:
            self._since_t = t
        self._last_t = t
        row = np.concatenate([sample.position, sample.velocity])
        self._log_pdfs.append(float(log_density(self.model.dynamics_mix,
                                                row)))
        score = float(np.mean(self._log_pdfs))
        if len(self._log_pdfs) < self.config.window:
            return IntentEstimate(self._label, score, self._since_t)

        above = score > self.config.threshold
        self._on_streak = self._on_streak + 1 if above else 0
        self._off_streak = self._off_streak + 1 if not above else 0

        if self._label is IntentLabel.OTHER:
            proximity = float(np.linalg.norm(
                sample.position - self.model.attractor
            ))
            gate_open = (
                proximity <= self.config.proximity_gate
                or score - self.config.threshold > 2.0 * self.config.spread
            )
            if self._on_streak >= self.config.hysteresis_on and gate_open:
                self._label = IntentLabel.HANDOVER
                self._since_t = t
                self._on_streak = 0
                self._off_streak = 0
        else:
            if self._off_streak >= self.config.hysteresis_off:
                self._label = IntentLabel.OTHER
                self._since_t = t
                self._on_streak = 0
                self._off_streak = 0
        return IntentEstimate(self._label, score, self._since_t)


def classify_stream(classifier: StreamClassifier, t: float,
                    new_sample: State) -> IntentEstimate:
    return classifier.update(t, new_sample)


class CausalVelocityEstimator:
    """Turns a raw position stream into (smoothed position, velocity).

    Trailing moving average over the last ``window`` samples, then a
    backward difference of the filtered positions; the causal counterpart
    of the window-5 smoothing applied to training demos. Raw differencing
    at millimeter sensor noise produces velocity noise on the order of
    the real arm speeds and destabilizes the intent label.
    """

    def __init__(self, window: int = 5):
        if window < 1:
            raise InputError("window must be >= 1")
        self._positions: deque[np.ndarray] = deque(maxlen=window)
        self._last: tuple[float, np.ndarray] | None = None

    def reset(self) -> None:
        self._positions.clear()
        self._last = None

    def update(self, t: float, position) -> State:
        position = np.asarray(position, dtype=np.float64)
        self._positions.append(position)
        smoothed = np.mean(self._positions, axis=0)
        if self._last is None:
            velocity = np.zeros_like(smoothed)
        else:
            t_prev, prev = self._last
            if t <= t_prev:
                raise InputError(
                    f"out-of-order timestamp {t} after {t_prev}"
                )
            velocity = (smoothed - prev) / (t - t_prev)
        self._last = (t, smoothed)
        return State(smoothed, velocity)


def replay_demo(classifier: StreamClassifier, demo) -> list[IntentEstimate]:
    """Feed a preprocessed demonstration through the classifier."""
    estimates = []
    for t, pos, vel in zip(demo.t, demo.positions, demo.velocities):
        estimates.append(classifier.update(float(t), State(pos, vel)))
    return estimates


@dataclass(frozen=True)
class CalibrationReport:
    """Score populations and the derived operating point.

    Window scores (sliding, stride 1) set the threshold; per-demo mean
    scores are the trial-level likelihood summary whose populations must
    separate cleanly for the recognizer to be trustworthy.
    """

    threshold: float
    spread: float
    handover_p5: float
    place_p95: float
    accuracy: float
    n_handover: int
    n_place: int
    handover_scores: np.ndarray       # per-window
    place_scores: np.ndarray          # per-window
    handover_demo_scores: np.ndarray  # per-trial means
    place_demo_scores: np.ndarray

    def fully_separated(self) -> bool:
        """Trial-level populations split exactly at the threshold."""
        return (
            float(self.handover_demo_scores.min()) > self.threshold
            > float(self.place_demo_scores.max())
        )

    def histogram(self, bins: int = 24) -> dict:
        all_scores = np.concatenate([self.handover_scores,
                                     self.place_scores])
        edges = np.histogram_bin_edges(all_scores, bins=bins)
        h_counts, _ = np.histogram(self.handover_scores, bins=edges)
        p_counts, _ = np.histogram(self.place_scores, bins=edges)
        return {
            "edges": [float(e) for e in edges],
            "handover": [int(c) for c in h_counts],
            "place": [int(c) for c in p_counts],
        }


def _demo_window_scores(model: StableDS, demo, window: int) -> np.ndarray:
    rows = np.hstack([demo.positions, demo.velocities])
    log_pdfs = log_density(model.dynamics_mix, rows)
    if log_pdfs.shape[0] < window:
        return np.empty(0)
    kernel = np.ones(window) / window
    return np.convolve(log_pdfs, kernel, mode="valid")


def calibrate_recognizer(
    leader_model: StableDS,
    handover_demos: DemoSet,
    place_demos: DemoSet,
    base_config: RecognizerConfig = RecognizerConfig(),
) -> tuple[RecognizerConfig, CalibrationReport]:
    """Pick the score threshold from held-out demos and measure accuracy.

    Threshold: midpoint between the 5th percentile of handover window
    scores and the 95th percentile of place window scores; the spread is
    that same gap. Accuracy replays every trial through a fresh stream
    classifier and scores trial-level predictions.
    """
    if len(handover_demos) == 0 or len(place_demos) == 0:
        raise InputError("calibration needs both handover and place demos")
    h_windows = [
        _demo_window_scores(leader_model, d, base_config.window)
        for d in handover_demos.demos
    ]
    p_windows = [
        _demo_window_scores(leader_model, d, base_config.window)
        for d in place_demos.demos
    ]
    h_scores = np.concatenate(h_windows)
    p_scores = np.concatenate(p_windows)
    if h_scores.size == 0 or p_scores.size == 0:
        raise InputError("demos too short to form a single score window")
    h_p5 = float(np.percentile(h_scores, 5.0))
    p_p95 = float(np.percentile(p_scores, 95.0))
    threshold = 0.5 * (h_p5 + p_p95)
    spread = h_p5 - p_p95
    config = replace(base_config, threshold=threshold, spread=spread)

    correct = 0
    for demo in handover_demos.demos:
        if _trial_prediction(leader_model, config, demo):
            correct += 1
    for demo in place_demos.demos:
        if not _trial_prediction(leader_model, config, demo):
            correct += 1
    total = len(handover_demos) + len(place_demos)
    report = CalibrationReport(
        threshold=threshold,
        spread=spread,
        handover_p5=h_p5,
        place_p95=p_p95,
        accuracy=correct / total,
        n_handover=len(handover_demos),
        n_place=len(place_demos),
        handover_scores=h_scores,
        place_scores=p_scores,
        handover_demo_scores=np.array([
            _demo_mean_score(leader_model, d) for d in handover_demos.demos
        ]),
        place_demo_scores=np.array([
            _demo_mean_score(leader_model, d) for d in place_demos.demos
        ]),
    )
    return config, report


def _demo_mean_score(model: StableDS, demo) -> float:
    rows = np.hstack([demo.positions, demo.velocities])
    return float(np.mean(log_density(model.dynamics_mix, rows)))


def _trial_prediction(model: StableDS, config: RecognizerConfig,
                      demo) -> bool:
    """True when the stream classifier ever declares Handover."""
    classifier = StreamClassifier(model, config)
    for estimate in replay_demo(classifier, demo):
        if estimate.label is IntentLabel.HANDOVER:
            return True
    return False


def recognizer_to_document(config: RecognizerConfig,
                           report: CalibrationReport) -> dict:
    return {
        "version": RECOGNIZER_DOC_VERSION,
        "kind": "recognizer",
        "config": {
            "window": config.window,
            "threshold": float(config.threshold),
            "spread": float(config.spread),
            "hysteresis_on": config.hysteresis_on,
            "hysteresis_off": config.hysteresis_off,
            "proximity_gate": float(config.proximity_gate),
        },
        "calibration": {
            "accuracy": float(report.accuracy),
            "handover_p5": float(report.handover_p5),
            "place_p95": float(report.place_p95),
            "n_handover": report.n_handover,
            "n_place": report.n_place,
            "fully_separated": report.fully_separated(),
            "histogram": report.histogram(),
        },
    }


def recognizer_config_from_document(doc: dict) -> RecognizerConfig:
    if doc.get("kind") != "recognizer":
        raise FormatError("document is not a recognizer bundle")
    cfg = doc["config"]
    return RecognizerConfig(
        window=int(cfg["window"]),
        threshold=float(cfg["threshold"]),
        spread=float(cfg["spread"]),
        hysteresis_on=int(cfg["hysteresis_on"]),
        hysteresis_off=int(cfg["hysteresis_off"]),
        proximity_gate=float(cfg["proximity_gate"]),
    )


def save_recognizer(config: RecognizerConfig, report: CalibrationReport,
                    path) -> None:
    jsonio.write_document(path, recognizer_to_document(config, report))


def load_recognizer(path) -> RecognizerConfig:
    return recognizer_config_from_document(jsonio.read_document(path))
