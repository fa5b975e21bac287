"""
Learning-rate schedules S[g] over real-valued epochs.

Segments are half-open [start, end); S[T] is the last segment's value at T
and S[g > T] = S[T]. A warmup segment interpolates linearly from
``start_rate`` to ``rate`` across its span.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from errors import ConfigurationError, ScheduleError

_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    rate: float
    start_rate: Optional[float] = None  # set for warmup segments

    @property
    def is_warmup(self) -> bool:
        return self.start_rate is not None

    def value_at(self, g: float) -> float:
        if not self.is_warmup:
            return self.rate
        span = self.end - self.start
        return self.start_rate + (self.rate - self.start_rate) * (g - self.start) / span


@dataclass(frozen=True)
class Schedule:
    """A piecewise-constant schedule with optional linear warmup."""

    T: float
    segments: Tuple[Segment, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))
        if self.T < 0:
            raise ScheduleError(f"Schedule length must be >= 0, got {self.T}.")
        if not self.segments:
            if self.T != 0:
                raise ScheduleError("A schedule with positive length needs segments.")
            return
        cursor = 0.0
        for segment in self.segments:
            if abs(segment.start - cursor) > _TOLERANCE:
                raise ScheduleError(f"Segments leave a gap or overlap at epoch {cursor}.")
            if segment.end <= segment.start:
                raise ScheduleError(f"Segment [{segment.start}, {segment.end}) is empty.")
            if segment.rate <= 0 or (segment.is_warmup and segment.start_rate < 0):
                raise ScheduleError(f"Segment [{segment.start}, {segment.end}) needs positive rates.")
            cursor = segment.end
        if abs(cursor - self.T) > _TOLERANCE:
            raise ScheduleError(f"Segments end at {cursor} but T is {self.T}.")

    @property
    def is_empty(self) -> bool:
        return not self.segments

    @property
    def final_rate(self) -> float:
        """S[T]."""
        if self.is_empty:
            raise ScheduleError("An empty schedule has no final rate.")
        return self.segments[-1].value_at(self.T)

    def rates(self) -> List[Tuple[float, float, float]]:
        """(start, end, rate-at-start) triples, handy for printing."""
        return [(seg.start, seg.end, seg.value_at(seg.start)) for seg in self.segments]


@dataclass(frozen=True)
class OptimizerConfig:
    """Nesterov SGD hyperparameters."""

    momentum: float = 0.9
    weight_decay: float = 0.0002
    batch_size: int = 128

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}.")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}.")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}.")


def lr_at(s: Schedule, g: float) -> float:
    """Learning rate at epoch g; epochs past T use S[T]."""
    if g < 0:
        raise ScheduleError(f"Epoch must be >= 0, got {g}.")
    if g >= s.T:
        return s.final_rate
    for segment in s.segments:
        if segment.start <= g < segment.end:
            return segment.value_at(g)
    return s.final_rate


def fine_tune_schedule(s: Schedule, t: float) -> Schedule:
    """Constant S[T] for t epochs (empty when t == 0)."""
    if t < 0:
        raise ScheduleError(f"Retraining time must be >= 0, got {t}.")
    if t == 0:
        return Schedule(0.0, ())
    return Schedule(float(t), (Segment(0.0, float(t), s.final_rate),))


def rewound_schedule(s: Schedule, t: float) -> Schedule:
    """The last t epochs of S, re-based to start at epoch 0."""
    if t < 0:
        raise ScheduleError(f"Retraining time must be >= 0, got {t}.")
    if t > s.T + _TOLERANCE:
        raise ScheduleError(f"Cannot rewind {t} epochs of a {s.T}-epoch schedule.")
    if t == 0:
        return Schedule(0.0, ())
    cut = s.T - t
    pieces = []
    for segment in s.segments:
        if segment.end <= cut:
            continue
        start = max(segment.start, cut)
        start_rate = segment.value_at(start) if segment.is_warmup else None
        pieces.append(Segment(start - cut, segment.end - cut, segment.rate, start_rate))
    first = pieces[0]
    pieces[0] = Segment(0.0, first.end, first.rate, first.start_rate)
    return Schedule(float(t), tuple(pieces))


# ── construction helpers ─────────────────────────────────────────────


def build_schedule(
    T: float,
    segments: Sequence[Dict[str, float]],
    warmup_end: Optional[float] = None,
    peak_rate: Optional[float] = None,
    warmup_start_rate: float = 0.0,
) -> Schedule:
    """Build a Schedule from config-style dictionaries.

    Args:
        T: Total training epochs.
        segments: ``{"start", "end", "rate"}`` entries covering [warmup_end or 0, T].
        warmup_end: End of an optional linear warmup starting at epoch 0.
        peak_rate: Rate reached at ``warmup_end``.
        warmup_start_rate: Rate at epoch 0 of the warmup.
    """
    pieces: List[Segment] = []
    if warmup_end is not None:
        if peak_rate is None:
            raise ConfigurationError("warmup_end requires peak_rate.")
        pieces.append(Segment(0.0, float(warmup_end), float(peak_rate), float(warmup_start_rate)))
    for entry in segments:
        try:
            pieces.append(Segment(float(entry["start"]), float(entry["end"]), float(entry["rate"])))
        except KeyError as exc:
            raise ConfigurationError(f"Schedule segment missing key {exc}.") from exc
    if pieces and pieces[-1].end < T:
        raise ScheduleError(f"Segments end at {pieces[-1].end} but T is {T}.")
    return Schedule(float(T), tuple(pieces))


def cifar_resnet_schedule() -> Schedule:
    """182 epochs: 0.1 until 91, 0.01 until 136, then 0.001."""
    return Schedule(
        182.0,
        (Segment(0.0, 91.0, 0.1), Segment(91.0, 136.0, 0.01), Segment(136.0, 182.0, 0.001)),
    )


def imagenet_resnet_schedule() -> Schedule:
    """90 epochs: warmup to 0.4 over 5 epochs, then x0.1 steps at 30, 60 and 80."""
    return Schedule(
        90.0,
        (
            Segment(0.0, 5.0, 0.4, 0.0),
            Segment(5.0, 30.0, 0.4),
            Segment(30.0, 60.0, 0.04),
            Segment(60.0, 80.0, 0.004),
            Segment(80.0, 90.0, 0.0004),
        ),
    )


def scale_schedule(s: Schedule, new_T: float) -> Schedule:
    """Stretch or shrink a schedule's boundaries to a new total length."""
    if new_T <= 0:
        raise ScheduleError(f"Scaled length must be positive, got {new_T}.")
    factor = new_T / s.T
    pieces = []
    for segment in s.segments:
        end = new_T if segment is s.segments[-1] else segment.end * factor
        pieces.append(Segment(segment.start * factor, end, segment.rate, segment.start_rate))
    return Schedule(float(new_T), tuple(pieces))


def schedule_from_config(cfg: Mapping[str, Any]) -> Schedule:
    """Schedule from a config block ``{"T", "segments", "warmup_end"?, "peak_rate"?}``."""
    if "T" not in cfg:
        raise ConfigurationError("Schedule block needs 'T'.")
    return build_schedule(
        float(cfg["T"]),
        cfg.get("segments", ()),
        cfg.get("warmup_end"),
        cfg.get("peak_rate"),
        float(cfg.get("warmup_start_rate", 0.0)),
    )
