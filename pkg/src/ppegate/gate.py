"""Airlock entry control: session state machine, identity seam and audit log.

States: Idle, Checking, Granted, Denied, Cooldown. ``step`` is total over
(state, event) pairs; pairs without a transition are logged no-ops.
"""

from __future__ import annotations

import gc
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, FrozenSet, List, Optional, Protocol, Tuple, Union

import numpy as np

from ppegate.classes import ALL_CLASSES, PpeClass
from ppegate.detector import Frame
from ppegate.pipeline import ComplianceDecision, FusionWindow, Pipeline, check_compliance

log = logging.getLogger(__name__)


class ClockRegressionError(RuntimeError):
    pass


class GateError(RuntimeError):
    pass


class AssessmentError(GateError):
    pass


# --- clocks ---------------------------------------------------------------


class MonotonicClock:
    """Wall-clock source that refuses to run backwards."""

    def __init__(self, source: Callable[[], float] = time.monotonic):
        self._source = source
        self._last: Optional[float] = None
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            t = self._source()
            if self._last is not None and t < self._last:
                raise ClockRegressionError(f"clock went from {self._last} back to {t}")
            self._last = t
            return t


class SimulatedClock(MonotonicClock):
    def __init__(self, start: float = 0.0):
        self.t = start
        super().__init__(lambda: self.t)

    def advance(self, dt: float) -> None:
        self.t += dt

    def set(self, t: float) -> None:
        self.t = t


# --- identity ---------------------------------------------------------------


@dataclass(frozen=True)
class IdentityClaim:
    subject_id: Optional[str] = None  # None means Unknown
    authorized: bool = False

    @property
    def unknown(self) -> bool:
        return self.subject_id is None

    def to_json(self) -> dict:
        return {"subject_id": self.subject_id, "authorized": self.authorized}


UNKNOWN = IdentityClaim()


class IdentityProvider(Protocol):
    def identify(self, frame: Frame) -> IdentityClaim:
        ...


class UnknownIdentity:
    """Stub provider; face recognition is not part of this package."""

    def identify(self, frame: Frame) -> IdentityClaim:
        return UNKNOWN


@dataclass
class StaticIdentity:
    subject_id: str
    authorized: bool = True

    def identify(self, frame: Frame) -> IdentityClaim:
        return IdentityClaim(self.subject_id, self.authorized)


# --- states, events, actions --------------------------------------------------


@dataclass(frozen=True)
class Idle:
    pass


@dataclass(frozen=True)
class Checking:
    frames_seen: int
    deadline: float
    streak: int = 0
    last_missing: FrozenSet[PpeClass] = frozenset()


@dataclass(frozen=True)
class Granted:
    subject: Optional[str]


@dataclass(frozen=True)
class Denied:
    reason: str
    missing: FrozenSet[PpeClass] = frozenset()


@dataclass(frozen=True)
class Cooldown:
    until: float


GateState = Union[Idle, Checking, Granted, Denied, Cooldown]
STATE_TYPES = (Idle, Checking, Granted, Denied, Cooldown)


@dataclass(frozen=True)
class PersonDetected:
    pass


@dataclass(frozen=True)
class FrameAssessed:
    decision: ComplianceDecision
    identity: IdentityClaim = UNKNOWN


@dataclass(frozen=True)
class Timeout:
    pass


@dataclass(frozen=True)
class InnerDoorClosed:
    pass


@dataclass(frozen=True)
class Reset:
    pass


GateEvent = Union[PersonDetected, FrameAssessed, Timeout, InnerDoorClosed, Reset]
EVENT_TYPES = (PersonDetected, FrameAssessed, Timeout, InnerDoorClosed, Reset)


@dataclass(frozen=True)
class UnlockInnerDoor:
    subject: Optional[str] = None


@dataclass(frozen=True)
class SignalDeny:
    missing: FrozenSet[PpeClass] = frozenset()
    reason: str = "timeout"


Action = Union[UnlockInnerDoor, SignalDeny]


@dataclass(frozen=True)
class GatePolicy:
    required_classes: FrozenSet[PpeClass] = ALL_CLASSES
    frames_required: int = 1
    check_timeout: float = 15.0
    allow_anonymous: bool = False
    cooldown: float = 3.0

    def __post_init__(self) -> None:
        if self.frames_required < 1:
            raise ValueError("frames_required must be >= 1")
        if self.check_timeout <= 0 or self.cooldown <= 0:
            raise ValueError("timeouts must be positive")

    def authorized(self, identity: IdentityClaim) -> bool:
        if identity.unknown:
            return self.allow_anonymous
        return identity.authorized


def state_name(state: GateState) -> str:
    return type(state).__name__


def _noop(state: GateState, event: GateEvent) -> Tuple[GateState, List[Action]]:
    log.warning("ignored %s in state %s", type(event).__name__, state_name(state))
    return state, []


def step(state: GateState, event: GateEvent, policy: GatePolicy, clock: MonotonicClock) -> Tuple[GateState, List[Action]]:
    """Advance the gate by one event.

    The clock is read once. An expired Cooldown becomes Idle before the event
    is handled, and any non-Reset event reaching an expired Checking state is
    handled as a Timeout.
    """
    now = clock.now()
    if isinstance(event, Reset):
        return Idle(), []
    if isinstance(state, Cooldown) and now >= state.until:
        state = Idle()
    if isinstance(state, Checking) and now >= state.deadline:
        event = Timeout()

    if isinstance(state, Idle):
        if isinstance(event, PersonDetected):
            return Checking(0, now + policy.check_timeout), []
        return _noop(state, event)

    if isinstance(state, Checking):
        if isinstance(event, FrameAssessed):
            ok = event.decision.compliant and policy.authorized(event.identity)
            streak = state.streak + 1 if ok else 0
            if streak >= policy.frames_required:
                subject = event.identity.subject_id
                return Granted(subject), [UnlockInnerDoor(subject)]
            missing = frozenset(event.decision.missing)
            return Checking(state.frames_seen + 1, state.deadline, streak, missing), []
        if isinstance(event, Timeout):
            return Denied("timeout", state.last_missing), [SignalDeny(state.last_missing, "timeout")]
        return _noop(state, event)

    if isinstance(state, Granted):
        if isinstance(event, InnerDoorClosed):
            return Cooldown(now + policy.cooldown), []
        return _noop(state, event)

    if isinstance(state, Denied):
        # the deny signal has been shown; wait out the cooldown
        if isinstance(event, Timeout):
            return Cooldown(now + policy.cooldown), []
        return _noop(state, event)

    if isinstance(state, Cooldown):
        return _noop(state, event)

    raise GateError(f"unknown state {state!r}")


# --- sessions -------------------------------------------------------------------


def _event_record(event: GateEvent) -> dict:
    rec = {"type": "event", "name": type(event).__name__}
    if isinstance(event, FrameAssessed):
        rec["compliant"] = event.decision.compliant
        rec["missing"] = [c.slug for c in sorted(event.decision.missing)]
        rec["subject"] = event.identity.subject_id
        rec["authorized"] = event.identity.authorized
    return rec


def _state_record(state: GateState) -> dict:
    rec = {"type": "outcome", "name": state_name(state)}
    if isinstance(state, Denied):
        rec["reason"] = state.reason
        rec["missing"] = [c.slug for c in sorted(state.missing)]
    if isinstance(state, Granted):
        rec["subject"] = state.subject
    return rec


AuditSink = Callable[[str, dict], None]


@dataclass
class Assessment:
    state: GateState
    present: FrozenSet[PpeClass]
    missing: FrozenSet[PpeClass]
    identity: IdentityClaim
    person_found: bool
    actions: List[Action] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "state": state_name(self.state),
            "per_class_present": {c.slug: c in self.present for c in PpeClass},
            "missing": [c.slug for c in sorted(self.missing)],
            "identity": self.identity.to_json(),
            "person_found": self.person_found,
            "actions": [type(a).__name__ for a in self.actions],
        }


class Session:
    """One airlock session; all events are applied under a single lock."""

    def __init__(
        self,
        policy: GatePolicy,
        clock: MonotonicClock,
        window: Optional[FusionWindow] = None,
        session_id: Optional[str] = None,
        audit: Optional[AuditSink] = None,
    ):
        self.session_id = session_id or uuid.uuid4().hex
        self.policy = policy
        self.clock = clock
        self.window = window
        self.state: GateState = Idle()
        self.history: List[dict] = []
        self.lock = threading.RLock()
        self._audit = audit

    def _record(self, rec: dict) -> None:
        rec = {"t": round(self.clock.now(), 6), "session": self.session_id, **rec}
        self.history.append(rec)
        if self._audit is not None:
            self._audit(self.session_id, rec)

    def dispatch(self, event: GateEvent) -> List[Action]:
        with self.lock:
            before = self.state
            new, actions = step(self.state, event, self.policy, self.clock)
            self.state = new
            self._record(_event_record(event) | {"from": state_name(before), "to": state_name(new)})
            if isinstance(new, (Granted, Denied)) and new != before:
                self._record(_state_record(new))
            if isinstance(new, Idle) and self.window is not None and not isinstance(before, Idle):
                self.window.reset()
            return actions

    def tick(self) -> List[Action]:
        """Deliver time-based events (check deadline, end of deny display)."""
        with self.lock:
            now = self.clock.now()
            s = self.state
            if isinstance(s, Checking) and now >= s.deadline:
                return self.dispatch(Timeout())
            if isinstance(s, Denied):
                return self.dispatch(Timeout())
            if isinstance(s, Cooldown) and now >= s.until:
                self.state = Idle()
                self._record({"type": "outcome", "name": "Idle", "reason": "cooldown elapsed"})
            return []


def session_log(session: Session) -> List[dict]:
    with session.lock:
        return [dict(r) for r in session.history]


FrameDecoder = Callable[[bytes], np.ndarray]


def decode_image(data: bytes) -> np.ndarray:
    import io

    from PIL import Image as PILImage

    with PILImage.open(io.BytesIO(data)) as im:
        if im.format not in ("PNG", "JPEG"):
            raise AssessmentError(f"unsupported image format {im.format}")
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def handle_frame(
    session: Session,
    image: "bytes | np.ndarray",
    pipeline: Pipeline,
    identity: IdentityProvider = UnknownIdentity(),
    frame_id: Optional[str] = None,
    decoder: FrameDecoder = decode_image,
    pipeline_lock: Optional[threading.Lock] = None,
) -> Assessment:
    """Assess one frame and advance the session.

    The decoded pixels only live inside this call: nothing derived from them
    other than class names and decisions survives, and they are never
    written anywhere.
    """
    with session.lock:
        session.tick()
        frame_id = frame_id or f"{session.session_id}-{len(session.history)}"
        try:
            pixels = decoder(image) if isinstance(image, (bytes, bytearray)) else image
            frame = Frame(frame_id, pixels)
            claim = identity.identify(frame)
            if pipeline_lock is not None:
                with pipeline_lock:
                    result = pipeline.process(frame, session.window or pipeline.new_window())
            else:
                result = pipeline.process(frame, session.window or pipeline.new_window())
        except Exception as exc:
            raise AssessmentError(f"frame assessment failed: {exc}") from exc
        finally:
            pixels = frame = None  # noqa: F841 - drop frame references before answering
        gc.collect(0)

        primary = result.primary
        if primary is None or primary.error is not None:
            return Assessment(session.state, frozenset(), frozenset(), claim, False)
        present = result.fused_present if result.fused_present is not None else primary.present_classes
        decision = check_compliance(present, session.policy.required_classes)
        actions: List[Action] = []
        if isinstance(session.state, (Idle, Cooldown)):
            actions += session.dispatch(PersonDetected())
        actions += session.dispatch(FrameAssessed(decision, claim))
        return Assessment(session.state, present, decision.missing, claim, True, actions)


__all__ = [
    "Assessment",
    "Checking",
    "ClockRegressionError",
    "Cooldown",
    "Denied",
    "FrameAssessed",
    "GatePolicy",
    "Granted",
    "IdentityClaim",
    "Idle",
    "InnerDoorClosed",
    "MonotonicClock",
    "PersonDetected",
    "Reset",
    "Session",
    "SignalDeny",
    "SimulatedClock",
    "StaticIdentity",
    "Timeout",
    "UnknownIdentity",
    "UnlockInnerDoor",
    "handle_frame",
    "session_log",
    "step",
]
