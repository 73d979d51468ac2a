import datetime
import sys
import threading
from typing import Any, Dict, List, Optional


class AnalysisEvent:
    def __init__(self, stage, state, reason, context=None, payload=None):
        self.stage = stage
        self.timestamp = datetime.datetime.now().isoformat()
        self.state = state  # OK | WARNING | FAILED
        self.reason = reason
        self.context = context or {}
        self.payload = payload or {}

    def to_dict(self, with_timestamp=True):
        event = {
            "stage": self.stage,
            "state": self.state,
            "reason": self.reason,
            "context": self.context,
            "payload": self.payload
        }
        if with_timestamp:
            event["timestamp"] = self.timestamp
        return event


class AnalysisManager:
    """
    Collects the events emitted while a command runs.
    Thread-safe; history is bounded like the trading audit trail it grew from.
    """

    MAX_HISTORY = 500

    def __init__(self, quiet: bool = False):
        self.quiet = quiet
        self.event_history: List[AnalysisEvent] = []
        self.lock = threading.Lock()

    def emit_event(self, event: AnalysisEvent) -> None:
        with self.lock:
            self.event_history.append(event)
            if len(self.event_history) > self.MAX_HISTORY:
                self.event_history.pop(0)
        if not self.quiet:
            marker = "" if event.state == "OK" else f"{event.state}: "
            print(f"[{event.stage}] {marker}{event.reason}", file=sys.stderr)

    def info(self, stage: str, reason: str, **context: Any) -> None:
        self.emit_event(AnalysisEvent(stage, "OK", reason, context=context))

    def warn(self, stage: str, reason: str, **context: Any) -> None:
        self.emit_event(AnalysisEvent(stage, "WARNING", reason, context=context))

    def fail(self, stage: str, reason: str, **context: Any) -> None:
        self.emit_event(AnalysisEvent(stage, "FAILED", reason, context=context))

    def warnings(self) -> List[Dict[str, Any]]:
        """Warning events without timestamps, in emission order."""
        with self.lock:
            return [e.to_dict(with_timestamp=False) for e in self.event_history if e.state == "WARNING"]

    def get_audit_trail(self, limit: Optional[int] = 50) -> List[Dict[str, Any]]:
        with self.lock:
            events = self.event_history if limit is None else self.event_history[-limit:]
            return [e.to_dict() for e in events]


def resolve_manager(manager: Optional[AnalysisManager]) -> AnalysisManager:
    return manager if manager is not None else AnalysisManager(quiet=True)
