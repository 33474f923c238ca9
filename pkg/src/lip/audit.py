"""Semantic audit log: append-only records, replay through the lifecycle, invariant checks."""

from __future__ import annotations

import datetime as _dt
import os
import re
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Optional, Sequence

from .canonical import canonical_bytes, parse_document
from .errors import IllegalTransition, LipError
from .protocol import InteractionState, MessageType, Role, transition


class AuditEvent(str, Enum):
    INTENT_RECEIVED = "IntentReceived"
    ADJUDICATED = "Adjudicated"
    ROUND_COMPLETED = "RoundCompleted"
    NON_PROGRESS = "NonProgress"
    POLICY_DECISION = "PolicyDecision"
    PLAN_COMPOSED = "PlanComposed"
    STABILIZED = "Stabilized"
    EXECUTION_STARTED = "ExecutionStarted"
    EXECUTION_COMPLETED = "ExecutionCompleted"
    FAILURE_SIGNAL = "FailureSignal"
    FALLBACK_TRIGGERED = "FallbackTriggered"
    DISSOLVED = "Dissolved"


class AuditCorrupt(LipError):
    code = "audit_corrupt"

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    interaction_id: str
    event: AuditEvent
    detail: Mapping[str, Any]
    at: int

    def to_doc(self) -> dict:
        return {
            "seq": self.seq,
            "interaction_id": self.interaction_id,
            "event": self.event.value,
            "detail": self.detail,
            "at": self.at,
        }

    def to_bytes(self) -> bytes:
        return canonical_bytes(self.to_doc())

    def projection(self) -> bytes:
        """Record bytes without the log-global sequence number."""
        return canonical_bytes({"interaction_id": self.interaction_id, "event": self.event.value, "detail": self.detail, "at": self.at})

    @classmethod
    def from_doc(cls, doc: Any, line: Optional[int] = None) -> "AuditRecord":
        if not isinstance(doc, dict) or set(doc) != {"seq", "interaction_id", "event", "detail", "at"}:
            raise AuditCorrupt("record must have exactly seq, interaction_id, event, detail, at", line)
        try:
            event = AuditEvent(doc["event"])
        except ValueError:
            raise AuditCorrupt(f"unknown event {doc['event']!r}", line) from None
        seq, at = doc["seq"], doc["at"]
        if isinstance(seq, bool) or not isinstance(seq, int) or isinstance(at, bool) or not isinstance(at, int):
            raise AuditCorrupt("seq and at must be integers", line)
        if not isinstance(doc["detail"], dict) or not isinstance(doc["interaction_id"], str):
            raise AuditCorrupt("detail must be an object and interaction_id a string", line)
        return cls(seq, doc["interaction_id"], event, doc["detail"], at)


class AuditLog:
    """Single appender. With ``path`` all records go to one file; with
    ``directory`` one file per UTC day (``audit-YYYY-MM-DD.jsonl``)."""

    def __init__(self, path: Optional[str | os.PathLike] = None, directory: Optional[str | os.PathLike] = None):
        self.path = Path(path) if path is not None else None
        self.directory = Path(directory) if directory is not None else None
        self._records: list[AuditRecord] = []
        self._seq = 0
        self._lock = threading.Lock()
        existing = self.path if self.path is not None else self.directory
        if existing is not None and existing.exists():
            # continue the sequence of an earlier run
            self._records = read_audit(existing)
            self._seq = self._records[-1].seq if self._records else 0

    def _file_for(self, at: int) -> Optional[Path]:
        if self.path is not None:
            return self.path
        if self.directory is not None:
            day = _dt.datetime.fromtimestamp(at / 1000, tz=_dt.timezone.utc).strftime("%Y-%m-%d")
            return self.directory / f"audit-{day}.jsonl"
        return None

    def append(self, interaction_id: str, event: AuditEvent, detail: Mapping[str, Any], at: int) -> AuditRecord:
        with self._lock:
            self._seq += 1
            record = AuditRecord(self._seq, interaction_id, AuditEvent(event), dict(detail), at)
            line = record.to_bytes() + b"\n"
            target = self._file_for(at)
            if target is not None:
                target.parent.mkdir(parents=True, exist_ok=True)
                with open(target, "ab") as fh:
                    fh.write(line)
            self._records.append(record)
            return record

    def query(self, interaction_id: str) -> list[AuditRecord]:
        return [r for r in self._records if r.interaction_id == interaction_id]

    @property
    def records(self) -> list[AuditRecord]:
        return list(self._records)

    def interaction_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self._records:
            seen.setdefault(r.interaction_id, None)
        return list(seen)


def read_audit(path: str | os.PathLike) -> list[AuditRecord]:
    """Load records from a file or a directory of daily files.

    Raises AuditCorrupt with the 1-based line number for unparsable lines and
    for sequence numbers that fail to increase.
    """
    path = Path(path)
    files = sorted(path.glob("audit-*.jsonl")) if path.is_dir() else [path]
    records: list[AuditRecord] = []
    last = 0
    for f in files:
        with open(f, "rb") as fh:
            for lineno, raw in enumerate(fh, 1):
                if not raw.strip():
                    continue
                try:
                    doc = parse_document(raw)
                except LipError as exc:
                    raise AuditCorrupt(str(exc), lineno) from exc
                rec = AuditRecord.from_doc(doc, lineno)
                if rec.seq <= last:
                    raise AuditCorrupt(f"sequence {rec.seq} does not follow {last}", lineno)
                last = rec.seq
                records.append(rec)
    return records


def group_by_interaction(records: Iterable[AuditRecord]) -> dict[str, list[AuditRecord]]:
    out: dict[str, list[AuditRecord]] = {}
    for r in records:
        out.setdefault(r.interaction_id, []).append(r)
    return out


# -- replay --------------------------------------------------------------------


def _step_for(record: AuditRecord) -> Optional[tuple[MessageType, Role]]:
    e, d = record.event, record.detail
    if e is AuditEvent.ROUND_COMPLETED:
        return (MessageType.OFFER, Role.RESPONDER) if d.get("offers") else None
    if e is AuditEvent.STABILIZED:
        return (MessageType.ACCEPT, Role.COORDINATOR if d.get("solid") else Role.RESPONDER)
    if e is AuditEvent.EXECUTION_STARTED:
        return (MessageType.EXECUTE, Role.INITIATOR)
    if e is AuditEvent.EXECUTION_COMPLETED:
        return (MessageType.COMPLETE, Role.COORDINATOR if d.get("solid") else Role.RESPONDER)
    if e is AuditEvent.FAILURE_SIGNAL:
        return (MessageType.REJECT, Role(d.get("role", "responder")))
    if e is AuditEvent.DISSOLVED:
        return (MessageType.DISSOLVE, Role.COORDINATOR)
    return None


@dataclass
class Replay:
    interaction_id: str
    trajectory: list[InteractionState] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    @property
    def final_state(self) -> Optional[InteractionState]:
        return self.trajectory[-1] if self.trajectory else None


def replay_interaction(records: Sequence[AuditRecord]) -> Replay:
    """Fold one interaction's records through the lifecycle table."""
    rep = Replay(records[0].interaction_id if records else "")
    state: Optional[InteractionState] = None
    for rec in records:
        if rec.event is AuditEvent.INTENT_RECEIVED:
            if state is not None:
                rep.violations.append(f"seq {rec.seq}: second IntentReceived")
                continue
            state = InteractionState.PROPOSED
            rep.trajectory.append(state)
        elif state is None:
            rep.violations.append(f"seq {rec.seq}: {rec.event.value} before IntentReceived")
            continue
        else:
            step = _step_for(rec)
            if step is not None:
                try:
                    nxt = transition(state, *step)
                except IllegalTransition as exc:
                    rep.violations.append(f"seq {rec.seq}: {exc}")
                    continue
                if nxt is not state:
                    state = nxt
                    rep.trajectory.append(state)
        recorded = rec.detail.get("state")
        if recorded is not None and recorded != state.value:
            rep.violations.append(f"seq {rec.seq}: {rec.event.value} records state {recorded}, replay gives {state.value}")
    return rep


def replay(records: Iterable[AuditRecord]) -> dict[str, Replay]:
    return {ix: replay_interaction(recs) for ix, recs in group_by_interaction(records).items()}


# -- invariant checks ----------------------------------------------------------

_SIG = re.compile(r"^[0-9a-f]{128}$")


@dataclass
class CheckResult:
    name: str
    violations: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def _signed(entry: Any) -> bool:
    return isinstance(entry, Mapping) and isinstance(entry.get("signature"), str) and bool(_SIG.match(entry["signature"]))


def verify_records(records: Sequence[AuditRecord]) -> list[CheckResult]:
    legality = CheckResult("state-machine legality")
    dissolution = CheckResult("mandatory dissolution")
    coupling = CheckResult("zero residual coupling")
    signatures = CheckResult("signatures on binding events")
    revocation = CheckResult("grant revocation on dissolution")

    for ix, recs in group_by_interaction(records).items():
        rep = replay_interaction(recs)
        legality.violations.extend(f"{ix}: {v}" for v in rep.violations)

        dissolved = [r for r in recs if r.event is AuditEvent.DISSOLVED]
        if not dissolved:
            dissolution.violations.append(f"{ix}: never dissolved (final state {rep.final_state.value if rep.final_state else '?'})")
        elif len(dissolved) > 1:
            dissolution.violations.append(f"{ix}: dissolved {len(dissolved)} times")
        elif recs[-1] is not dissolved[0]:
            dissolution.violations.append(f"{ix}: records follow the Dissolved record")

        issued = [r.detail["grant_id"] for r in recs if r.event is AuditEvent.POLICY_DECISION and r.detail.get("grant_id")]
        if dissolved:
            final = dissolved[-1].detail
            if final.get("residual_coupling") != 0:
                coupling.violations.append(f"{ix}: residual coupling {final.get('residual_coupling')!r} at dissolution")
            status = {g.get("grant_id"): g.get("revoked") for g in final.get("grants", [])}
            for gid in issued:
                if status.get(gid) is not True:
                    revocation.violations.append(f"{ix}: grant {gid} not revoked at dissolution")
        else:
            coupling.violations.append(f"{ix}: interaction still live, coupling not released")
            if issued:
                revocation.violations.append(f"{ix}: {len(issued)} grant(s) never revoked")

        for r in recs:
            d = r.detail
            if r.event is AuditEvent.STABILIZED and not d.get("solid"):
                accepts = d.get("accepts", {})
                if not accepts or not all(_signed(a) for a in accepts.values()):
                    signatures.violations.append(f"{ix}: seq {r.seq} Stabilized without signed accepts")
            elif r.event is AuditEvent.EXECUTION_STARTED:
                if not _signed(d.get("execute")):
                    signatures.violations.append(f"{ix}: seq {r.seq} Execute not signed")
            elif r.event is AuditEvent.EXECUTION_COMPLETED and not d.get("solid"):
                completes = d.get("completes", {})
                if not completes or not all(_signed(c) for c in completes.values()):
                    signatures.violations.append(f"{ix}: seq {r.seq} Complete not signed")
    return [legality, dissolution, coupling, signatures, revocation]
