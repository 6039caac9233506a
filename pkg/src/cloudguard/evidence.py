"""Append-only, digest-chained evidence log.

Each line of a segment file is one canonical JSON entry::

    {"body":{...},"digest":"<sha256>","kind":"record","prev":"<sha256>","seq":7}

``digest`` covers ``seq``, ``kind``, ``body`` and ``prev``; ``prev`` is the
digest of the entry before (64 zeros for the first). Kinds are ``meta``
(run header), ``record`` (one decision per event), ``info`` (informational
evidence) and ``ops`` (approvals, rollbacks).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

from .errors import EvidenceError
from .model import ActionKind, EvidenceRecord, canonical_json, from_doc, to_doc

GENESIS = "0" * 64
SEGMENT_GLOB = "segment-*.ndjson"


def _digest(seq: int, kind: str, body: Mapping[str, Any], prev: str) -> str:
    payload = canonical_json({"seq": seq, "kind": kind, "body": body, "prev": prev})
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _encode_entry(seq: int, kind: str, body_json: str, prev: str) -> Tuple[str, str]:
    """(digest, line) built around an already canonical body.

    Key order is the sorted order canonical_json would produce, so the line
    equals the canonical encoding of the parsed entry.
    """
    tail = f',"kind":"{kind}","prev":"{prev}","seq":{seq}}}'
    digest = hashlib.sha256(f'{{"body":{body_json}{tail}'.encode("utf-8")).hexdigest()
    return digest, f'{{"body":{body_json},"digest":"{digest}"{tail}'


class EvidenceLog:
    """In-memory log, mirrored to segment files when ``directory`` is set."""

    def __init__(self, directory: Union[str, Path, None] = None, segment_size: int = 50_000):
        self.directory = Path(directory) if directory is not None else None
        self.segment_size = segment_size
        self._lines: List[str] = []
        self._entries: List[Dict[str, Any]] = []
        self._records: List[EvidenceRecord] = []
        self._prev = GENESIS
        self._event_ids: set = set()
        self._last_order: Tuple[int, str] = (-1, "")
        self._fh = None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            if any(self.directory.glob(SEGMENT_GLOB)):
                raise EvidenceError("storage-failure", f"{self.directory} already holds a log; use EvidenceLog.open")

    @classmethod
    def open(cls, directory: Union[str, Path]) -> "EvidenceLog":
        """Reopen an existing log directory for reading and further appends."""
        log = cls.__new__(cls)
        log.directory = Path(directory)
        log.segment_size = 50_000
        log._lines, log._entries, log._records = [], [], []
        log._prev, log._event_ids, log._last_order, log._fh = GENESIS, set(), (-1, ""), None
        for line in _read_lines(log.directory):
            entry = json.loads(line)
            log._lines.append(line)
            log._entries.append(entry)
            log._prev = entry["digest"]
            if entry["kind"] == "record":
                body = entry["body"]
                log._records.append(from_doc(EvidenceRecord, body))
                log._event_ids.add(body["event_id"])
                log._last_order = (body["wrote_at"], body["event_id"])
        return log

    def __len__(self) -> int:
        return len(self._entries)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def _write(self, line: str, seq: int) -> None:
        if self.directory is None:
            return
        try:
            if self._fh is None or seq % self.segment_size == 0:
                self.close()
                name = self.directory / f"segment-{seq // self.segment_size:06d}.ndjson"
                self._fh = open(name, "a", encoding="utf-8", newline="\n")
            self._fh.write(line + "\n")
            self._fh.flush()
        except OSError as exc:
            raise EvidenceError("storage-failure", str(exc)) from None

    def _append(self, kind: str, body: Mapping[str, Any]) -> int:
        seq = len(self._entries)
        digest, line = _encode_entry(seq, kind, canonical_json(body), self._prev)
        entry = {"seq": seq, "kind": kind, "body": body, "prev": self._prev, "digest": digest}
        self._write(line, seq)
        self._lines.append(line)
        self._entries.append(entry)
        self._prev = digest
        return seq

    def append(self, record: EvidenceRecord) -> int:
        """Append one decision record; returns its sequence number."""
        if record.event_id in self._event_ids:
            raise EvidenceError("duplicate-event", record.event_id)
        order = (record.wrote_at, record.event_id)
        if order < self._last_order:
            raise EvidenceError("out-of-order", f"{order} after {self._last_order}")
        seq = self._append("record", to_doc(record))
        self._records.append(record)
        self._event_ids.add(record.event_id)
        self._last_order = order
        return seq

    def append_info(self, body: Mapping[str, Any]) -> int:
        return self._append("info", dict(body))

    def append_meta(self, body: Mapping[str, Any]) -> int:
        return self._append("meta", dict(body))

    def append_ops(self, body: Mapping[str, Any]) -> int:
        return self._append("ops", dict(body))

    def entries(self, kind: Optional[str] = None) -> List[Dict[str, Any]]:
        return [e for e in self._entries if kind is None or e["kind"] == kind]

    def records(self) -> List[EvidenceRecord]:
        return list(self._records)

    def meta(self) -> Dict[str, Any]:
        for e in self._entries:
            if e["kind"] == "meta":
                return e["body"]
        return {}

    def text(self) -> str:
        return "".join(line + "\n" for line in self._lines)


def _read_lines(directory: Path) -> List[str]:
    lines: List[str] = []
    for seg in sorted(directory.glob(SEGMENT_GLOB)):
        data = seg.read_text("utf-8")
        parts = data.split("\n")
        # a trailing fragment without newline is an in-flight write; readers skip it
        lines.extend(p for p in parts[:-1])
    return lines


def _raw_lines(source: Union[EvidenceLog, str, Path]) -> List[bytes]:
    if isinstance(source, EvidenceLog) and source.directory is None:
        blob = source.text().encode("utf-8")
    else:
        directory = source.directory if isinstance(source, EvidenceLog) else Path(source)
        blob = b"".join(seg.read_bytes() for seg in sorted(directory.glob(SEGMENT_GLOB)))
    parts = blob.split(b"\n")
    # a missing final newline leaves a fragment behind, which then fails verification
    if parts and parts[-1] == b"":
        parts.pop()
    return parts


def verify_chain(source: Union[EvidenceLog, str, Path]) -> Optional[int]:
    """Recompute the chain. Returns None when intact, else the first bad sequence number."""
    prev = GENESIS
    for expected, raw in enumerate(_raw_lines(source)):
        try:
            text = raw.decode("utf-8")
            entry = json.loads(text)
            if canonical_json(entry) != text:
                return expected
            if entry["seq"] != expected or entry["prev"] != prev:
                return expected
            if _digest(expected, entry["kind"], entry["body"], prev) != entry["digest"]:
                return expected
        except (UnicodeDecodeError, ValueError, KeyError, TypeError):
            return expected
        prev = entry["digest"]
    return None


@dataclass(frozen=True)
class QueryRow:
    seq: int
    record: EvidenceRecord
    label: Optional[Mapping[str, Any]] = None


def query(
    log: EvidenceLog,
    *,
    action: Union[ActionKind, str, None] = None,
    control_id: Optional[str] = None,
    since: Optional[int] = None,
    until: Optional[int] = None,
    labels: Optional[Iterable[Mapping[str, Any]]] = None,
) -> List[QueryRow]:
    """Decision records matching every given filter, in sequence order.

    ``since``/``until`` bound ``wrote_at`` (inclusive). With ``labels``, each
    row carries the ground-truth label for its (resource_id, control_id), if any.
    """
    if action is not None:
        action = ActionKind(action) if not isinstance(action, ActionKind) else action
    index: Dict[Tuple[str, str], Mapping[str, Any]] = {}
    for lab in labels or ():
        index.setdefault((lab["resource_id"], lab["control_id"]), lab)
    rows = []
    for entry in log.entries("record"):
        rec = from_doc(EvidenceRecord, entry["body"])
        if action is not None and rec.action is not action:
            continue
        if control_id is not None and rec.control_id != control_id:
            continue
        if since is not None and rec.wrote_at < since:
            continue
        if until is not None and rec.wrote_at > until:
            continue
        label = index.get((rec.resource_id, rec.control_id)) if labels is not None else None
        rows.append(QueryRow(entry["seq"], rec, label))
    return rows
