"""Multi-version control: which FM versions are live and what each one serves."""

from __future__ import annotations

import threading
from dataclasses import dataclass

from fmexpert.encoder import EncoderConfig
from fmexpert.hypercast.sync import ServerState


class VersionInactive(LookupError):
    code = "VERSION_INACTIVE"


@dataclass
class VersionEntry:
    """One servable embedding version.

    ``kind == "tae"``: target-aware embeddings from this entry's own weights.
    ``kind == "ue"``: target-independent user embedding pooled from the
    history states of ``source``; recomputed per user only every
    ``refresh_events`` new events.
    """

    tag: str
    encoder: EncoderConfig
    server: ServerState | None
    kind: str = "tae"
    source: str | None = None
    refresh_events: int = 0
    active: bool = True

    def __post_init__(self):
        if self.kind not in ("tae", "ue"):
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        if self.kind == "ue" and not self.source:
            raise ValueError("a user-embedding version needs a source version")
        if self.kind == "tae" and self.server is None:
            raise ValueError("a target-aware version needs weights")


class VersionRegistry:
    def __init__(self):
        self._entries: dict[str, VersionEntry] = {}
        self._lock = threading.Lock()
        self.primary: str | None = None

    def register(self, entry: VersionEntry, primary: bool = False) -> VersionEntry:
        with self._lock:
            if entry.kind == "ue" and entry.source not in self._entries:
                raise KeyError(f"source version {entry.source!r} not registered")
            self._entries[entry.tag] = entry
            if primary or self.primary is None and entry.kind == "tae":
                self.primary = entry.tag
        return entry

    def set_active(self, tag: str, active: bool) -> None:
        with self._lock:
            self._entries[tag].active = active

    def deactivate(self, tag: str) -> None:
        self.set_active(tag, False)

    def entry(self, tag: str) -> VersionEntry:
        return self._entries[tag]

    def __contains__(self, tag: str) -> bool:
        return tag in self._entries

    def _live(self, e: VersionEntry) -> bool:
        # a user-embedding version goes dark with its source
        return e.active and (e.kind != "ue" or self._entries[e.source].active)

    def active(self) -> list[str]:
        return [t for t, e in self._entries.items() if self._live(e)]

    def resolve(self, tag: str | None = None) -> VersionEntry:
        """The single entry a request is served from; inactive or unknown raises."""
        tag = self.primary if tag is None else tag
        e = self._entries.get(tag) if tag is not None else None
        if e is None or not self._live(e):
            raise VersionInactive(f"version {tag!r} is not active")
        return e

    def server_for(self, tag: str) -> ServerState:
        e = self.resolve(tag)
        return e.server if e.kind == "tae" else self.resolve(e.source).server
