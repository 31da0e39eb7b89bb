"""Serving requests and their lifecycle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .fabric import ConfigError

# lifecycle states; transitions are checked by Request.advance
QUEUED = "queued"
PREFILLING = "prefilling"
KV_READY = "kv_ready"
TRANSFERRING = "transferring"
DECODING = "decoding"
DONE = "done"
FAILED = "failed"

_NEXT = {
    QUEUED: {PREFILLING, FAILED},
    PREFILLING: {KV_READY, FAILED, QUEUED},
    KV_READY: {TRANSFERRING, FAILED},
    TRANSFERRING: {DECODING, KV_READY, FAILED},
    DECODING: {DONE, FAILED},
    DONE: set(),
    FAILED: set(),
}


@dataclass
class Request:
    id: int
    prompt_len: int
    max_output_len: int = 256
    arrival_ns: int = 0
    prefix_blocks: Tuple[int, ...] = ()
    state: str = QUEUED
    prefill_te: Optional[int] = None
    decode_group: Optional[int] = None
    t_first_token: Optional[int] = None
    t_done: Optional[int] = None
    tokens: List[int] = field(default_factory=list)
    fail_cause: Optional[str] = None
    history: List[Tuple[int, str]] = field(default_factory=list)

    def __post_init__(self):
        if self.prompt_len < 1 or self.max_output_len < 1:
            raise ConfigError("prompt_len and max_output_len must be >= 1")

    def advance(self, state: str, now: int = 0) -> None:
        if state not in _NEXT[self.state]:
            raise ValueError(f"request {self.id}: illegal transition {self.state} -> {state}")
        self.state = state
        self.history.append((int(now), state))

    def fail(self, cause: str, now: int = 0) -> None:
        self.advance(FAILED, now)
        self.fail_cause = cause

    @property
    def finished(self) -> bool:
        return self.state in (DONE, FAILED)

    def prefix_hit_rate(self, cached: set) -> float:
        """Fraction of leading prefix blocks already cached."""
        if not self.prefix_blocks:
            return 0.0
        hit = 0
        for h in self.prefix_blocks:
            if h not in cached:
                break
            hit += 1
        return hit / len(self.prefix_blocks)
