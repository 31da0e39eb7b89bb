"""Speculative decoding with multi-token-prediction drafts.

Draft ``i`` is only kept if drafts ``1..i-1`` were kept (chain acceptance), so
with per-position rates ``a_1, a_2, ...`` a step emits on average
``1 + a_1 + a_1*a_2 + ...`` tokens.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from ..fabric import ConfigError

# the five device-side steps of one decode iteration, in order
DECODE_STEPS = ("mtp_forward", "sample_draft", "main_verify", "sample_main", "accept_check")


@dataclass
class MtpConfig:
    num_mtp_layers: int = 1
    drafts_per_step: int = 1
    # one rate for every position, or one rate per draft position
    acceptance: Union[float, Sequence[float]] = 0.9
    bernoulli: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_mtp_layers < 0 or self.drafts_per_step < 0:
            raise ConfigError("mtp layer and draft counts must be >= 0")
        if self.drafts_per_step > self.num_mtp_layers:
            raise ConfigError("each draft needs its own MTP layer")
        for a in self.rates:
            if not 0.0 <= a <= 1.0:
                raise ConfigError(f"acceptance rate {a} outside [0, 1]")

    @property
    def rates(self) -> List[float]:
        if isinstance(self.acceptance, (int, float)):
            return [float(self.acceptance)] * self.drafts_per_step
        rates = [float(a) for a in self.acceptance]
        if len(rates) != self.drafts_per_step:
            raise ConfigError("need one acceptance rate per draft position")
        return rates

    @classmethod
    def from_config(cls, cfg: dict) -> "MtpConfig":
        return cls(**{k: cfg[k] for k in cls.__dataclass_fields__ if k in cfg})


def expected_tokens_per_step(cfg: MtpConfig) -> float:
    total, keep = 1.0, 1.0
    for a in cfg.rates:
        keep *= a
        total += keep
    return total


def solve_next_acceptance(prefix: Sequence[float], target_tokens: float) -> float:
    """Acceptance of the next draft position that makes the chain emit ``target_tokens`` per step."""
    base = expected_tokens_per_step(MtpConfig(len(prefix), len(prefix), list(prefix))) if prefix else 1.0
    keep = float(np.prod(prefix)) if prefix else 1.0
    if keep == 0:
        raise ConfigError("a zero acceptance earlier in the chain blocks every later draft")
    a = (target_tokens - base) / keep
    if not 0.0 <= a <= 1.0:
        raise ConfigError(f"target {target_tokens} not reachable from prefix {list(prefix)}")
    return a


def tpot_ms(forward_ms: float, gap_ms: float, tokens_per_step: float) -> float:
    return (forward_ms + gap_ms) / tokens_per_step


def token_id(seed: int, request: int, position: int, vocab: int = 129_280) -> int:
    """Stand-in token content: a fixed function of (seed, request, position)."""
    h = (seed * 0x9E3779B1 + request * 0x85EBCA77 + position * 0xC2B2AE3D) & 0xFFFFFFFF
    h ^= h >> 15
    h = (h * 0x2C1B3C6D) & 0xFFFFFFFF
    return h % vocab


class AcceptanceSampler:
    """Decides how many drafts each request keeps per step.

    Deterministic mode spreads the expected value with a per-request
    accumulator so the long-run mean is exact; Bernoulli mode draws each
    draft in chain order from a seeded generator.  ``snapshot``/``restore``
    capture the full sampler state for iteration rollback.
    """

    def __init__(self, cfg: MtpConfig):
        self.cfg = cfg
        self._extra = expected_tokens_per_step(cfg) - 1.0
        self._acc: Dict[int, float] = {}
        self._rng = np.random.default_rng(cfg.seed)

    def accepted(self, request: int) -> int:
        if self.cfg.bernoulli:
            n = 0
            for a in self.cfg.rates:
                if self._rng.random() >= a:
                    break
                n += 1
            return n
        acc = self._acc.get(request, 0.0) + self._extra
        # tolerance keeps 0.9 * 10 from landing a hair under 9
        n = int(math.floor(acc + 1e-9))
        self._acc[request] = acc - n
        return n

    def snapshot(self):
        return copy.deepcopy((self._acc, self._rng.bit_generator.state))

    def restore(self, snap) -> None:
        acc, rng_state = copy.deepcopy(snap)
        self._acc = acc
        self._rng.bit_generator.state = rng_state


@dataclass
class DecodeTiming:
    """Per-iteration step costs in ms; ``forward_ms`` is the sum of the five steps."""

    mtp_forward_ms: float = 5.0
    sample_draft_ms: float = 0.0
    main_verify_ms: float = 88.0
    sample_main_ms: float = 0.0
    accept_check_ms: float = 0.0
    gap_ms: float = 2.0

    def __post_init__(self):
        if min(self.step_ms + [self.gap_ms]) < 0:
            raise ConfigError("decode step costs must be >= 0")

    @property
    def step_ms(self) -> List[float]:
        return [self.mtp_forward_ms, self.sample_draft_ms, self.main_verify_ms, self.sample_main_ms,
                self.accept_check_ms]

    @property
    def forward_ms(self) -> float:
        return sum(self.step_ms)

    @classmethod
    def from_forward(cls, forward_ms: float, gap_ms: float, mtp_forward_ms: float = 5.0) -> "DecodeTiming":
        return cls(mtp_forward_ms=mtp_forward_ms, main_verify_ms=forward_ms - mtp_forward_ms, gap_ms=gap_ms)


@dataclass
class IterationResult:
    tokens: Dict[int, List[int]]
    duration_ms: float
    steps: List[Tuple[str, float, float]] = field(default_factory=list)

    @property
    def tokens_emitted(self) -> int:
        return sum(len(t) for t in self.tokens.values())


def decode_iteration(batch: Sequence[int], positions: Dict[int, int], mtp: MtpConfig,
                     sampler: AcceptanceSampler, timing: DecodeTiming = DecodeTiming(),
                     start_ms: float = 0.0) -> IterationResult:
    """Run the five-step loop once for every request id in ``batch``.

    ``positions`` holds each request's next output position and is advanced
    in place.  A request emits its verified token plus every accepted draft.
    """
    if not batch:
        raise ConfigError("decode_iteration needs a non-empty batch")
    steps = []
    t = start_ms
    for name, dt in zip(DECODE_STEPS, timing.step_ms):
        steps.append((name, t, t + dt))
        t += dt
    out: Dict[int, List[int]] = {}
    for rid in batch:
        n = 1 + (sampler.accepted(rid) if mtp.drafts_per_step else 0)
        pos = positions.get(rid, 0)
        out[rid] = [token_id(mtp.seed, rid, pos + i) for i in range(n)]
        positions[rid] = pos + n
    return IterationResult(out, timing.forward_ms + timing.gap_ms, steps)


def measure_tokens_per_step(mtp: MtpConfig, requests: int = 64, iterations: int = 200) -> float:
    """Average tokens per request per step over a simulated run."""
    sampler = AcceptanceSampler(mtp)
    positions: Dict[int, int] = {}
    batch = list(range(requests))
    total = 0
    for _ in range(iterations):
        total += decode_iteration(batch, positions, mtp, sampler).tokens_emitted
    return total / (requests * iterations)
