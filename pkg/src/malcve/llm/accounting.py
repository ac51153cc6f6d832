"""Token rate limiting and exact cost bookkeeping."""
from __future__ import annotations

import threading
import time
from collections import deque
from collections.abc import Callable, Iterator, Mapping
from contextlib import contextmanager
from dataclasses import dataclass
from decimal import Decimal
from fractions import Fraction

from ..errors import ConfigError, MalcveError

PER_MILLION = 1_000_000


class UnknownModelError(MalcveError, KeyError):
    pass


class RateBudget:
    """Sliding-window token budget shared by every LLM caller in the process.

    A grant of ``n`` tokens is admitted only if the tokens granted in the
    preceding ``window`` seconds plus ``n`` stay within ``tokens_per_minute``.
    ``clock`` and ``sleep`` are injectable so tests can run on virtual time.
    """

    def __init__(self, tokens_per_minute: int = 200_000, requests_in_flight_max: int = 8,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep, window: float = 60.0):
        if tokens_per_minute <= 0 or requests_in_flight_max <= 0:
            raise ConfigError("rate budget limits must be positive")
        self.tokens_per_minute = tokens_per_minute
        self.requests_in_flight_max = requests_in_flight_max
        self.clock = clock
        self.sleep = sleep
        self.window = window
        self._grants: deque[tuple[float, int]] = deque()
        self._in_window = 0
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(requests_in_flight_max)

    def _expire(self, now: float) -> None:
        while self._grants and self._grants[0][0] <= now - self.window:
            _, n = self._grants.popleft()
            self._in_window -= n

    def acquire(self, tokens: int) -> float:
        """Block until *tokens* fit in the window; return the grant time."""
        if tokens > self.tokens_per_minute:
            raise ValueError(f"request of {tokens} tokens exceeds the {self.tokens_per_minute}/min budget")
        while True:
            with self._lock:
                now = self.clock()
                self._expire(now)
                if self._in_window + tokens <= self.tokens_per_minute:
                    self._grants.append((now, tokens))
                    self._in_window += tokens
                    return now
                wait = self._grants[0][0] + self.window - now
            self.sleep(max(wait, 1e-6))

    @contextmanager
    def reserve(self, tokens: int) -> Iterator[None]:
        with self._slots:
            self.acquire(tokens)
            yield


@dataclass(frozen=True)
class Price:
    """Prices in micro-currency units per one million tokens."""

    input_per_m: int
    output_per_m: int
    embedding_per_m: int = 0


class CostLedger:
    """Per-model token counters with an exact running total.

    The total is kept in pico-units (micro-currency per million tokens times
    tokens), so every charge is an integer and sums never round.
    """

    def __init__(self, prices: Mapping[str, Price]):
        self.prices = dict(prices)
        self.counters: dict[str, dict[str, int]] = {}
        self.total_pico = 0
        self._lock = threading.Lock()

    def fresh(self) -> CostLedger:
        return CostLedger(self.prices)

    def _price(self, model_id: str) -> Price:
        try:
            return self.prices[model_id]
        except KeyError:
            raise UnknownModelError(f"no price configured for model {model_id!r}") from None

    def charge(self, model_id: str, in_tokens: int = 0, out_tokens: int = 0,
               embedding_tokens: int = 0) -> CostLedger:
        if min(in_tokens, out_tokens, embedding_tokens) < 0:
            raise ValueError("token counts must be non-negative")
        price = self._price(model_id)
        cost = (in_tokens * price.input_per_m + out_tokens * price.output_per_m
                + embedding_tokens * price.embedding_per_m)
        with self._lock:
            c = self.counters.setdefault(model_id, {"input": 0, "output": 0, "embedding": 0})
            c["input"] += in_tokens
            c["output"] += out_tokens
            c["embedding"] += embedding_tokens
            self.total_pico += cost
        return self

    def merge(self, other: CostLedger) -> CostLedger:
        for model_id, c in sorted(other.counters.items()):
            self.charge(model_id, c["input"], c["output"], c["embedding"])
        return self

    @property
    def total_micro(self) -> Fraction:
        return Fraction(self.total_pico, PER_MILLION)

    @property
    def total(self) -> Decimal:
        """Total in whole currency units, exact."""
        return Decimal(self.total_pico) / Decimal(PER_MILLION * PER_MILLION)

    def recomputed_pico(self) -> int:
        return sum(c["input"] * self.prices[m].input_per_m + c["output"] * self.prices[m].output_per_m
                   + c["embedding"] * self.prices[m].embedding_per_m
                   for m, c in self.counters.items())

    def as_dict(self) -> dict:
        return {
            "counters": {m: dict(self.counters[m]) for m in sorted(self.counters)},
            "total_pico": self.total_pico,
            "total": str(self.total),
        }


def charge(ledger: CostLedger, model_id: str, in_tokens: int, out_tokens: int) -> CostLedger:
    return ledger.charge(model_id, in_tokens, out_tokens)


def price_from_dollars(input_per_m: str | float, output_per_m: str | float,
                       embedding_per_m: str | float = 0) -> Price:
    """Build a Price from decimal currency amounts per million tokens."""
    def micro(v) -> int:
        d = Decimal(str(v)) * PER_MILLION
        if d != d.to_integral_value():
            raise ConfigError(f"price {v} has sub-micro precision")
        return int(d)
    return Price(micro(input_per_m), micro(output_per_m), micro(embedding_per_m))
