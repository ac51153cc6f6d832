from __future__ import annotations

import json
import random
from decimal import Decimal

import pytest

from malcve.config import Config
from malcve.errors import ConfigError
from malcve.llm import CostLedger, Price, RateBudget
from malcve.llm.accounting import UnknownModelError, price_from_dollars
from malcve.pipeline import AnalysisReport, replay_ledger

from conftest import FIXTURES


class VirtualClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self) -> float:
        return self.now

    def sleep(self, seconds: float) -> None:
        self.now += seconds


def max_window_sum(grants, window=60.0):
    best, lo, running = 0, 0, 0
    for t, n in grants:
        running += n
        while grants[lo][0] <= t - window:
            running -= grants[lo][1]
            lo += 1
        best = max(best, running)
    return best


def simulate(n_requests, seed=0, tpm=200_000):
    clock = VirtualClock()
    budget = RateBudget(tpm, clock=clock, sleep=clock.sleep)
    rng = random.Random(seed)
    grants = []
    for _ in range(n_requests):
        clock.now += rng.expovariate(5.0)
        tokens = rng.randint(1, 12_000)
        grants.append((budget.acquire(tokens), tokens))
    return grants


def test_window_never_exceeds_budget():
    grants = simulate(2_000, seed=3)
    assert max_window_sum(grants) <= 200_000
    # the budget actually throttles at this request rate
    assert grants[-1][0] > 2_000 / 5.0


def test_oversized_request_rejected():
    with pytest.raises(ValueError):
        RateBudget(1_000).acquire(1_001)
    with pytest.raises(ConfigError):
        RateBudget(0)


def test_reserve_bounds_concurrency():
    budget = RateBudget(100, requests_in_flight_max=1)
    with budget.reserve(10):
        assert not budget._slots.acquire(blocking=False)
    assert budget._slots.acquire(blocking=False)


def test_ledger_zero_tokens():
    ledger = CostLedger({"m": Price(150_000, 600_000)}).charge("m", 0, 0)
    assert ledger.total_pico == 0 and ledger.total == 0


def test_ledger_million_tokens_exact():
    ledger = CostLedger(Config.from_dict({}).prices)
    ledger.charge("gpt-4o-mini", 1_000_000, 1_000_000)
    assert ledger.total == Decimal("0.75")
    assert ledger.total_pico == 750_000 * 1_000_000


def test_ledger_unknown_model():
    with pytest.raises(UnknownModelError):
        CostLedger({}).charge("nope", 1, 1)


def test_ledger_sums_are_exact():
    ledger = CostLedger({"m": price_from_dollars("0.15", "0.60")})
    for _ in range(1_000):
        ledger.charge("m", 1, 1)
    assert ledger.total == Decimal("0.00075")
    assert ledger.recomputed_pico() == ledger.total_pico


def test_merge_and_sub_micro_prices():
    a = CostLedger({"m": Price(1, 2)}).charge("m", 3, 4)
    b = CostLedger({"m": Price(1, 2)}).charge("m", 5, 6).merge(a)
    assert b.counters["m"]["input"] == 8 and b.total_pico == 8 + 20
    with pytest.raises(ConfigError):
        price_from_dollars("0.0000001", 0)


@pytest.mark.parametrize("name", sorted(p.stem for p in (FIXTURES / "recorded").glob("*.json")))
def test_replay_recorded_transcripts(name):
    data = json.loads((FIXTURES / "recorded" / f"{name}.json").read_text("utf-8"))
    report = AnalysisReport(file_sha256="0" * 64, input_name=data["input_name"],
                            search_queries=data["search_queries"],
                            llm_transcript=data["llm_transcript"], metadata=data["metadata"])
    ledger = replay_ledger(report, Config.from_dict({}).prices)
    assert ledger.as_dict() == data["metadata"]["cost"]
