from types import SimpleNamespace

import pytest

from slacc.netsim import DOWNLINK, UPLINK, CommLedger, LinkModel, time_to_accuracy


def test_zero_bytes_costs_latency():
    ledger = CommLedger(LinkModel(1e6, 1e6, 0.25))
    assert ledger.record(0, 0, UPLINK, 0).sim_seconds == 0.25


def test_one_megabyte_at_one_megabyte_per_second():
    ledger = CommLedger(LinkModel(1e6, 2e6, 0.0))
    assert ledger.record(0, 0, UPLINK, 1_000_000).sim_seconds == 1.0
    assert ledger.record(0, 0, DOWNLINK, 1_000_000).sim_seconds == 0.5


def test_parallel_vs_sequential_aggregation():
    ledger = CommLedger(LinkModel(100.0, 100.0, 0.0))
    ledger.record(0, 0, UPLINK, 100)  # 1 s
    ledger.record(0, 1, UPLINK, 300)  # 3 s
    assert ledger.round_time(0, "parallel") == 3.0
    assert ledger.round_time(0, "sequential") == 4.0
    assert ledger.round_time(1) == 0.0
    with pytest.raises(ValueError):
        ledger.round_time(0, "bogus")


def test_ledger_order_and_totals():
    ledger = CommLedger(LinkModel(10.0, 10.0, 0.0))
    ledger.record(1, 0, DOWNLINK, 5)
    ledger.record(0, 1, UPLINK, 7)
    ledger.record(1, 0, UPLINK, 3)
    ledger.record(0, 0, DOWNLINK, 2)
    keys = [(e.round, e.device, e.direction) for e in ledger.snapshot()]
    assert keys == [(0, 0, DOWNLINK), (0, 1, UPLINK), (1, 0, UPLINK), (1, 0, DOWNLINK)]
    assert ledger.total_bytes() == 17
    assert ledger.total_bytes(UPLINK) == 10
    assert ledger.round_bytes(1) == {0: 8}
    lines = ledger.to_csv().splitlines()
    assert lines[0] == "round,device,direction,bytes,sim_seconds"
    assert lines[1] == "0,0,down,2,0.2"


def test_ledger_rejects_bad_input():
    ledger = CommLedger()
    with pytest.raises(ValueError):
        ledger.record(0, 0, UPLINK, -1)
    with pytest.raises(ValueError):
        ledger.record(0, 0, "sideways", 1)
    with pytest.raises(ValueError):
        LinkModel(0.0, 1.0, 0.0)


def _reports(accs, secs):
    return [SimpleNamespace(test_accuracy=a, sim_seconds=s) for a, s in zip(accs, secs)]


def test_time_to_accuracy():
    reps = _reports([0.5, 0.8, 0.9, 0.85], [1.0, 2.0, 3.0, 4.0])
    assert time_to_accuracy(reps, 0.8) == 3.0
    assert time_to_accuracy(reps, 0.9) == 6.0
    assert time_to_accuracy(reps, 0.95) is None
    targets = [0.95, 0.9, 0.85, 0.8, 0.5]
    times = [time_to_accuracy(reps, t) for t in targets]
    reached = [t for t in times if t is not None]
    assert reached == sorted(reached, reverse=True)


def test_halving_bytes_halves_bandwidth_time():
    link = LinkModel(1000.0, 1000.0, 0.05)
    full, half = CommLedger(link), CommLedger(link)
    for r in range(3):
        full.record(r, 0, UPLINK, 4000)
        half.record(r, 0, UPLINK, 2000)
    accs = [0.3, 0.6, 0.9]
    t_full = time_to_accuracy(_reports(accs, [full.round_time(r) for r in range(3)]), 0.9)
    t_half = time_to_accuracy(_reports(accs, [half.round_time(r) for r in range(3)]), 0.9)
    latency = 3 * 0.05
    assert t_half - latency == pytest.approx((t_full - latency) / 2, abs=1e-12)
