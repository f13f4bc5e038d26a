"""Smoke test for the Python bindings.

Build first:  pip install -e crates/py --no-build-isolation
Run:          python python/smoke_test.py   (or pytest python/)
"""

import json

import servefuzz


def test_pure_functions():
    assert [servefuzz.majority_threshold(k) for k in (1, 2, 3, 4, 6)] == [1, 2, 2, 3, 4]
    assert abs(servefuzz.pressure_score(20, 6, 1500, 6) - 4.0) < 1e-9
    near = [[(7, -0.01), (3, -0.02)]]
    assert servefuzz.confirm_relational([3], [7], near, n=2, epsilon=0.1) == "false_positive"
    assert servefuzz.confirm_relational([3], [7], near, n=1, epsilon=0.1) == "true_positive"
    assert servefuzz.confirm_relational([1, 2], [1, 2], []) == "pass"


def test_trace_on_sim():
    trace = json.loads(servefuzz.seed_trace("prefix_sharing", seed=1))
    assert trace["events"]
    report = json.loads(servefuzz.execute_sim(json.dumps(trace)))
    assert {o["status"] for o in report["outcomes"]} == {"completed"}
    again = json.loads(servefuzz.execute_sim(json.dumps(trace)))
    assert again["outcomes"] == report["outcomes"]


def test_f3_campaign_crashes():
    summary = json.loads(servefuzz.run_campaign(iterations=200, fault="F3"))
    kinds = {f["finding"]["kind"] for f in summary["findings"]}
    assert "crash" in kinds, kinds


def test_clean_campaign_is_quiet():
    summary = json.loads(servefuzz.run_campaign(iterations=30, profile="mixed"))
    assert summary["findings"] == []


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"ok {name}")
