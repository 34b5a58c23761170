"""Smoke test for the compiled `smto` extension module.

Build and install first, e.g. `pip install --no-build-isolation ./crates/python`.
"""

import json
import math
import tempfile

import smto


def main():
    cfg = smto.TrialConfig("symmetric_two_task", "nash_mtl", epochs=2, seed=1)
    assert cfg.problem == "symmetric_two_task" and cfg.smto == "nash_mtl"
    again = smto.TrialConfig.from_toml(cfg.to_toml())
    assert again.to_toml() == cfg.to_toml()

    res = smto.run_trial(cfg)
    assert not res.crashed, res.crash_message
    assert len(res.val_scores()) == 2
    assert all(abs(sum(w) - 1.0) < 1e-9 for w in res.weights())
    assert res.mean_weight_error() < 0.1
    twin = smto.run_trial(cfg)
    assert twin.losses() == res.losses(), "seeded runs must be identical"

    with tempfile.TemporaryDirectory() as d:
        path = res.save(d)
        loaded = smto.TrialResult.load(path)
        assert loaded.to_json() == res.to_json()

    direction, weights, diag = smto.aggregate("mgda_ub", [[1.0, 0.0], [0.0, 1.0]])
    assert all(abs(w - 0.5) < 1e-9 for w in weights), weights
    assert all(abs(x - 0.5) < 1e-9 for x in direction)
    _, weights, _ = smto.aggregate("nash_mtl", [[2.0, 0.0], [0.0, 2.0]])
    assert abs(weights[0] - weights[1]) < 1e-9
    w, n = smto.min_norm([[1.0, 0.0], [0.0, 1.0]])
    assert abs(n - math.sqrt(0.5)) < 1e-9

    delta = smto.delta_mtm(
        [("seg", "miou", 0.5 * (1 - 0.01043), False), ("depth", "err", 0.02 * 1.1686, True)],
        [("seg", "miou", 0.5, False), ("depth", "err", 0.02, True)],
    )
    assert abs(delta + 8.952) < 6e-4, delta
    assert smto.mean_rank([[("a", "m", 1.0, False)], [("a", "m", 1.0, False)], [("a", "m", 0.0, False)]]) == [1.5, 1.5, 3.0]

    original, fixed, replay = smto.extract_and_replay(smto.TrialConfig("conflict_regression", "edm", epochs=2))
    assert abs(sum(fixed) - 1.0) < 1e-9 and replay.smto == "fixed"

    report = json.loads(smto.compare(smto.TrialConfig("conflict_regression", "unit_scal", epochs=2), ["unit_scal", "cagrad"], seeds=2))
    assert [s["smto"] for s in report["smtos"]] == ["unit_scal", "cagrad"]

    try:
        smto.TrialConfig("nope", "edm")
    except ValueError as e:
        assert "unknown problem" in str(e)
    else:
        raise AssertionError("bad problem id accepted")

    print(f"smoke test passed ({len(smto.METHODS)} methods exposed)")


if __name__ == "__main__":
    main()
