"""Smoke test for the Python bindings; build and install the wheel first."""

import json
import math
import sys
import tempfile

import defusion_py as dp


def main() -> int:
    assert dp.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert math.isclose(dp.f1([0.9, 0.2, 0.7], [1, 0, 0]), 2 / 3)
    assert dp.accuracy([0.5, 0.49], [1, 0]) == 1.0
    assert math.isclose(dp.pearson([1, 2, 3], [2, 4, 6]), 1.0)
    try:
        dp.auc([0.1, 0.2], [1, 1])
    except ValueError:
        pass
    else:
        raise AssertionError("single-class auc should raise")

    with tempfile.TemporaryDirectory() as tmp:
        manifest = dp.generate(tmp, n_cases=12, seed=3, spec_json=json.dumps({"missing_rate": 0.0}))
        assert manifest["n_cases"] == 12
        assert dp.dataset_info(tmp) == manifest

    cfg = dp.config("paper")
    assert (cfg["model"]["height"], cfg["lr_img"]) == (224, 1e-6)
    try:
        dp.config("desk", json.dumps({"model": {"pe": "rope"}}))
    except ValueError:
        pass
    else:
        raise AssertionError("unknown pe variant should raise")

    suites = dp.gradcheck_suites("table")
    assert all(c["max_rel_error"] < 1e-4 for s in suites for c in s["checks"])
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
