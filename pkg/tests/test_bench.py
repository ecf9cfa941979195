import csv
import json
import math

import numpy as np
import pytest

from memq_lab.bench import (SWEEP, BenchConfig, ExperimentReport, fan_out, prepare_trial, run_algorithm_comparison,
                            run_bound_figures, run_method_comparison, run_model_sweep, run_selected_sets,
                            run_selector, sensitivity, spec_from_label)

TINY = BenchConfig(num_states=24, num_actions=2, k=2, k_total=4, steps_per_state=500, seeds=2,
                   exhaustive_repeats=1, sensitivity=False)


def test_spec_from_label():
    spec = spec_from_label("U-D-D-I", num_states=40)
    assert spec.label == "U-D-D-I" and spec.num_states == 40
    with pytest.raises(ValueError):
        spec_from_label("X-S-U-R")


def test_sweep_flips_one_knob():
    assert len(SWEEP) == 4
    for knob, values, fixed in SWEEP:
        assert len(values) == 2 and knob not in fixed


def test_sensitivity():
    assert sensitivity(0.1, [0.1, 0.1], 100) == 0.0
    assert sensitivity(0.1, [0.2, 0.0], 100) == pytest.approx(1.0)
    assert sensitivity(0.0, [0.01], 100) == pytest.approx(1.0)  # floored denominator


def _square(x):
    return x * x


def test_fan_out_preserves_order():
    assert fan_out(_square, range(6), workers=1) == [0, 1, 4, 9, 16, 25]


def test_selector_on_trial():
    spec = spec_from_label("S-D-U-R", num_states=24, num_actions=2)
    trial = prepare_trial(spec, TINY, 0)
    ex = run_selector(trial, "exhaustive", 2, TINY)
    assert ex["invocations"] == math.comb(4, 2)
    for method in ("partial", "coverage"):
        res = run_selector(trial, method, 2, TINY)
        assert res["chosen"] == [1, 2] and 0.0 <= res["ape"] <= 1.0
    full = run_selector(trial, "exhaustive", 4, TINY)
    assert full["chosen"] == [1, 2, 3, 4] and full["invocations"] == 0


def test_method_comparison_detection_at_full_k(tmp_path):
    rep = run_method_comparison(TINY, "S-D-U-R", detection_ks=[2, 4])
    assert [r["method"] for r in rep.rows] == ["exhaustive", "partial", "coverage"]
    full = [d for d in rep.extra["detection"] if d["k"] == 4][0]
    assert full["partial"] == 1.0 and full["coverage"] == 1.0
    csv_path, json_path = rep.write(tmp_path)
    with open(csv_path) as fh:
        assert len(list(csv.DictReader(fh))) == 3
    payload = json.loads(json_path.read_text())
    assert payload["seeds"] == TINY.seed_list()


def test_model_sweep_rows():
    rep = run_model_sweep(TINY, labels_only={"structured", "unstructured"})
    assert {r["setting"] for r in rep.rows} == {"structured", "unstructured"}
    assert all(r["repeats"] == 2 for r in rep.rows)


def test_selected_sets_rows():
    rep = run_selected_sets(TINY, "S-D-U-R", k_total=6, ks=range(2, 4))
    assert rep.rows[0]["coverage"] == [1, 2] and rep.rows[1]["partial"] == [1, 2, 3]


def test_algorithm_comparison_small():
    cfg = BenchConfig(num_states=24, num_actions=2, k=2, k_total=3, steps_per_state=300, seeds=1,
                      sensitivity=False)
    rep = run_algorithm_comparison(cfg, sizes=((24, 2),))
    row = rep.rows[0]
    assert all(0.0 <= row[f"{a}_ape"] <= 1.0 for a in ("ccq", "neql", "double_q", "maxmin_q"))


def test_bound_figure_data(tmp_path):
    cfg = BenchConfig(num_states=40, num_actions=2, steps_per_state=500, seeds=1, sensitivity=False)
    rep = run_bound_figures(cfg, "2a", out_dir=tmp_path)
    assert rep.name == "figure2a" and rep.rows
    assert len(rep.extra["contained"]) == 10


def test_report_writes_json_numbers(tmp_path):
    rep = ExperimentReport("demo", [{"a": np.float64(1.5), "b": [1, 2]}], {"x": 1}, [0])
    _, path = rep.write(tmp_path)
    assert json.loads(path.read_text())["rows"][0]["a"] == 1.5
