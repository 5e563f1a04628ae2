import json

import pytest

from multicap.analysis import (RunLog, kl_trajectory, load_run_log,
                               loss_trajectory, moving_average, summarize_run,
                               write_table)
from multicap.errors import ContractError


def synth_log(strategy="tsjt", steps=None, kl=None, ce_big=None, ce_small=None,
              compare_key="k1", switch=None, end=True, evals=(), config=None):
    steps = steps or list(range(1, 11))
    updates = []
    for i, s in enumerate(steps):
        updates.append({"kind": "update", "step": s,
                        "stage": 1 if switch is None or s < switch else 2,
                        "lr": 1e-4,
                        "ce_big": None if ce_big is None else ce_big[i],
                        "ce_small": None if ce_small is None else ce_small[i],
                        "kl": None if kl is None else kl[i],
                        "balancing": 1.0, "kl_ema": None})
    return RunLog(meta={"kind": "meta", "strategy": strategy,
                        "compare_key": compare_key, "config": config},
                  updates=updates, evals=list(evals), switch_step=switch,
                  end_step=steps[-1] if end else None)


class TestMovingAverage:
    def test_window_one_is_identity(self):
        vals = [3.0, 1.0, 4.0, 1.0, 5.0]
        assert moving_average(vals, 1) == vals

    def test_interior_mean_of_window(self):
        vals = [float(i) for i in range(10)]
        out = moving_average(vals, 3)
        for i in range(1, 9):
            assert out[i] == pytest.approx((vals[i - 1] + vals[i] + vals[i + 1]) / 3)

    def test_edges_truncate(self):
        out = moving_average([0.0, 10.0, 20.0], 3)
        assert out[0] == pytest.approx(5.0)
        assert out[2] == pytest.approx(15.0)

    def test_none_passthrough(self):
        out = moving_average([None, 1.0, 3.0], 3)
        assert out[0] is None
        assert out[1] == pytest.approx(2.0)

    def test_monotone_endpoint_order_preserved(self):
        decreasing = [10.0 - i for i in range(20)]
        out = moving_average(decreasing, 5)
        assert out[0] > out[-1]


class TestLossTrajectory:
    def test_identity_with_window_one(self):
        log = synth_log(ce_big=[float(10 - i) for i in range(10)])
        res = loss_trajectory([log], window=1)
        assert [r["ce_big"] for r in res["rows"]] == [float(10 - i) for i in range(10)]

    def test_time_to_loss_scan(self):
        steps = list(range(1, 201))
        ce = [5.0 - 0.02 * s for s in steps]  # crosses 2.0 at step 150
        log = synth_log(steps=steps, ce_small=ce)
        res = loss_trajectory([log], window=1, thresholds=[2.0])
        hits = {(r["strategy"], r["submodel"], r["threshold"]): r["step"]
                for r in res["time_to_loss"]}
        assert hits[("tsjt", "small", 2.0)] == 150
        assert hits[("tsjt", "big", 2.0)] is None

    def test_mismatched_configs_rejected(self):
        a = synth_log(compare_key="k1")
        b = synth_log(strategy="single", compare_key="k2")
        with pytest.raises(ContractError):
            loss_trajectory([a, b], window=1)

    def test_mismatch_names_field(self):
        cfg_a = {"model": {"architecture": "shared"},
                 "trainer": {"strategy": "tsjt", "seed": 1},
                 "data": {"vocab_size": 64}}
        cfg_b = {"model": {"architecture": "indep"},
                 "trainer": {"strategy": "single", "seed": 2},
                 "data": {"vocab_size": 64}}
        a = synth_log(compare_key="k1", config=cfg_a)
        b = synth_log(strategy="single", compare_key="k2", config=cfg_b)
        with pytest.raises(ContractError, match="trainer.seed"):
            loss_trajectory([a, b], window=1)


class TestKlTrajectory:
    def test_identical_logs_no_crossover(self):
        kl = [1.0 / (1 + i) for i in range(10)]
        res = kl_trajectory(synth_log("constjt", kl=kl), synth_log("tsjt", kl=kl))
        assert res["crossover"] is None
        assert len(res["rows"]) == 10

    def test_crossover_detected(self):
        steps = list(range(1, 11))
        const_kl = [0.5] * 10
        tsjt_kl = [0.8, 0.7, 0.6, 0.55, 0.45, 0.4, 0.3, 0.2, 0.1, 0.05]
        res = kl_trajectory(synth_log("constjt", steps=steps, kl=const_kl),
                            synth_log("tsjt", steps=steps, kl=tsjt_kl))
        assert res["crossover"] == 5

    def test_missing_kl_rejected(self):
        with pytest.raises(ContractError, match="kl"):
            kl_trajectory(synth_log("constjt"), synth_log("tsjt", kl=[1.0] * 10))

    def test_row_count_equals_common_steps(self):
        a = synth_log("constjt", steps=list(range(1, 9)), kl=[1.0] * 8)
        b = synth_log("tsjt", steps=list(range(3, 13)), kl=[1.0] * 10)
        res = kl_trajectory(a, b)
        assert len(res["rows"]) == len(set(range(1, 9)) & set(range(3, 13)))


class TestSummarize:
    def test_switch_step_reported(self):
        log = synth_log(switch=5, ce_big=[3.0] * 10, ce_small=[4.0] * 10)
        s = summarize_run(log)
        assert s["switch_step"] == 5
        assert s["final_ce_big"] == 3.0
        assert s["final_ce_small"] == 4.0

    def test_single_log_no_switch(self):
        log = synth_log(strategy="single", ce_small=[2.0] * 10)
        assert summarize_run(log)["switch_step"] is None

    def test_best_valid_bleu_is_max(self):
        evals = [{"kind": "eval", "step": 5, "bleu_big": 10.0, "bleu_small": 3.0},
                 {"kind": "eval", "step": 10, "bleu_big": 8.0, "bleu_small": 7.0}]
        log = synth_log(ce_big=[1.0] * 10, evals=evals)
        s = summarize_run(log)
        assert s["best_valid_bleu_big"] == 10.0
        assert s["best_valid_bleu_small"] == 7.0

    def test_truncated_log_rejected_with_last_step(self):
        log = synth_log(end=False)
        with pytest.raises(ContractError, match="10"):
            summarize_run(log)


class TestLoadRunLog:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        records = [{"kind": "meta", "strategy": "tsjt", "compare_key": "x"},
                   {"kind": "update", "step": 1, "stage": 1, "lr": 1e-5,
                    "ce_big": 3.0, "ce_small": 4.0, "kl": 1.0, "balancing": 1.0,
                    "kl_ema": 1.0},
                   {"kind": "switch", "step": 1, "kl_ema": 1.0},
                   {"kind": "update", "step": 2, "stage": 2, "lr": 2e-5,
                    "ce_big": 2.9, "ce_small": 3.9, "kl": 0.9, "balancing": 1.0,
                    "kl_ema": 0.99},
                   {"kind": "end", "step": 2}]
        path.write_text("".join(json.dumps(r) + "\n" for r in records))
        log = load_run_log(path)
        assert log.switch_step == 1 and log.end_step == 2
        assert len(log.updates) == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(ContractError, match="metrics"):
            load_run_log(tmp_path / "missing.jsonl")

    def test_decreasing_steps_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        recs = [{"kind": "meta"},
                {"kind": "update", "step": 2, "stage": 1},
                {"kind": "update", "step": 1, "stage": 1}]
        path.write_text("".join(json.dumps(r) + "\n" for r in recs))
        with pytest.raises(ContractError, match="increasing"):
            load_run_log(path)

    def test_stage_regression_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        recs = [{"kind": "meta"},
                {"kind": "update", "step": 1, "stage": 2},
                {"kind": "update", "step": 2, "stage": 1}]
        path.write_text("".join(json.dumps(r) + "\n" for r in recs))
        with pytest.raises(ContractError, match="stage"):
            load_run_log(path)


class TestWriteTable:
    def test_header_and_none_rendering(self, tmp_path):
        path = tmp_path / "t.tsv"
        write_table(path, [{"a": 1, "b": None}, {"a": 2, "b": 3.5}], ["a", "b"])
        lines = path.read_text().splitlines()
        assert lines[0] == "a\tb"
        assert lines[1] == "1\t"
        assert lines[2] == "2\t3.5"

    def test_pure_function_of_inputs(self, tmp_path):
        rows = [{"x": 1.25}]
        write_table(tmp_path / "a.tsv", rows, ["x"])
        write_table(tmp_path / "b.tsv", rows, ["x"])
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
