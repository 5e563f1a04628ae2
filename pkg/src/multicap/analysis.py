"""Post-hoc analysis of metrics logs: smoothed loss trajectories,
time-to-loss tables, KL curve comparison, and run summaries.

Everything is a pure function of the log files so re-running the analysis
can never change its results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError


@dataclass
class RunLog:
    meta: dict
    updates: list
    evals: list = field(default_factory=list)
    switch_step: int | None = None
    end_step: int | None = None
    wall_time_s: float | None = None
    path: Path | None = None

    @property
    def strategy(self) -> str:
        return self.meta.get("strategy", "?")

    def column(self, key):
        return [u.get(key) for u in self.updates]

    def steps(self):
        return [u["step"] for u in self.updates]


def load_run_log(path) -> RunLog:
    """Parse a metrics log, checking ordering invariants."""
    path = Path(path)
    if not path.exists():
        raise ContractError(f"no metrics log at {path}")
    meta = None
    updates, evals = [], []
    switch_step = end_step = None
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        kind = rec.get("kind")
        if kind == "meta":
            meta = rec
        elif kind == "update":
            updates.append(rec)
        elif kind == "eval":
            evals.append(rec)
        elif kind == "switch":
            switch_step = rec["step"]
        elif kind == "end":
            end_step = rec["step"]
    if meta is None:
        raise ContractError(f"{path}: missing meta record")
    steps = [u["step"] for u in updates]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ContractError(f"{path}: steps are not strictly increasing")
    stages = [u["stage"] for u in updates if u.get("stage") is not None]
    if any(b < a for a, b in zip(stages, stages[1:])):
        raise ContractError(f"{path}: stage decreased")
    wall = None
    info_path = path.parent / "run_info.json"
    if info_path.exists():
        wall = json.loads(info_path.read_text()).get("wall_time_s")
    return RunLog(meta=meta, updates=updates, evals=evals, switch_step=switch_step,
                  end_step=end_step, wall_time_s=wall, path=path)


def moving_average(values, window: int):
    """Centered moving average; the window truncates at the edges.
    None values pass through untouched."""
    if window < 1:
        raise ContractError("smoothing window must be positive")
    out = []
    n = len(values)
    half = window // 2
    for i, v in enumerate(values):
        if v is None:
            out.append(None)
            continue
        lo = max(0, i - half)
        hi = min(n, i + (window - half))
        chunk = [x for x in values[lo:hi] if x is not None]
        out.append(float(np.mean(chunk)))
    return out


_STRATEGY_FIELDS = {("trainer", "strategy"), ("trainer", "t_sep"),
                    ("trainer", "train_submodel"), ("model", "architecture")}


def _first_config_difference(a: dict, b: dict):
    for section in sorted(set(a) | set(b)):
        sa, sb = a.get(section, {}), b.get(section, {})
        for key in sorted(set(sa) | set(sb)):
            if (section, key) in _STRATEGY_FIELDS:
                continue
            if sa.get(key) != sb.get(key):
                return f"{section}.{key}"
    return None


def _check_comparable(logs) -> None:
    keys = {log.meta.get("compare_key") for log in logs}
    if len(keys) <= 1:
        return
    detail = ""
    configs = [log.meta.get("config") for log in logs]
    if all(isinstance(c, dict) for c in configs):
        for other in configs[1:]:
            field_name = _first_config_difference(configs[0], other)
            if field_name:
                detail = f"; first differing field: {field_name}"
                break
    raise ContractError(
        "logs are not comparable: only strategy-defining fields may differ" + detail)


def loss_trajectory(logs, window: int = 1, thresholds=()) -> dict:
    """Aligned smoothed CE curves plus a time-to-loss table.

    Returns {"rows": [{step, strategy, ce_big, ce_small}...],
             "time_to_loss": [{strategy, submodel, threshold, step}...]}.
    The time-to-loss step is the first update whose smoothed value is <=
    the threshold, or None if the curve never reaches it.
    """
    logs = list(logs)
    if not logs:
        raise ContractError("no logs given")
    _check_comparable(logs)
    rows = []
    reach = []
    for log in logs:
        steps = log.steps()
        smoothed = {k: moving_average(log.column(k), window)
                    for k in ("ce_big", "ce_small")}
        for i, step in enumerate(steps):
            rows.append({"step": step, "strategy": log.strategy,
                         "ce_big": smoothed["ce_big"][i],
                         "ce_small": smoothed["ce_small"][i]})
        for sub in ("big", "small"):
            series = smoothed[f"ce_{sub}"]
            for th in thresholds:
                hit = next((s for s, v in zip(steps, series)
                            if v is not None and v <= th), None)
                reach.append({"strategy": log.strategy, "submodel": sub,
                              "threshold": th, "step": hit})
    rows.sort(key=lambda r: (r["step"], r["strategy"]))
    return {"rows": rows, "time_to_loss": reach}


def kl_trajectory(constjt_log: RunLog, tsjt_log: RunLog) -> dict:
    """KL curves of both joint strategies on their common steps, plus the
    first step where the two-stage run's KL drops strictly below."""
    for log in (constjt_log, tsjt_log):
        if all(v is None for v in log.column("kl")):
            raise ContractError(f"{log.path}: log has no kl column")
    _check_comparable([constjt_log, tsjt_log])
    const_kl = {u["step"]: u["kl"] for u in constjt_log.updates if u["kl"] is not None}
    tsjt_kl = {u["step"]: u["kl"] for u in tsjt_log.updates if u["kl"] is not None}
    common = sorted(set(const_kl) & set(tsjt_kl))
    rows = []
    crossover = None
    for step in common:
        rows.append({"step": step, "constjt": const_kl[step], "tsjt": tsjt_kl[step]})
        if crossover is None and tsjt_kl[step] < const_kl[step]:
            crossover = step
    return {"rows": rows, "crossover": crossover}


def summarize_run(log: RunLog) -> dict:
    """Final CE per submodel, stage-switch step, best validation BLEU per
    submodel, and wall time when the run recorded one."""
    if log.end_step is None:
        last = log.updates[-1]["step"] if log.updates else None
        raise ContractError(f"truncated log (no end record); last valid step {last}")
    if not log.updates:
        raise ContractError("log has no update records")
    last = log.updates[-1]

    def best(key):
        vals = [e[key] for e in log.evals if e.get(key) is not None]
        return max(vals) if vals else None

    return {"strategy": log.strategy,
            "final_ce_big": last.get("ce_big"),
            "final_ce_small": last.get("ce_small"),
            "switch_step": log.switch_step,
            "best_valid_bleu_big": best("bleu_big"),
            "best_valid_bleu_small": best("bleu_small"),
            "total_updates": log.end_step,
            "wall_time_s": log.wall_time_s}


# ---------------------------------------------------------------------------
# plot-ready tables


def write_table(path, rows, columns) -> None:
    """Tab-separated table with a header row; None renders as empty."""
    lines = ["\t".join(columns)]
    for r in rows:
        lines.append("\t".join("" if r.get(c) is None else str(r.get(c))
                               for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")
