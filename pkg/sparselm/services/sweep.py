import csv
import itertools
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

from sparselm.errors import SparseLmError
from sparselm.models.config import ExperimentConfig, normalize_keys
from sparselm.services.trainer import train

log = logging.getLogger("sweep")

SUMMARY_HEADER = ["setting", "runs", "failed", "metric", "mean", "stdev"]


def _slug(value: Any) -> str:
    return str(value).replace(" ", "").replace("/", "_").replace("[", "").replace("]", "").replace(",", "_")


def _point(key: str, value: Any) -> Tuple[Dict[str, Any], str]:
    """Settings and run-id suffix of one axis value; a mapping sets several fields together."""
    if isinstance(value, dict):
        fields = normalize_keys(value)
        return fields, "".join(f"-{k}{_slug(v)}" for k, v in fields.items())
    return {key: value}, f"-{key}{_slug(value)}"


def swept_fields(sweep: Dict[str, List[Any]]) -> List[str]:
    """Config fields varied by the grid; grouped axes contribute the keys of their mappings."""
    fields: List[str] = []
    for key, values in normalize_keys(sweep).items():
        names = [k for v in values if isinstance(v, dict) for k in normalize_keys(v)] or [key]
        for name in names:
            if name not in fields:
                fields.append(name)
    return fields


def expand_sweep(base: Dict[str, Any], sweep: Dict[str, List[Any]]) -> List[ExperimentConfig]:
    """One config per point of the grid; run ids get a suffix naming the swept values."""
    base = normalize_keys(base)
    sweep = normalize_keys(sweep)
    if not sweep:
        return [ExperimentConfig.model_validate(base)]
    keys = list(sweep)
    prefix = base.get("run_id") or base.get("task", "run")
    configs = []
    for combo in itertools.product(*(sweep[k] for k in keys)):
        raw, run_id = dict(base), prefix
        for key, value in zip(keys, combo):
            fields, suffix = _point(key, value)
            raw.update(fields)
            run_id += suffix
        raw["run_id"] = run_id
        configs.append(ExperimentConfig.model_validate(raw))
    return configs


def _run_one(config: ExperimentConfig) -> Dict[str, Any]:
    try:
        result = train(config)
    except SparseLmError as exc:
        log.exception(f"Sweep run {config.resolved_run_id} failed")
        return {"run_id": config.resolved_run_id, "status": "failed", "error": str(exc), "summary_metric": None}
    return {
        "run_id": result.run_id,
        "status": "ok",
        "metric_name": result.metric_name,
        "best_metric": result.best_metric,
        "best_epoch": result.best_epoch,
        "summary_metric": result.summary_metric,
    }


def setting_key(config: ExperimentConfig, swept: Sequence[str]) -> str:
    """The swept values of a run, seed excluded, so seed replicates share a key."""
    parts = [f"{k}={getattr(config, k)}" for k in swept if k != "seed"]
    return ";".join(parts) or "base"


def summarize(configs: Sequence[ExperimentConfig], results: Sequence[Dict[str, Any]], swept: Sequence[str]) -> List[Dict[str, Any]]:
    groups: Dict[str, List[Dict[str, Any]]] = {}
    for config, res in zip(configs, results):
        groups.setdefault(setting_key(config, swept), []).append(res)
    rows = []
    for key, members in groups.items():
        values = [m["summary_metric"] for m in members if m["status"] == "ok" and m["summary_metric"] is not None]
        names = {m.get("metric_name") for m in members if m["status"] == "ok"}
        rows.append({
            "setting": key,
            "runs": len(members),
            "failed": sum(1 for m in members if m["status"] != "ok"),
            "metric": names.pop() if len(names) == 1 else "",
            "mean": statistics.fmean(values) if values else None,
            "stdev": statistics.stdev(values) if len(values) > 1 else 0.0 if values else None,
        })
    return rows


def write_summary(path: str, rows: Sequence[Dict[str, Any]]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SUMMARY_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else v for k, v in row.items()})


def run_sweep(
    configs: Sequence[ExperimentConfig],
    workers: int = 1,
    swept: Optional[Sequence[str]] = None,
    summary_path: Optional[str] = None,
) -> List[Dict[str, Any]]:
    """Train every config (in a process pool when workers > 1) and summarize per setting."""
    configs = list(configs)
    log.info(f"Sweep: {len(configs)} runs, {workers} worker(s)")
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, configs))
    else:
        results = [_run_one(c) for c in configs]
    rows = summarize(configs, results, list(swept or []))
    if summary_path:
        write_summary(summary_path, rows)
        log.info(f"Sweep summary written to {summary_path}")
    for row in rows:
        log.info(f"  {row['setting']}: mean {row['metric']}={row['mean']} (stdev {row['stdev']}, {row['runs']} runs)")
    return rows
