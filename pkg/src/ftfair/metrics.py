"""Run metrics and their on-disk forms (per-app CSV, summary JSON)."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .engine import AppRecord, SimOutcome

CSV_COLUMNS = ("scheduler", "seed", "app_id", "arrival_s", "finish_s", "t_sh_s", "t_id_s", "rho",
               "gpu_seconds", "mean_placement_score", "censored")


def jain_index(values: Sequence[float]) -> float:
    xs = [float(v) for v in values]
    if not xs:
        raise ValueError("jain index of an empty list")
    if any(not x > 0 for x in xs):
        raise ValueError("jain index needs positive values")
    return sum(xs) ** 2 / (len(xs) * sum(x * x for x in xs))


def _pct(values: Sequence[float], q: float) -> float:
    return float(np.percentile(values, q)) if len(values) else math.nan


@dataclass
class MetricsSummary:
    scheduler: str
    seed: int
    n_apps: int
    n_censored: int
    max_rho: float
    jain: float
    gpu_time: float
    completion_mean: float
    completion_median: float
    completion_p95: float
    placement_p10: float
    placement_p50: float
    placement_p90: float
    leftover_mean: float
    leftover_max: float
    records: List[AppRecord] = field(default_factory=list, repr=False)

    def row(self) -> Dict[str, float]:
        """Scalar fields only, for sweep tables."""
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "records"}


def summarize_records(records: Sequence[AppRecord], scheduler: str, seed: int,
                      leftover_fractions: Sequence[float] = ()) -> MetricsSummary:
    done = [r for r in records if not r.censored]
    rhos = [r.rho for r in done]
    times = [r.t_sh_s for r in done]
    scores = [r.mean_placement_score for r in records if r.mean_placement_score > 0]
    left = list(leftover_fractions)
    return MetricsSummary(
        scheduler=scheduler,
        seed=seed,
        n_apps=len(records),
        n_censored=len(records) - len(done),
        max_rho=max(rhos) if rhos else math.nan,
        jain=jain_index(rhos) if rhos else math.nan,
        gpu_time=sum(r.gpu_seconds for r in records),
        completion_mean=float(np.mean(times)) if times else math.nan,
        completion_median=float(np.median(times)) if times else math.nan,
        completion_p95=_pct(times, 95),
        placement_p10=_pct(scores, 10),
        placement_p50=_pct(scores, 50),
        placement_p90=_pct(scores, 90),
        leftover_mean=float(np.mean(left)) if left else 0.0,
        leftover_max=float(max(left)) if left else 0.0,
        records=list(records),
    )


def summarize(outcome: SimOutcome) -> MetricsSummary:
    return summarize_records(outcome.records, outcome.scheduler, outcome.seed, outcome.leftover_fractions)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_csv(records: Sequence[AppRecord], scheduler: str, seed: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_fmt(v) for v in (scheduler, seed, r.app_id, r.arrival_s, r.finish_s, r.t_sh_s,
                                      r.t_id_s, r.rho, r.gpu_seconds, r.mean_placement_score, r.censored)])
    return buf.getvalue()


def parse_csv(text: str) -> List[Dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        if tuple(row) != CSV_COLUMNS:
            raise ValueError("unexpected CSV columns")
        out.append({
            "scheduler": row["scheduler"],
            "seed": int(row["seed"]),
            "record": AppRecord(
                app_id=row["app_id"],
                arrival_s=float(row["arrival_s"]),
                finish_s=float(row["finish_s"]) if row["finish_s"] else None,
                t_sh_s=float(row["t_sh_s"]),
                t_id_s=float(row["t_id_s"]),
                rho=float(row["rho"]),
                gpu_seconds=float(row["gpu_seconds"]),
                mean_placement_score=float(row["mean_placement_score"]),
                censored=row["censored"] == "true",
            ),
        })
    return out


def summary_json(summary: MetricsSummary, extra: Optional[Dict] = None) -> str:
    doc = summary.row()
    doc = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in doc.items()}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_run(outdir, outcome: SimOutcome, emit_cdf: bool = False) -> MetricsSummary:
    """Write ``per_app.csv`` and ``summary.json`` (and ``cdf.json``) into ``outdir``."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(outcome)
    (out / "per_app.csv").write_text(records_csv(outcome.records, outcome.scheduler, outcome.seed),
                                     encoding="utf-8")
    extra = {"conservation_ok": outcome.ledger.balanced, "span_s": outcome.span, "rounds": outcome.rounds,
             "leftover_fractions": list(outcome.leftover_fractions)}
    (out / "summary.json").write_text(summary_json(summary, extra), encoding="utf-8")
    if emit_cdf:
        cdf = {
            "rho": sorted(r.rho for r in outcome.records if not r.censored),
            "completion_s": sorted(r.t_sh_s for r in outcome.records if not r.censored),
            "placement_score": sorted(r.mean_placement_score for r in outcome.records),
        }
        (out / "cdf.json").write_text(json.dumps(cdf, indent=1) + "\n", encoding="utf-8")
    return summary


def read_run(outdir) -> MetricsSummary:
    """Rebuild the summary of a run directory from its CSV and leftover log."""
    out = Path(outdir)
    rows = parse_csv((out / "per_app.csv").read_text(encoding="utf-8"))
    doc = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    records = [r["record"] for r in rows]
    return summarize_records(records, doc["scheduler"], int(doc["seed"]), doc.get("leftover_fractions", ()))
