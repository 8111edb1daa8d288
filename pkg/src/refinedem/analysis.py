"""Reference-relative error metrics, run records and cost accounting."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidComparison

METRIC_NAMES = ("static_sinkage", "dynamic_sinkage", "peak_traction", "avg_traction")

# gamma groups: [0, 0.05), [0.05, 0.30), [0.30, 1.0]
GAMMA_GROUPS = (("low", 0.0, 0.05), ("medium", 0.05, 0.30), ("high", 0.30, math.inf))


def gamma_group(gamma: float) -> str:
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    for name, lo, hi in GAMMA_GROUPS:
        if lo <= gamma < hi:
            return name
    return "high"


@dataclass
class ErrorReport:
    eps_static_sinkage: float
    eps_dynamic_sinkage: float
    eps_peak_traction: float
    eps_avg_traction: float
    aggregate: float
    reference_id: str = ""
    label: str = ""
    spread: float = 0.0                  # std of the aggregate across seeds

    @property
    def components(self) -> np.ndarray:
        return np.array([self.eps_static_sinkage, self.eps_dynamic_sinkage,
                         self.eps_peak_traction, self.eps_avg_traction])

    def to_dict(self) -> dict:
        return asdict(self)


def _metric(m, name):
    return float(m[name] if isinstance(m, dict) else getattr(m, name))


def normalized_errors(metrics, ref_metrics, h_grouser: float, F_N_max: float, F_N: Optional[float] = None,
                      preset: Optional[str] = None, ref_preset: Optional[str] = None,
                      reference_id: str = "", label: str = "") -> ErrorReport:
    """Signed errors relative to a reference run.

    Sinkage differences are divided by the grouser depth; traction
    coefficient differences are turned into forces with ``F_N`` (default
    ``F_N_max``) and divided by ``F_N_max``.  The aggregate is the mean of
    the four absolute values.
    """
    if preset is not None and ref_preset is not None and preset != ref_preset:
        raise InvalidComparison(f"cannot compare preset {preset!r} against reference preset {ref_preset!r}")
    if not (h_grouser > 0 and F_N_max > 0):
        raise InvalidComparison("grouser depth and maximum normal load must be positive")
    F_N = F_N_max if F_N is None else F_N
    e = [(_metric(metrics, k) - _metric(ref_metrics, k)) / h_grouser for k in METRIC_NAMES[:2]]
    e += [(_metric(metrics, k) - _metric(ref_metrics, k)) * F_N / F_N_max for k in METRIC_NAMES[2:]]
    if not all(math.isfinite(x) for x in e):
        raise InvalidComparison("non-finite metric in comparison")
    return ErrorReport(*e, aggregate=float(np.mean(np.abs(e))), reference_id=reference_id, label=label)


def mean_metrics(metric_list: Sequence) -> dict:
    return {k: float(np.mean([_metric(m, k) for m in metric_list])) for k in METRIC_NAMES}


@dataclass
class RunRecord:
    label: str
    config: dict
    config_hash: str
    seed: int
    reference: bool = False
    status: str = "ok"                   # ok | failed
    error: str = ""
    bed_audit: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    n_particles: int = 0
    mean_iterations: float = 0.0
    wall_time: float = 0.0
    build_time: float = 0.0

    @property
    def gamma(self) -> float:
        return float(self.config.get("bed", {}).get("gamma") or 0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def reference_errors(records: Sequence[RunRecord]) -> list[ErrorReport]:
    """One report per non-reference label against the seed-averaged reference."""
    ok = [r for r in records if r.status == "ok" and r.metrics]
    refs = [r for r in ok if r.reference]
    if not refs:
        return []
    ref_mean = mean_metrics([r.metrics for r in refs])
    ref_cfg = refs[0].config
    ref_id = refs[0].label or refs[0].config_hash[:12]
    h_g = refs[0].metrics.get("grouser_depth")
    F_max = refs[0].metrics.get("normal_load")
    out = []
    labels = []
    for r in ok:
        if not r.reference and r.label not in labels:
            labels.append(r.label)
    for lab in labels:
        group = [r for r in ok if r.label == lab and not r.reference]
        per_seed = [normalized_errors(r.metrics, ref_mean, h_g, F_max, r.metrics.get("normal_load"),
                                      r.config.get("preset"), ref_cfg.get("preset"), ref_id, lab)
                    for r in group]
        rep = normalized_errors(mean_metrics([r.metrics for r in group]), ref_mean, h_g, F_max,
                                group[0].metrics.get("normal_load"), group[0].config.get("preset"),
                                ref_cfg.get("preset"), ref_id, lab)
        rep.aggregate = float(np.mean([p.aggregate for p in per_seed]))
        rep.spread = float(np.std([p.aggregate for p in per_seed]))
        out.append(rep)
    return out


def group_medians(reports: Sequence[ErrorReport], records: Sequence[RunRecord]) -> dict:
    """Median aggregate error per gamma group (refined configs only)."""
    gam = {r.label: r.gamma for r in records}
    groups: dict = {}
    for rep in reports:
        g = gam.get(rep.label, 0.0)
        if g > 0:
            groups.setdefault(gamma_group(g), []).append(rep.aggregate)
    return {k: float(np.median(v)) for k, v in groups.items()}


def cost_report(records: Sequence[RunRecord]) -> list[dict]:
    """Per label: count reduction, wall-time speed-up and iteration reduction against the reference."""
    ok = [r for r in records if r.status == "ok"]
    refs = [r for r in ok if r.reference]
    if not refs:
        return []
    n_ref = np.mean([r.n_particles for r in refs])
    t_ref = np.mean([r.wall_time for r in refs])
    it_ref = np.mean([r.mean_iterations for r in refs])
    rows = []
    seen = []
    for r in ok:
        if r.label in seen:
            continue
        seen.append(r.label)
        g = [x for x in ok if x.label == r.label]
        n = np.mean([x.n_particles for x in g])
        t = np.mean([x.wall_time for x in g])
        it = np.mean([x.mean_iterations for x in g])
        count_red = float(n_ref / n) if n > 0 else math.inf
        speedup = float(t_ref / t) if t > 0 else math.nan
        rows.append({"label": r.label, "reference": r.reference, "gamma": r.gamma, "n_particles": float(n),
                     "count_reduction": count_red, "speedup": speedup, "mean_iterations": float(it),
                     "iteration_reduction": float(it_ref / it) if it > 0 else math.nan,
                     "speedup_at_least_count_reduction": bool(speedup >= count_red - 1e-12)})
    return rows


def format_table(rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> str:
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())

    def cell(v):
        return f"{v:.4g}" if isinstance(v, float) else str(v)

    body = [[cell(r[c]) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)
