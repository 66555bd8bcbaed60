"""Two-axis parameter sweeps of analytic and simulated metrics."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional

from imdelay import serialize
from imdelay.analytic import AnalyticReport, analyze
from imdelay.core import FIELD_NAMES, ConfigError, ScenarioParams
from imdelay.montecarlo import SimReport, derive_seed, run_queue

CSV_COLUMNS = (
    "axis1", "axis2", "p_s_analytic", "p_s_sim", "p_s_ci", "e_tt",
    "t_m_analytic", "t_m_sim", "t_m_ci", "jitter_analytic", "jitter_sim",
    "jitter_ci", "rho", "stable", "seed",
)
METRICS = ("p_s", "t_m", "jitter")


class NoSimulationData(ValueError):
    pass


@dataclass(frozen=True)
class Axis:
    field: str
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.field not in FIELD_NAMES:
            raise ConfigError("sweep.axis", f"unknown scenario field {self.field!r}")
        if not self.values:
            raise ConfigError(f"sweep.axis.{self.field}", "value list is empty")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ConfigError(f"sweep.axis.{self.field}", "values must be strictly increasing")


@dataclass(frozen=True)
class SimSettings:
    n_packets: int = 110_000
    warmup: int = 10_000
    seed: int = 1
    replications: int = 1

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise ConfigError("sim.replications", "must be >= 1")
        if self.n_packets <= self.warmup or self.warmup < 0:
            raise ConfigError("sim.n_packets", "must exceed sim.warmup")


@dataclass(frozen=True)
class SweepSpec:
    base: ScenarioParams
    axis1: Axis
    axis2: Axis
    sim: Optional[SimSettings] = None
    dispersion_mode: str = "approx"
    tw_variance_mode: str = "standard"
    exclusion_zone: bool = False
    frozen_topology: bool = False

    def __post_init__(self) -> None:
        if self.axis1.field == self.axis2.field:
            raise ConfigError("sweep.axis2", "must differ from axis1")

    def cells(self) -> list[tuple[int, float, float]]:
        return [
            (i * len(self.axis2.values) + j, a, b)
            for i, a in enumerate(self.axis1.values)
            for j, b in enumerate(self.axis2.values)
        ]

    def cell_params(self, a: float, b: float) -> ScenarioParams:
        return self.base.replace(**{self.axis1.field: _cast(self.axis1.field, a),
                                    self.axis2.field: _cast(self.axis2.field, b)})

    def cell_seed(self, index: int) -> Optional[int]:
        return None if self.sim is None else derive_seed(self.sim.seed, index)

    def to_dict(self) -> dict[str, Any]:
        return {
            "base": self.base.to_dict(),
            "axis1": {"field": self.axis1.field, "values": list(self.axis1.values)},
            "axis2": {"field": self.axis2.field, "values": list(self.axis2.values)},
            "sim": None if self.sim is None else asdict(self.sim),
            "dispersion_mode": self.dispersion_mode,
            "tw_variance_mode": self.tw_variance_mode,
            "exclusion_zone": self.exclusion_zone,
            "frozen_topology": self.frozen_topology,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SweepSpec":
        axes = [Axis(d["field"], tuple(d["values"])) for d in (data["axis1"], data["axis2"])]
        return cls(
            base=ScenarioParams(**data["base"]),
            axis1=axes[0],
            axis2=axes[1],
            sim=None if data.get("sim") is None else SimSettings(**data["sim"]),
            dispersion_mode=data.get("dispersion_mode", "approx"),
            tw_variance_mode=data.get("tw_variance_mode", "standard"),
            exclusion_zone=data.get("exclusion_zone", False),
            frozen_topology=data.get("frozen_topology", False),
        )


def _cast(name: str, value: float) -> Any:
    if name == "n_machines":
        if float(value) != int(value):
            raise ConfigError(name, f"must be an integer (got {value!r})")
        return int(value)
    return float(value)


@dataclass(frozen=True)
class SweepRow:
    index: int
    axis1: float
    axis2: float
    analytic: AnalyticReport
    sim: Optional[SimReport]
    agreement: dict[str, bool] = field(default_factory=dict)
    seed: Optional[int] = None

    @property
    def stable(self) -> bool:
        return self.analytic.stable

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "axis1": self.axis1,
            "axis2": self.axis2,
            "stable": self.stable,
            "seed": self.seed,
            "analytic": self.analytic.to_dict(),
            "sim": None if self.sim is None else self.sim.to_dict(),
            "agreement": dict(self.agreement),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SweepRow":
        return cls(
            index=data["index"],
            axis1=data["axis1"],
            axis2=data["axis2"],
            analytic=AnalyticReport.from_dict(data["analytic"]),
            sim=None if data["sim"] is None else SimReport.from_dict(data["sim"]),
            agreement=dict(data["agreement"]),
            seed=data["seed"],
        )

    def csv_record(self) -> dict[str, Any]:
        a, s = self.analytic, self.sim
        return {
            "axis1": self.axis1,
            "axis2": self.axis2,
            "p_s_analytic": a.p_s,
            "p_s_sim": None if s is None else s.p_s_hat.value,
            "p_s_ci": None if s is None else s.p_s_hat.half_width,
            "e_tt": a.e_tt_s,
            "t_m_analytic": a.t_m_s,
            "t_m_sim": None if s is None else s.mean_delay_s.value,
            "t_m_ci": None if s is None else s.mean_delay_s.half_width,
            "jitter_analytic": a.jitter_s2,
            "jitter_sim": None if s is None else s.var_delay_s2.value,
            "jitter_ci": None if s is None else s.var_delay_s2.half_width,
            "rho": a.rho,
            "stable": self.stable,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SweepResult:
    spec: SweepSpec
    rows: tuple[SweepRow, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"spec": self.spec.to_dict(), "rows": [r.to_dict() for r in self.rows]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SweepResult":
        return cls(SweepSpec.from_dict(data["spec"]),
                   tuple(SweepRow.from_dict(r) for r in data["rows"]))

    def to_json(self) -> str:
        return serialize.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "SweepResult":
        return cls.from_dict(serialize.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            rec = row.csv_record()
            writer.writerow([serialize.csv_cell(rec[c]) for c in CSV_COLUMNS])
        return buf.getvalue()


def parse_csv(text: str) -> list[dict[str, Any]]:
    """Parse sweep CSV back into typed records (empty cells become None)."""
    records = []
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames!r}")
    for raw in reader:
        rec: dict[str, Any] = {}
        for key, value in raw.items():
            if value == "":
                rec[key] = None
            elif key == "stable":
                rec[key] = value == "true"
            elif key == "seed":
                rec[key] = int(value)
            else:
                rec[key] = float(value)
        records.append(rec)
    return records


def _agreement(analytic: AnalyticReport, sim: SimReport) -> dict[str, bool]:
    return {
        "p_s": sim.p_s_hat.covers(analytic.p_s),
        "t_m": sim.mean_delay_s.covers(analytic.t_m_s),
        "jitter": sim.var_delay_s2.covers(analytic.jitter_s2),
    }


def run_cell(spec: SweepSpec, index: int, a: float, b: float) -> SweepRow:
    """Evaluate one grid cell; reproducible standalone from its derived seed."""
    p = spec.cell_params(a, b)
    analytic = analyze(p, spec.tw_variance_mode, allow_unstable=True)
    seed = spec.cell_seed(index)
    sim = None
    agreement: dict[str, bool] = {}
    if spec.sim is not None and analytic.stable and p.arrival_rate_pps > 0:
        sim = run_queue(
            p, spec.sim.n_packets, spec.sim.warmup, seed,
            replications=spec.sim.replications,
            dispersion_mode=spec.dispersion_mode,
            exclusion_zone=spec.exclusion_zone,
            frozen_topology=spec.frozen_topology,
        )
        agreement = _agreement(analytic, sim)
    return SweepRow(index, float(a), float(b), analytic, sim, agreement, seed)


def _run_cell_packed(args: tuple[SweepSpec, int, float, float]) -> SweepRow:
    return run_cell(*args)


def run_sweep(spec: SweepSpec, workers: int = 1,
              progress: Optional[Callable[[int, int], None]] = None) -> SweepResult:
    """Evaluate every cell; rows come back ordered by (axis1, axis2)."""
    cells = spec.cells()
    if not cells:
        raise ConfigError("sweep", "empty grid")
    jobs = [(spec, i, a, b) for i, a, b in cells]
    rows: list[SweepRow] = []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for row in pool.map(_run_cell_packed, jobs):
                rows.append(row)
                if progress:
                    progress(len(rows), len(jobs))
    else:
        for job in jobs:
            rows.append(_run_cell_packed(job))
            if progress:
                progress(len(rows), len(jobs))
    return SweepResult(spec, tuple(rows))


def _z_score(analytic: float, est: Any) -> float:
    if est.half_width > 0:
        return abs(analytic - est.value) / est.half_width
    return 0.0 if analytic == est.value else math.inf


def agreement_summary(result: SweepResult, n_worst: int = 3) -> dict[str, Any]:
    """Counts of cells whose analytic value falls inside the simulated 95% CI."""
    simulated = [r for r in result.rows if r.sim is not None]
    if not simulated:
        raise NoSimulationData("no cell carries simulation data")
    per_metric = {}
    for metric in METRICS:
        inside = sum(bool(r.agreement.get(metric)) for r in simulated)
        per_metric[metric] = {"inside": inside, "total": len(simulated),
                              "fraction": inside / len(simulated)}
    scored = []
    for r in simulated:
        a, s = r.analytic, r.sim
        z = {
            "p_s": _z_score(a.p_s, s.p_s_hat),
            "t_m": _z_score(a.t_m_s, s.mean_delay_s),
            "jitter": _z_score(a.jitter_s2, s.var_delay_s2),
        }
        metric = max(z, key=z.get)
        scored.append({"index": r.index, "axis1": r.axis1, "axis2": r.axis2,
                       "metric": metric, "ci_multiples": z[metric]})
    scored.sort(key=lambda item: -item["ci_multiples"])
    total_inside = sum(m["inside"] for m in per_metric.values())
    return {
        "cells": len(result.rows),
        "simulated_cells": len(simulated),
        "unstable_cells": sum(not r.stable for r in result.rows),
        "per_metric": per_metric,
        "overall_pass_fraction": total_inside / (len(METRICS) * len(simulated)),
        "worst_cells": scored[:n_worst],
    }
