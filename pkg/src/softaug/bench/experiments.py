"""Method x seed grids on top of ``run_training``, with CPU-time bookkeeping."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

from softaug.bench.config import WIRING, load_config, parse_lines
from softaug.bench.metrics import EvalReport, read_metrics
from softaug.bench.run import run_training


@dataclass
class GridResult:
    reports: dict[str, EvalReport] = field(default_factory=dict)
    cpu_seconds: dict[tuple[str, int], float] = field(default_factory=dict)
    run_dirs: dict[tuple[str, int], Path] = field(default_factory=dict)

    @property
    def total_cpu(self) -> float:
        return sum(self.cpu_seconds.values())

    def median(self, method: str, variant: str) -> float:
        return self.reports[method].median(variant)

    def z_star_stds(self, method: str) -> list[float]:
        """Logged batch std of the normalized target projections over all of a method's runs."""
        out = []
        for (m, _), d in self.run_dirs.items():
            if m == method:
                out.extend(r["z_star_std"] for r in read_metrics(d / "metrics.jsonl", "soda_update"))
        return out


def run_grid(config_path, methods, seeds, out_root, overrides: dict[str, str] | None = None,
             soda_config=None, log=print) -> GridResult:
    """Train every (method, seed) pair sequentially under one base config.

    ``soda_config`` holds ``soda.*`` keys applied only to methods with a
    SODA branch, since other methods reject them.
    """
    soda_entries = parse_lines(Path(soda_config).read_text().splitlines(), str(soda_config)) if soda_config else {}
    result = GridResult()
    out_root = Path(out_root)
    for method in methods:
        for seed in seeds:
            ov = dict(soda_entries) if WIRING[method].soda_kind else {}
            ov.update(overrides or {})
            ov.update(method=method, seed=str(seed), out_dir=str(out_root / f"{method}_s{seed}"))
            cfg = load_config(config_path, ov)
            t0 = time.process_time()
            report = run_training(cfg)
            cpu = time.process_time() - t0
            result.cpu_seconds[(method, seed)] = cpu
            result.run_dirs[(method, seed)] = Path(cfg.out_dir)
            if method in result.reports:
                result.reports[method].merge(report)
            else:
                result.reports[method] = report
            cells = " ".join(f"{v}={report.cells[(v, seed)]:.1f}" for v in report.variants)
            log(f"{method} seed={seed} cpu={cpu:.0f}s {cells}")
    return result


__all__ = ["GridResult", "run_grid"]
