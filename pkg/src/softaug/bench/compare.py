"""Methods x variants comparison tables and augmentation sample dumps."""

from __future__ import annotations

import csv
import dataclasses
from pathlib import Path

import numpy as np

from softaug.augment import AugmentationSpec, ImagePool, apply_spec, sample_augmentation
from softaug.bench.metrics import EvalReport
from softaug.envsim import ConfigurationError, EnvConfig, PixelControlEnv, quantize, read_ppm, write_ppm

# Full-scale target shown in the docs; desk-scale tables are not expected to match it.
REFERENCE_ROW = {"env": "walker_walk", "variant": "video_hard", "method": "soda_overlay", "mean": 768.0, "std": 38.0}


def collect_reports(run_dirs) -> dict[str, EvalReport]:
    """Merge ``summary.csv`` files by method; a missing file is an I/O error naming it."""
    reports: dict[str, EvalReport] = {}
    for d in run_dirs:
        path = Path(d) / "summary.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing run artifact {path}")
        rep = EvalReport.read_csv(path)
        if rep.method in reports:
            reports[rep.method].merge(rep)
        else:
            reports[rep.method] = rep
    return reports


def compare_methods(reports: dict[str, EvalReport], variants=None, csv_path: str | Path | None = None) -> str:
    """Text table of mean ± std per (variant, method); ``*`` marks the best mean in a row."""
    methods = list(reports)
    if variants is None:
        variants = list(dict.fromkeys(v for r in reports.values() for v in r.variants))
    rows = []
    for v in variants:
        cells = {}
        for m in methods:
            try:
                cells[m] = reports[m].aggregate(v)
            except KeyError:
                raise FileNotFoundError(f"no results for method {m!r} on variant {v!r}") from None
        best = max(cells, key=lambda m: cells[m][0])
        rows.append((v, cells, best))

    width = max(14, *(len(m) + 2 for m in methods))
    head = f"{'variant':<22}" + "".join(f"{m:>{width}}" for m in methods)
    lines = [head, "-" * len(head)]
    for v, cells, best in rows:
        parts = []
        for m in methods:
            mean, std = cells[m]
            mark = "*" if m == best else " "
            parts.append(f"{mean:.1f}±{std:.1f}{mark}".rjust(width))
        lines.append(f"{v:<22}" + "".join(parts))
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "method", "mean", "std", "n_seeds", "best"])
            for v, cells, best in rows:
                for m in methods:
                    mean, std = cells[m]
                    w.writerow([v, m, repr(mean), repr(std), len(reports[m].values(v)), int(m == best)])
    return "\n".join(lines) + "\n"


# -- augmentation samples ----------------------------------------------------


def source_frames(env_cfg: EnvConfig, n: int, seed: int) -> np.ndarray:
    """``n`` initial observations (full size) from consecutive resets."""
    env = PixelControlEnv(dataclasses.replace(env_cfg, seed=seed))
    return np.stack([env.reset() for _ in range(n)])


def _grid(frames: np.ndarray) -> np.ndarray:
    """Row of observations, first RGB frame of each stack, as (H, n*W, 3)."""
    return np.concatenate([f[:3].transpose(1, 2, 0) for f in frames], axis=1)


def dump_augmentation_samples(
    pool: ImagePool | None,
    kinds,
    n: int,
    out_dir: str | Path,
    env_cfg: EnvConfig | None = None,
    seed: int = 0,
    overlay_alpha: float = 0.5,
) -> list[Path]:
    """Write ``source.ppm``, one ``<kind>.ppm`` grid per kind, and ``specs.tsv``.

    ``specs.tsv`` holds one AugmentationSpec record per sample (``index<TAB>record``),
    so ``replay_specs`` can regenerate every view bit-exactly.
    """
    if n < 1:
        raise ConfigurationError("need at least one sample")
    env_cfg = (env_cfg or EnvConfig()).resolved()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = source_frames(env_cfg, n, seed)
    rng = np.random.default_rng(seed)
    written = [out / "source.ppm"]
    write_ppm(written[0], _grid(frames))
    records = []
    for kind in kinds:
        views = []
        for i, f in enumerate(frames):
            spec = sample_augmentation(kind, rng, pool, max_offset=env_cfg.render_size - env_cfg.crop_size,
                                       overlay_alpha=overlay_alpha)
            records.append(f"{i}\t{spec.to_record()}")
            views.append(apply_spec(f, spec, pool, env_cfg.crop_size))
        path = out / f"{kind}.ppm"
        write_ppm(path, _grid(np.stack(views)))
        written.append(path)
    (out / "specs.tsv").write_text("\n".join(records) + "\n")
    written.append(out / "specs.tsv")
    return written


def replay_specs(spec_file: str | Path, pool: ImagePool | None, env_cfg: EnvConfig, seed: int,
                 out_dir: str | Path | None = None) -> list[np.ndarray]:
    """Re-apply recorded specs to the same source frames.

    If ``out_dir`` holds the grids written by ``dump_augmentation_samples``
    every regenerated view is compared against them; any mismatch raises.
    """
    env_cfg = env_cfg.resolved()
    entries = []
    for line in Path(spec_file).read_text().splitlines():
        if line.strip():
            idx, record = line.split("\t", 1)
            entries.append((int(idx), AugmentationSpec.from_record(record)))
    if not entries:
        raise ConfigurationError(f"{spec_file}: no spec records")
    n = max(i for i, _ in entries) + 1
    frames = source_frames(env_cfg, n, seed)
    views = [apply_spec(frames[i], spec, pool, env_cfg.crop_size) for i, spec in entries]
    if out_dir is not None:
        by_kind: dict[str, list[np.ndarray]] = {}
        for (_, spec), view in zip(entries, views):
            by_kind.setdefault(spec.kind, []).append(view)
        for kind, vs in by_kind.items():
            path = Path(out_dir) / f"{kind}.ppm"
            if path.exists():
                expected = read_ppm(path)
                got = quantize(_grid(np.stack(vs)))
                if not np.array_equal(expected, got):
                    raise ValueError(f"replayed {kind} views differ from {path}")
    return views


__all__ = ["REFERENCE_ROW", "collect_reports", "compare_methods", "dump_augmentation_samples", "replay_specs"]
