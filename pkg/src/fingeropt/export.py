"""Plot-ready exports of campaign results: CSV table, graymap bundle, SVG front."""

from __future__ import annotations

import logging
import shutil
from pathlib import Path

import numpy as np

from .campaign import (
    RUNS_DIRNAME,
    CampaignError,
    front_members,
    pareto_front,
    rebuild_manifest_records,
)

logger = logging.getLogger(__name__)

CSV_HEADER = ("run_id,status,formulation,sweep_value,volume_fraction,"
              "input_displacement_mm,seed,iterations,converged,phi,"
              "mean_output_disp_mm,strain_energy_Nmm,final_volume_fraction,on_front")

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
            "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def campaign_records(campaign_dir: Path) -> list[dict]:
    """Completed-run records straight from the persisted run directories."""
    records = rebuild_manifest_records(Path(campaign_dir))
    out = []
    for rec in records:
        if rec.get("status") != "completed":
            if rec.get("status") == "failed":
                logger.warning("skipping failed run %s: %s",
                               rec.get("run_id"), rec.get("error"))
            else:
                logger.warning("skipping corrupt or partial record %r", rec.get("run_id"))
            continue
        out.append(rec)
    return out


def export_csv(campaign_dir: Path, out_path: Path) -> Path:
    """One row per completed run: config echo columns plus final coordinates."""
    records = campaign_records(campaign_dir)
    points = pareto_front(records)
    on_front = {p.run_id for p in points if not p.dominated}
    lines = [CSV_HEADER]
    for rec in records:
        lines.append(",".join([
            rec["run_id"],
            rec["status"],
            rec["formulation"],
            f"{rec['sweep_value']:.12g}",
            f"{rec['volume_fraction']:.12g}",
            "" if rec.get("input_displacement") is None else f"{rec['input_displacement']:.12g}",
            str(rec["seed"]),
            str(rec["iterations"]),
            str(rec["converged"]).lower(),
            f"{rec['phi']:.12g}",
            f"{rec['mean_output_disp']:.12g}",
            f"{rec['strain_energy']:.12g}",
            f"{rec['final_volume_fraction']:.12g}",
            str(rec["run_id"] in on_front).lower(),
        ]))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + "\n")
    return out_path


def read_exported_csv(path: Path) -> list[dict]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise CampaignError("unexpected export csv header")
    header = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        vals = ln.split(",")
        rec = dict(zip(header, vals))
        rec["mean_output_disp"] = float(rec.pop("mean_output_disp_mm"))
        rec["strain_energy"] = float(rec.pop("strain_energy_Nmm"))
        rows.append(rec)
    return rows


def export_pgm_bundle(campaign_dir: Path, out_dir: Path) -> list[Path]:
    """Copy every final density graymap into one directory."""
    runs_dir = Path(campaign_dir) / RUNS_DIRNAME
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in campaign_records(campaign_dir):
        src = runs_dir / rec["run_id"] / "final_density.pgm"
        if not src.is_file():
            logger.warning("missing graymap for %s; skipped", rec["run_id"])
            continue
        dst = out_dir / f"{rec['run_id']}.pgm"
        shutil.copyfile(src, dst)
        written.append(dst)
    return written


def export_front_svg(campaign_dir: Path, out_path: Path,
                     width: int = 800, height: int = 600) -> Path:
    """Scatter of all runs colored by sweep value with the front marked."""
    records = campaign_records(campaign_dir)
    points = pareto_front(records)
    front = front_members(points)

    xs = np.array([p.mean_output_disp for p in points], dtype=float)
    ys = np.array([p.total_strain_energy for p in points], dtype=float)
    sweeps = [rec["sweep_value"] for rec in records]
    color_of = _sweep_colors(sweeps)

    ml, mr, mt, mb = 80, 30, 30, 60
    if len(points):
        x0, x1 = _padded_range(xs)
        y0, y1 = _padded_range(ys)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0

    def px(x: float) -> float:
        return ml + (x - x0) / (x1 - x0) * (width - ml - mr)

    def py(y: float) -> float:
        return height - mb - (y - y0) / (y1 - y0) * (height - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" '
        'stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
    ]
    for t in np.linspace(x0, x1, 5):
        parts.append(f'<line x1="{px(t):.2f}" y1="{height - mb}" x2="{px(t):.2f}" '
                     f'y2="{height - mb + 5}" stroke="black"/>')
        parts.append(f'<text x="{px(t):.2f}" y="{height - mb + 20}" font-size="12" '
                     f'text-anchor="middle">{t:.3g}</text>')
    for t in np.linspace(y0, y1, 5):
        parts.append(f'<line x1="{ml - 5}" y1="{py(t):.2f}" x2="{ml}" y2="{py(t):.2f}" '
                     'stroke="black"/>')
        parts.append(f'<text x="{ml - 8}" y="{py(t):.2f}" font-size="12" '
                     f'text-anchor="end" dominant-baseline="middle">{t:.3g}</text>')
    parts.append(f'<text x="{(ml + width - mr) / 2:.2f}" y="{height - 15}" font-size="14" '
                 'text-anchor="middle">mean output displacement (mm)</text>')
    parts.append(f'<text x="20" y="{(mt + height - mb) / 2:.2f}" font-size="14" '
                 f'text-anchor="middle" transform="rotate(-90 20 {(mt + height - mb) / 2:.2f})">'
                 'strain energy (N&#183;mm)</text>')

    if front:
        path = " ".join(f"{px(p.mean_output_disp):.2f},{py(p.total_strain_energy):.2f}"
                        for p in front)
        parts.append(f'<polyline points="{path}" fill="none" stroke="black" '
                     'stroke-width="1.5" stroke-dasharray="5,3"/>')
    for p, sweep in zip(points, sweeps):
        parts.append(f'<circle cx="{px(p.mean_output_disp):.2f}" '
                     f'cy="{py(p.total_strain_energy):.2f}" r="4" '
                     f'fill="{color_of[sweep]}" fill-opacity="0.8"/>')
    for p in front:
        parts.append(f'<circle cx="{px(p.mean_output_disp):.2f}" '
                     f'cy="{py(p.total_strain_energy):.2f}" r="7" fill="none" '
                     'stroke="black" stroke-width="1.5"/>')

    for i, (sweep, color) in enumerate(sorted(color_of.items())):
        yy = mt + 10 + 18 * i
        parts.append(f'<circle cx="{width - mr - 110}" cy="{yy}" r="5" fill="{color}"/>')
        parts.append(f'<text x="{width - mr - 98}" y="{yy + 4}" font-size="12">'
                     f'sweep = {sweep:.3g}</text>')

    parts.append("</svg>")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(parts) + "\n")
    return out_path


def _padded_range(v: np.ndarray) -> tuple[float, float]:
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _sweep_colors(sweeps: list[float]) -> dict[float, str]:
    uniq = sorted(set(sweeps))
    return {v: _PALETTE[i % len(_PALETTE)] for i, v in enumerate(uniq)}
