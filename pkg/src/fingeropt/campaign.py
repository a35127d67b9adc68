"""Multi-start campaign orchestration, persistence, Pareto and diversity.

Campaign layout on disk:

    <output_dir>/manifest                      JSON index of all runs
    <output_dir>/runs/<run_id>/config          run configuration echo (INI)
    <output_dir>/runs/<run_id>/history.csv     per-iteration history
    <output_dir>/runs/<run_id>/final_density.pgm  final field, plain graymap
    <output_dir>/runs/<run_id>/result          structured result record (JSON)

Run directories are written to a temp path and renamed into place, so a
killed campaign loses only in-flight runs; completed run ids are skipped on
restart. Data files are byte-deterministic in (config, seed); wall time and
timestamps live only in the manifest.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import echo_run_config, load_config, run_config
from .domain import Mesh, build_domain
from .fem import DensityField
from .optimizer import (
    ACTIVE,
    HistoryRow,
    RunConfig,
    RunResult,
    run,
    with_sweep_value,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest"
RUNS_DIRNAME = "runs"

HISTORY_HEADER = "iter,phi,mean_output_disp_mm,strain_energy_Nmm,volume_fraction,max_density_change"


class CampaignError(RuntimeError):
    """Raised for unusable campaign specifications or corrupt records."""


@dataclass(frozen=True)
class CampaignSpec:
    """A sweep of multi-start runs around a base configuration."""

    base_config: RunConfig
    sweep_values: tuple[float, ...]
    seeds_per_point: int
    output_dir: Path
    parallelism: int = 1
    base_seed: int = 0

    def validate(self) -> None:
        if not self.sweep_values:
            raise CampaignError("sweep must contain at least one value")
        if self.seeds_per_point < 1:
            raise CampaignError("seeds_per_point must be at least 1")
        self.base_config.validate()

    def jobs(self) -> list[tuple[str, RunConfig]]:
        out = []
        for value in self.sweep_values:
            for k in range(self.seeds_per_point):
                seed = self.base_seed + k
                cfg = with_sweep_value(self.base_config, value, seed)
                out.append((run_id_for(cfg), cfg))
        return out


def run_id_for(cfg: RunConfig) -> str:
    if cfg.formulation == ACTIVE:
        return f"xin{cfg.input_displacement:06.2f}_s{cfg.seed:04d}"
    return f"vf{cfg.volume_fraction:.3f}_s{cfg.seed:04d}"


# ---------------------------------------------------------------------------
# Run-directory persistence


def density_to_pgm(mesh: Mesh, rho: DensityField) -> str:
    """Plain (P2) graymap over the bounding grid, top row first, 0-255."""
    raster = np.zeros(mesh.ny * mesh.nx, dtype=np.int64)
    raster[mesh.active_ids] = np.rint(np.clip(rho.values, 0.0, 1.0) * 255).astype(np.int64)
    grid = raster.reshape(mesh.ny, mesh.nx)[::-1]
    lines = [f"P2", f"{mesh.nx} {mesh.ny}", "255"]
    lines += [" ".join(str(v) for v in row) for row in grid]
    return "\n".join(lines) + "\n"


def pgm_to_density(mesh: Mesh, text: str) -> DensityField:
    tokens = text.split()
    if tokens[0] != "P2":
        raise CampaignError("expected a plain P2 graymap")
    nx, ny, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if (nx, ny) != (mesh.nx, mesh.ny):
        raise CampaignError("graymap does not match the mesh grid")
    pix = np.array(tokens[4:], dtype=np.int64).reshape(ny, nx)[::-1].ravel()
    return DensityField(pix[mesh.active_ids] / float(maxval))


def history_to_csv(history: list[HistoryRow]) -> str:
    lines = [HISTORY_HEADER]
    for r in history:
        lines.append(
            f"{r.iteration},{r.phi:.12g},{r.mean_output_disp:.12g},"
            f"{r.strain_energy:.12g},{r.volume_fraction:.12g},{r.max_density_change:.12g}"
        )
    return "\n".join(lines) + "\n"


def csv_to_history(text: str) -> list[HistoryRow]:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != HISTORY_HEADER:
        raise CampaignError("unexpected history.csv header")
    rows = []
    for ln in lines[1:]:
        it, phi, disp, se, vol, chg = ln.split(",")
        rows.append(HistoryRow(int(it), float(phi), float(disp), float(se),
                               float(vol), float(chg)))
    return rows


def result_record(run_id: str, result: RunResult, mesh: Mesh) -> dict:
    """Deterministic result payload (no wall time: that lives in the manifest)."""
    final = result.final
    cfg = result.config
    return {
        "run_id": run_id,
        "status": "completed",
        "formulation": cfg.formulation,
        "sweep_value": cfg.sweep_value,
        "volume_fraction": cfg.volume_fraction,
        "input_displacement": cfg.input_displacement,
        "seed": cfg.seed,
        "iterations": result.iterations,
        "converged": result.converged,
        "phi": final.phi,
        "mean_output_disp": final.mean_output_disp,
        "strain_energy": final.strain_energy,
        "final_volume_fraction": final.volume_fraction,
        "grid": [mesh.nx, mesh.ny],
        "n_active": mesh.n_active,
        "n_design": mesh.n_design,
    }


def write_run_dir(runs_dir: Path, run_id: str, payload: dict,
                  result: RunResult | None = None, mesh: Mesh | None = None) -> Path:
    """Atomically create runs/<run_id>; payload is the result record."""
    runs_dir.mkdir(parents=True, exist_ok=True)
    final_dir = runs_dir / run_id
    tmp_dir = runs_dir / f".tmp.{run_id}.{os.getpid()}"
    if tmp_dir.exists():
        shutil.rmtree(tmp_dir)
    tmp_dir.mkdir()
    try:
        if result is not None:
            (tmp_dir / "config").write_text(echo_run_config(result.config))
            (tmp_dir / "history.csv").write_text(history_to_csv(result.history))
            (tmp_dir / "final_density.pgm").write_text(density_to_pgm(mesh, result.final_rho))
        (tmp_dir / "result").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        if final_dir.exists():
            shutil.rmtree(final_dir)
        os.replace(tmp_dir, final_dir)
    finally:
        if tmp_dir.exists():
            shutil.rmtree(tmp_dir, ignore_errors=True)
    return final_dir


def read_result(run_dir: Path) -> dict:
    try:
        return json.loads((run_dir / "result").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CampaignError(f"corrupt run record {run_dir}: {exc}") from exc


def load_run(run_dir: Path) -> tuple[dict, RunConfig, Mesh, DensityField]:
    """Full run record: result, config, mesh and final density field."""
    record = read_result(run_dir)
    cfg = run_config(load_config(str(run_dir / "config")))
    mesh = build_domain(cfg.domain)
    rho = pgm_to_density(mesh, (run_dir / "final_density.pgm").read_text())
    return record, cfg, mesh, rho


def completed_run_ids(output_dir: Path) -> set[str]:
    runs_dir = output_dir / RUNS_DIRNAME
    if not runs_dir.is_dir():
        return set()
    done = set()
    for child in runs_dir.iterdir():
        if child.name.startswith("."):
            continue
        if (child / "result").is_file():
            try:
                read_result(child)
            except CampaignError:
                logger.warning("ignoring corrupt run directory %s", child)
                continue
            done.add(child.name)
    return done


# ---------------------------------------------------------------------------
# Campaign execution


def _execute_job(args: tuple[str, str, RunConfig]) -> dict:
    """Worker: run one configuration and persist its directory atomically."""
    runs_dir_str, run_id, cfg = args
    runs_dir = Path(runs_dir_str)
    started = time.perf_counter()
    try:
        result = run(cfg)
        mesh = build_domain(cfg.domain)
        payload = result_record(run_id, result, mesh)
        write_run_dir(runs_dir, run_id, payload, result, mesh)
        summary = dict(payload)
    except Exception as exc:  # recorded, never silently dropped
        logger.exception("run %s failed", run_id)
        payload = {
            "run_id": run_id,
            "status": "failed",
            "formulation": cfg.formulation,
            "sweep_value": cfg.sweep_value,
            "seed": cfg.seed,
            "error": f"{type(exc).__name__}: {exc}",
        }
        write_run_dir(runs_dir, run_id, payload)
        summary = dict(payload)
    summary["wall_time"] = time.perf_counter() - started
    return summary


def run_campaign(spec: CampaignSpec) -> dict:
    """Execute all pending runs and write the manifest; resumable."""
    spec.validate()
    output_dir = Path(spec.output_dir)
    runs_dir = output_dir / RUNS_DIRNAME
    runs_dir.mkdir(parents=True, exist_ok=True)
    for stale in runs_dir.glob(".tmp.*"):
        shutil.rmtree(stale, ignore_errors=True)

    jobs = spec.jobs()
    ids = [rid for rid, _ in jobs]
    if len(set(ids)) != len(ids):
        raise CampaignError("duplicate run ids in sweep (repeated sweep values?)")
    done = completed_run_ids(output_dir)
    pending = [(rid, cfg) for rid, cfg in jobs if rid not in done]
    logger.info("campaign: %d runs total, %d already complete, %d to execute",
                len(jobs), len(jobs) - len(pending), len(pending))

    summaries: dict[str, dict] = {}
    for rid in done:
        if rid in set(ids):
            summaries[rid] = read_result(runs_dir / rid)

    def note(summary: dict) -> None:
        summaries[summary["run_id"]] = summary
        write_manifest(output_dir, spec, summaries, partial=True)

    payloads = [(str(runs_dir), rid, cfg) for rid, cfg in pending]
    if spec.parallelism <= 1:
        for item in payloads:
            note(_execute_job(item))
    else:
        import multiprocessing as mp

        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=spec.parallelism, mp_context=ctx) as pool:
            futures = {pool.submit(_execute_job, item) for item in payloads}
            while futures:
                finished, futures = wait(futures, return_when=FIRST_COMPLETED)
                for fut in finished:
                    note(fut.result())

    manifest = write_manifest(output_dir, spec, summaries, partial=False)
    return manifest


def write_manifest(output_dir: Path, spec: CampaignSpec,
                   summaries: dict[str, dict], partial: bool) -> dict:
    base = spec.base_config
    manifest = {
        "campaign": {
            "formulation": base.formulation,
            "sweep_values": list(spec.sweep_values),
            "seeds_per_point": spec.seeds_per_point,
            "base_seed": spec.base_seed,
            "parallelism": spec.parallelism,
        },
        "partial": partial,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "runs": [summaries[rid] for rid in sorted(summaries)],
    }
    tmp = output_dir / f".{MANIFEST_NAME}.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, output_dir / MANIFEST_NAME)
    return manifest


def load_manifest(output_dir: Path) -> dict:
    path = Path(output_dir) / MANIFEST_NAME
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CampaignError(f"cannot read manifest {path}: {exc}") from exc


def rebuild_manifest_records(output_dir: Path) -> list[dict]:
    """Result records re-read from the persisted run directories.

    Corrupt records are skipped with a warning, never fabricated.
    """
    runs_dir = Path(output_dir) / RUNS_DIRNAME
    if not runs_dir.is_dir():
        return []
    records = []
    for child in sorted(runs_dir.iterdir()):
        if child.name.startswith(".") or not (child / "result").is_file():
            continue
        try:
            records.append(read_result(child))
        except CampaignError as exc:
            logger.warning("skipping corrupt run record: %s", exc)
    return records


# ---------------------------------------------------------------------------
# Pareto front


@dataclass
class ParetoPoint:
    """One run in objective space; both coordinates are minimized."""

    run_id: str
    mean_output_disp: float
    total_strain_energy: float
    dominated: bool = False


def pareto_front(records) -> list[ParetoPoint]:
    """Non-dominated set with deterministic tie-breaking by run id.

    ``records`` are (run_id, mean_output_disp, total_strain_energy) triples
    or objects/mappings with those fields. Returns points for every input in
    input order, dominated ones flagged; exact coordinate duplicates keep
    only the lexicographically smallest run id on the front.
    """
    pts = [_as_point(r) for r in records]
    order = sorted(range(len(pts)),
                   key=lambda i: (pts[i].mean_output_disp,
                                  pts[i].total_strain_energy,
                                  pts[i].run_id))
    best_energy = np.inf
    for i in order:
        p = pts[i]
        if p.total_strain_energy < best_energy:
            best_energy = p.total_strain_energy
            p.dominated = False
        else:
            p.dominated = True
    return pts


def _as_point(r) -> ParetoPoint:
    if isinstance(r, ParetoPoint):
        return ParetoPoint(r.run_id, r.mean_output_disp, r.total_strain_energy)
    if isinstance(r, dict):
        return ParetoPoint(str(r["run_id"]), float(r["mean_output_disp"]),
                           float(r["strain_energy"]))
    rid, disp, energy = r
    return ParetoPoint(str(rid), float(disp), float(energy))


def front_members(points: list[ParetoPoint]) -> list[ParetoPoint]:
    return sorted((p for p in points if not p.dominated),
                  key=lambda p: (p.mean_output_disp, p.total_strain_energy, p.run_id))


# ---------------------------------------------------------------------------
# Diversity


@dataclass
class DiversityStats:
    n_fields: int
    threshold: float
    pairwise: np.ndarray        # condensed upper-triangle distances
    cluster_labels: np.ndarray  # single-linkage cluster id per field
    n_clusters: int


def diversity_stats(fields: list[np.ndarray], threshold: float | None = None) -> DiversityStats:
    """Pairwise L2 distances between density fields and cluster counts.

    Two fields belong to the same cluster when connected by links shorter
    than the threshold (default 0.05 * sqrt(#elements)). All fields must come
    from identical meshes.
    """
    if len(fields) < 2:
        raise CampaignError("diversity needs at least two fields")
    arrays = [np.asarray(f, dtype=float).ravel() for f in fields]
    n_elem = arrays[0].size
    if any(a.size != n_elem for a in arrays):
        raise CampaignError("density fields come from different meshes")
    if threshold is None:
        threshold = 0.05 * np.sqrt(n_elem)

    n = len(arrays)
    stack = np.vstack(arrays)
    dists = []
    parent = np.arange(n)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        d = np.linalg.norm(stack[i + 1:] - stack[i], axis=1)
        dists.append(d)
        for j_off in np.flatnonzero(d < threshold):
            ri, rj = find(i), find(i + 1 + j_off)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)

    roots = np.array([find(i) for i in range(n)])
    _, labels = np.unique(roots, return_inverse=True)
    return DiversityStats(
        n_fields=n,
        threshold=float(threshold),
        pairwise=np.concatenate(dists) if dists else np.empty(0),
        cluster_labels=labels,
        n_clusters=int(labels.max()) + 1,
    )
