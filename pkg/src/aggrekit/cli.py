"""Command-line orchestration: simulation runs, inversions, persistence and tables.

Each run writes into ``<out>/<verb>-<config hash prefix>/``: the canonical
config, field files (GRD1), a JSON report, ``tables.csv`` and per-figure data
files, then a manifest listing every artifact with its sha256. The manifest
hash covers everything except stage timings, so identical configs give
identical hashes.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import diffusion as dif
from . import kernel_inversion as ki
from .config import ScenarioConfig, config_hash, dump_config, load_config
from .errors import AggrekitError, ConfigError
from .forward import simulate
from .torus import Field, encode_grd1, set_workers
from .variations import variation_convergence

VERBS = ("simulate", "linearize", "invert-diffusion", "invert-advection", "invert-kernel", "report")
TABLE_HEADER = ("quantity", "truth", "recovered", "abs_err", "rel_err")
DEFAULT_OUT = "aggrekit_out"


def fmt(x) -> str:
    """17 significant digits, enough for a lossless float round trip."""
    if x is None:
        return ""
    return format(float(x), ".17g")


class Run:
    """Collects artifacts and timings for one verb invocation."""

    def __init__(self, verb: str, cfg: ScenarioConfig, root: Path):
        self.verb = verb
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.dir = root / f"{verb}-{self.hash[:16]}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.paths = []
        self.timings = {}
        self.write_text("config.json", dump_config(cfg))

    def write_bytes(self, rel: str, data: bytes) -> None:
        p = self.dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
        if rel not in self.paths:
            self.paths.append(rel)

    def write_text(self, rel: str, text: str) -> None:
        self.write_bytes(rel, text.encode("utf-8"))

    def write_npy(self, rel: str, arr) -> None:
        buf = io.BytesIO()
        np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
        self.write_bytes(rel, buf.getvalue())

    def write_field(self, rel: str, values, t: float = 0.0) -> None:
        self.write_bytes(rel, encode_grd1(Field(self.cfg.grid.build(), values), t))

    def stage(self, name):
        run = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = time.perf_counter() - self.t0
                return False

        return _Timer()

    def finish(self, report: dict) -> dict:
        self.write_text("report.json", json.dumps(report, sort_keys=True, indent=2) + "\n")
        emit_tables(self.dir, report, self)
        return write_manifest(self)


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def manifest_digest(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k not in ("timings", "manifest_hash")}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def write_manifest(run: Run) -> dict:
    man = {
        "config_hash": run.hash,
        "tool_version": __version__,
        "verb": run.verb,
        "artifacts": [{"path": p, "sha256": _sha(run.dir / p)} for p in sorted(run.paths)],
        "timings": {k: round(v, 6) for k, v in sorted(run.timings.items())},
    }
    man["manifest_hash"] = manifest_digest(man)
    (run.dir / "manifest.json").write_text(json.dumps(man, sort_keys=True, indent=2) + "\n")
    return man


def table_rows(report: dict) -> list:
    rows = []
    for r in report.get("rows", []):
        truth, rec = r.get("truth"), r.get("recovered")
        ab = rel = None
        if truth is not None and rec is not None:
            ab = abs(rec - truth)
            rel = ab / abs(truth) if truth != 0 else float("nan")
        rows.append((r["quantity"], fmt(truth), fmt(rec), fmt(ab), fmt(rel)))
    return rows


def emit_tables(run_dir: Path, report: dict, run: Run | None = None) -> list:
    """Write tables.csv plus one ``figure_<name>.csv`` (x, y) per figure series."""
    files = {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    w.writerows(table_rows(report))
    files["tables.csv"] = buf.getvalue()
    for name, pts in sorted(report.get("figures", {}).items()):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("x", "y"))
        w.writerows((fmt(x), fmt(y)) for x, y in pts)
        files[f"figure_{name}.csv"] = buf.getvalue()
    for rel, text in files.items():
        if run is not None:
            run.write_text(rel, text)
        else:
            (Path(run_dir) / rel).write_text(text)
    return sorted(files)


def _row(q, truth, rec):
    return {"quantity": q, "truth": None if truth is None else float(truth),
            "recovered": None if rec is None else float(rec)}


def _complex_rows(q, truth, rec):
    return [_row(q + ".re", np.real(truth), np.real(rec)), _row(q + ".im", np.imag(truth), np.imag(rec))]


# verbs


def run_simulate(cfg: ScenarioConfig, run: Run) -> dict:
    if cfg.time is None:
        raise ConfigError("time: required for simulate", stage="config", fields=["time"])
    grid = cfg.grid.build()
    params = cfg.build_params()
    rng = np.random.default_rng(cfg.seed)
    f = cfg.initial.sample(grid, params.n_species, rng)
    times = cfg.time.times()
    with run.stage("simulate"):
        tr = simulate(params, grid, f, cfg.time.T, cfg.time.dt, times)
    for k, t in enumerate(tr.times):
        for s in range(params.n_species):
            run.write_field(f"fields/u_s{s}_t{k:04d}.grd", tr.states[k][s], float(t))
    run.write_npy("measurements/times.npy", tr.times)
    run.write_npy("measurements/mask.npy", np.ones(grid.shape, dtype=bool))
    run.write_npy("measurements/values.npy", tr.states.reshape(tr.states.shape[:2] + (-1,)))
    rows = []
    m0 = tr.states[0].sum(axis=tuple(range(1, 1 + grid.ndim))) * grid.cell_volume
    m1 = tr.states[-1].sum(axis=tuple(range(1, 1 + grid.ndim))) * grid.cell_volume
    for s in range(params.n_species):
        rows.append(_row(f"mass[{s}]", m0[s], m1[s]))
    fig = {f"mass_s{s}": [[float(t), float(np.sum(tr.states[k][s]) * grid.cell_volume)]
                          for k, t in enumerate(tr.times)] for s in range(params.n_species)}
    return {"kind": "simulate", "model": cfg.model, "rows": rows, "figures": fig}


def run_linearize(cfg: ScenarioConfig, run: Run) -> dict:
    if cfg.time is None:
        raise ConfigError("time: required for linearize", stage="config", fields=["time"])
    grid = cfg.grid.build()
    params = cfg.build_params()
    rng = np.random.default_rng(cfg.seed)
    n = params.n_species
    f1 = cfg.variation.f1.sample(grid, n, rng)
    f2 = np.zeros_like(f1) if cfg.variation.f2 is None else cfg.variation.f2.sample(grid, n, rng)
    if np.any(f1 < 0):
        raise ConfigError("variation.f1: must be non-negative", stage="config", fields=["variation.f1"])
    with run.stage("convergence"):
        st = variation_convergence(params, grid, f1, f2, cfg.time.T, cfg.time.dt, cfg.variation.epsilons)
    rows = []
    for e, a, b in zip(st.scales, st.errors_I, st.errors_II):
        rows.append(_row(f"uI_rel_error@eps={fmt(e)}", 0.0, a))
        rows.append(_row(f"uII_rel_error@eps={fmt(e)}", 0.0, b))
    rows.append(_row("order_uI", 2.0, st.order_I))
    rows.append(_row("order_uII", 1.0, st.order_II))
    fig = {"uI_error": [[float(e), float(a)] for e, a in zip(st.scales, st.errors_I)],
           "uII_error": [[float(e), float(b)] for e, b in zip(st.scales, st.errors_II)]}
    return {"kind": "linearize", "model": cfg.model, "rows": rows, "figures": fig,
            "fit_residuals": [float(r) for r in st.residuals]}


def run_invert_diffusion(cfg: ScenarioConfig, run: Run) -> dict:
    ds = cfg.diffusion
    if ds is None:
        raise ConfigError("diffusion: required for invert-diffusion", stage="config", fields=["diffusion"])
    grid = cfg.grid.build()
    h = min(grid.spacing)
    d = ds.truth.sample(grid)
    sources = [dif.PointSource(tuple(map(float, q)), ds.source_width_cells * h)
               for q in dif.ring_points(ds.sources.center, ds.sources.radius, ds.sources.count, ds.sources.phase)]
    mask = np.zeros(grid.shape, dtype=bool)
    for r in dif.ring_points(ds.receivers.center, ds.receivers.radius, ds.receivers.count, ds.receivers.phase):
        mask[grid.mode_index(np.round(np.asarray(r) / np.array(grid.spacing)).astype(int))] = True
    with run.stage("simulate_measurements"):
        ms = dif.simulate_measurements(grid, d, sources, mask, ds.T, ds.dt)
    for j, m in enumerate(ms):
        run.write_npy(f"measurements/source{j:02d}_values.npy", m.values)
    run.write_npy("measurements/times.npy", ms[0].times)
    run.write_npy("measurements/mask.npy", mask)
    dcfg = dif.DiffusionConfig(
        p_values=tuple(ds.p_values) if ds.p_values is not None else dif.DEFAULT_P_LADDER,
        tail=ds.tail, center=tuple(ds.truth.center), region_radius=ds.region_radius,
        node_spacing=ds.node_spacing_cells * h, alpha=ds.alpha)
    with run.stage("invert_diffusion"):
        rep = dif.invert_diffusion(ms, sources, dcfg, true_d=Field(grid, d))
    run.write_field("fields/d_recovered.grd", rep.d_field.values)
    run.write_field("fields/d_true.grd", d)
    nodes = rep.system.nodes
    idx = tuple(np.round(nodes / np.array(grid.spacing)).astype(int).T % np.array(grid.shape)[:, None])
    m_true = (1 - 1 / d)[idx]
    rows = []
    for k, r in enumerate(nodes):
        rows.append(_row(f"m@({fmt(r[0])},{fmt(r[1])})", m_true[k], rep.solution.m[k]))
    for k, r in enumerate(nodes):
        rows.append(_row(f"d@({fmt(r[0])},{fmt(r[1])})", d[idx][k], rep.solution.d[k]))
    sweep = rep.solution.sweep
    fig = {"lcurve": [[s["residual"], s["penalty"]] for s in sweep],
           "norm_vs_alpha": [[s["alpha"], s["norm"]] for s in sweep]}
    return {"kind": "diffusion", "rows": rows, "figures": fig, "alpha": float(rep.solution.alpha),
            "stage_residuals": rep.stage_residuals}


def run_invert_advection(cfg: ScenarioConfig, run: Run) -> dict:
    grid = cfg.grid.build()
    params = cfg.build_params()
    if params.model == "heat":
        raise ConfigError("model: invert-advection needs M1 or M2", stage="config", fields=["model"])
    pc = cfg.probes
    n = params.n_species
    if pc.constant:
        probes = ki.constant_schedule(n)
    else:
        probes = ki.default_schedule(n, grid.ndim, pc.base, pc.amplitude, pc.form)
    with run.stage("probes"):
        recs = ki.run_probes(params, grid, probes, pc.T, pc.dt, pc.form)
    rows = []
    if pc.target == "normalization":
        if params.model != "M1":
            raise ConfigError("probes.target: normalization needs model M1", stage="config",
                              fields=["probes.target"])
        with run.stage("recover"):
            est = ki.recover_normalization(recs, params, grid)
        for (i, j), e in sorted(est.items()):
            truth = ki.normalization_constant(params.kernels[i][j], grid, None if e.vanishing else e.index)
            rows += _complex_rows(f"c[{i},{j}]@{e.index}", truth, e.value)
        return {"kind": "normalization", "rows": rows, "figures": {},
                "vanishing": {f"{i},{j}": e.vanishing for (i, j), e in sorted(est.items())}}
    with run.stage("recover"):
        rep = ki.recover_mu(recs, params, grid) if params.model == "M1" else ki.recover_nu(recs, params, grid)
    truth = params.coupling
    for i in range(n):
        for j in range(n):
            rows.append(_row(f"{rep.kind}[{i},{j}]", truth[i, j], rep.matrix[i, j]))
    return {"kind": rep.kind, "rows": rows, "figures": {},
            "residuals": {f"{i},{j}": e.residual for (i, j), e in sorted(rep.entries.items())}}


def run_invert_kernel(cfg: ScenarioConfig, run: Run) -> dict:
    grid = cfg.grid.build()
    params = cfg.build_params()
    if params.model != "M2":
        raise ConfigError("model: invert-kernel needs M2", stage="config", fields=["model"])
    pc = cfg.probes
    entries = [tuple(e) for e in pc.entries] if pc.entries else [(0, 0)]
    rows, fig, gaps = [], {}, {}
    for i, j in entries:
        probes = ki.w_probes(grid, i, j, pc.cutoff, pc.amplitude)
        with run.stage(f"probes_{i}{j}"):
            recs = ki.run_probes(params, grid, probes, pc.T, pc.dt, pc.form)
        with run.stage(f"recover_{i}{j}"):
            rep = ki.recover_w(recs, params, grid, entries=[(i, j)])
        spec = params.kernels[i][j]
        wt = spec.sample(grid)
        wt_hat = grid.fft(wt - wt.mean())
        for m, v in rep.w_table[(i, j)].items():
            rows += _complex_rows(f"w_hat[{i},{j}]@{m}", wt_hat[grid.mode_index(m)], v)
        run.write_field(f"fields/w_{i}{j}_recovered.grd", rep.w_fields[(i, j)].values)
        mags = sorted((abs(v) for v in rep.w_table[(i, j)].values()), reverse=True)
        fig[f"w{i}{j}_spectrum"] = [[k, float(a)] for k, a in enumerate(mags)]
        gaps[f"{i},{j}"] = [list(g) for g in rep.gaps[(i, j)]]
    return {"kind": "w", "rows": rows, "figures": fig, "gaps": gaps}


def run_report(run_dir: Path) -> dict:
    """Check the manifest against the files on disk and regenerate the tables."""
    mpath = run_dir / "manifest.json"
    if not mpath.exists():
        raise ConfigError(f"no manifest in {run_dir}", stage="report")
    man = json.loads(mpath.read_text())
    bad = [a["path"] for a in man["artifacts"]
           if not (run_dir / a["path"]).exists() or _sha(run_dir / a["path"]) != a["sha256"]]
    if bad:
        raise ConfigError(f"artifacts missing or modified: {bad}", stage="report")
    if manifest_digest(man) != man["manifest_hash"]:
        raise ConfigError("manifest hash mismatch", stage="report")
    report = json.loads((run_dir / "report.json").read_text())
    emit_tables(run_dir, report)
    return {"config_hash": man["config_hash"], "verb": man["verb"], "rows": len(report.get("rows", [])),
            "artifacts": len(man["artifacts"])}


RUNNERS = {
    "simulate": run_simulate,
    "linearize": run_linearize,
    "invert-diffusion": run_invert_diffusion,
    "invert-advection": run_invert_advection,
    "invert-kernel": run_invert_kernel,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aggrekit", description="Aggregation-model simulation and inversion runs")
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        sp = sub.add_parser(verb)
        if verb == "report":
            sp.add_argument("run_dir", help="run directory containing manifest.json")
        else:
            sp.add_argument("--config", required=True, help="scenario JSON file")
            sp.add_argument("--out", default=None, help="output root (default $AGGREKIT_OUT)")
            sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--threads", type=int, default=1, help="FFT worker threads")
    return ap


def output_root(arg, cfg: ScenarioConfig) -> Path:
    return Path(arg or cfg.output or os.environ.get("AGGREKIT_OUT") or DEFAULT_OUT)


def _fail(exc: AggrekitError, run: Run | None) -> int:
    doc = exc.to_dict()
    if run is not None:
        (run.dir / "error.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return exc.exit_code


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    if args.threads < 1:
        print(json.dumps({"error": "ConfigError", "message": "--threads must be >= 1"}), file=sys.stderr)
        return 2
    set_workers(args.threads)
    run = None
    try:
        if args.verb == "report":
            print(json.dumps(run_report(Path(args.run_dir)), sort_keys=True))
            return 0
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = ScenarioConfig.model_validate({**cfg.model_dump(), "seed": args.seed})
        run = Run(args.verb, cfg, output_root(args.out, cfg))
        report = RUNNERS[args.verb](cfg, run)
        man = run.finish(report)
        print(json.dumps({"run_dir": str(run.dir), "manifest_hash": man["manifest_hash"]}, sort_keys=True))
        return 0
    except AggrekitError as exc:
        return _fail(exc, run)
    except ValueError as exc:
        return _fail(ConfigError(str(exc), stage="config"), run)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
