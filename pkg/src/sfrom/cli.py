"""Command-line pipeline: partition, build-rom, simulate, reference, compare, convergence.

Every command reads one JSON run configuration::

    {
      "medium":    {"dims": [81, 81], "h": 0.05, "kind": "homogeneous", "sigma": 1.0},
      "partition": {"cells_per_axis": 4, "remove_corners": true},
      "rom":       {"m": 4, "omega_max": 6.283185, "rel_epsilon": 1e-13},
      "solver":    {"T_final": 10.0, "dt": "fine", "cfl_safety": 0.9},
      "source":    {"location": [20, 30], "kind": "taper", "face": [[20, 21], [20, 39]], "width": 0.15},
      "receiver":  {"location": [60, 50]},
      "output":    {"dir": "out"}
    }

``medium`` may also be a path to a descriptor file.  Exit codes: 0 success,
2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .archive import load_archive, read_container, save_archive, write_container
from .errors import ConfigError, NumericalError, SfromError
from .fine_grid import assemble, make_source, medium_from_descriptor
from .msolver import Trace, WaveState, assemble_system, estimate_dt, flops_per_step, run
from .partition import Partition, carry_vector, divide_and_conquer, regular_partition, remove_corner_set
from .reference import GaussianDerivative, fine_cfl, fine_flops_per_step, fine_leapfrog
from .romgen import build_bases, build_roms, project_io

__all__ = [
    "RunConfig",
    "ComparisonReport",
    "Setup",
    "load_config",
    "prepare",
    "cmd_partition",
    "cmd_build_rom",
    "cmd_simulate",
    "cmd_reference",
    "cmd_compare",
    "cmd_convergence",
    "main",
]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


@dataclass
class RunConfig:
    """Validated run configuration (see the module docstring for the layout)."""

    medium: dict
    partition: dict
    rom: dict
    solver: dict = field(default_factory=dict)
    source: dict | None = None
    receiver: dict | None = None
    output: dict = field(default_factory=dict)
    convergence: dict = field(default_factory=dict)
    base_dir: str = "."

    @property
    def omega_max(self):
        return float(self.rom["omega_max"])

    @property
    def m(self):
        return int(self.rom.get("m", 4))

    @classmethod
    def from_dict(cls, doc, base_dir="."):
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        for key in ("medium", "partition", "rom"):
            if key not in doc:
                raise ConfigError(f"configuration lacks the {key!r} section")
        medium = doc["medium"]
        if isinstance(medium, str):
            path = medium if os.path.isabs(medium) else os.path.join(base_dir, medium)
            try:
                with open(path) as fh:
                    medium = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read medium descriptor {path}: {exc}") from exc
            base_dir = os.path.dirname(path) or "."
        cfg = cls(
            dict(medium), dict(doc["partition"]), dict(doc["rom"]), dict(doc.get("solver", {})),
            doc.get("source"), doc.get("receiver"), dict(doc.get("output", {})), dict(doc.get("convergence", {})),
            base_dir,
        )
        cfg.validate()
        return cfg

    def validate(self):
        try:
            om = float(self.rom.get("omega_max", float("nan")))
            m = int(self.rom.get("m", 4))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid rom section: {exc}") from exc
        if not om > 0 or not math.isfinite(om):
            raise ConfigError("rom.omega_max must be a positive number")
        if m < 1:
            raise ConfigError("rom.m must be at least 1")
        part = self.partition
        if ("cells_per_axis" in part) == ("target_size" in part):
            raise ConfigError("partition needs exactly one of 'cells_per_axis' or 'target_size'")
        if "cells_per_axis" in part:
            c = int(part["cells_per_axis"])
            dims = self.medium.get("dims", [])
            if c < 1 or any((int(n) - 1) % c for n in dims):
                raise ConfigError(f"cells_per_axis={c} does not divide the grid dims {dims} (need (n - 1) % c == 0)")
        dt = self.solver.get("dt", "fine")
        if not (dt in ("fine", "rom") or (isinstance(dt, (int, float)) and dt > 0)):
            raise ConfigError("solver.dt must be 'fine', 'rom' or a positive number")
        if float(self.solver.get("T_final", 1.0)) <= 0:
            raise ConfigError("solver.T_final must be positive")

    def with_rom(self, **changes):
        out = copy.deepcopy(self)
        out.rom.update(changes)
        out.validate()
        return out


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    return RunConfig.from_dict(doc, os.path.dirname(os.fspath(path)) or ".")


@dataclass
class Setup:
    """Grids, partition and source vectors derived from a configuration."""

    pencil0: object
    pencil: object
    partition: Partition
    splits: list
    g0: np.ndarray | None
    q0: np.ndarray | None
    g: np.ndarray | None
    q: np.ndarray | None


def _vector(cfg, pencil, spec):
    if spec is None:
        return None
    loc = spec["location"]
    loc = int(loc) if isinstance(loc, int) else tuple(int(v) for v in loc)
    nodes = None
    if "face" in spec:
        lo, hi = (np.asarray(c, dtype=np.int64) for c in spec["face"])
        axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
        nodes = [pencil.index_of(c) for c in grid]
    elif "nodes" in spec:
        nodes = [pencil.index_of(c) for c in spec["nodes"]]
    try:
        vec = make_source(pencil, loc, spec.get("kind", "delta"), mass_scaled=bool(spec.get("mass_scaled", False)),
                          nodes=nodes, width=spec.get("width")).vector
    except ValueError as exc:
        raise ConfigError(f"source/receiver {spec}: {exc}") from exc
    return vec * float(spec.get("amplitude", 1.0))


def prepare(cfg):
    """Assemble the grid, partition it and move source / receiver onto the partition."""
    try:
        medium = medium_from_descriptor(cfg.medium, cfg.base_dir)
        pen0 = assemble(medium)
    except ValueError as exc:
        raise ConfigError(f"invalid medium: {exc}") from exc
    part = cfg.partition
    alpha, beta = float(part.get("alpha", 0.5)), float(part.get("beta", 0.5))
    if "cells_per_axis" in part:
        P0, S0 = regular_partition(pen0, int(part["cells_per_axis"]))
    else:
        P0, S0 = divide_and_conquer(pen0, int(part["target_size"]), alpha=alpha, beta=beta,
                                    seed_strategy=part.get("seed_strategy", "auto"))
    g0 = _vector(cfg, pen0, cfg.source)
    q0 = _vector(cfg, pen0, cfg.receiver)
    if part.get("remove_corners", True) and P0.corner_set.size:
        pen, P, S = remove_corner_set(pen0, P0, S0)
        g = None if g0 is None else carry_vector(g0, pen, P)
        q = None if q0 is None else carry_vector(q0, pen, P)
    else:
        pen, P, S, g, q = pen0, P0, S0, g0, q0
    return Setup(pen0, pen, P, S, g0, q0, g, q)


def _out(args_out, cfg):
    out = args_out or cfg.output.get("dir", "out")
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _wavelet(cfg):
    w = cfg.solver.get("wavelet", {})
    return GaussianDerivative(cfg.omega_max, float(w.get("sharpness", 4.2)), float(w.get("delay", 6.0)))


def cmd_partition(cfg, out, *, setup=None):
    """Write ``partition.json`` (cells, interfaces, skeleton, hanging-node map)."""
    setup = setup or prepare(cfg)
    path = os.path.join(out, "partition.json")
    with open(path, "w") as fh:
        fh.write(setup.partition.to_json())
        fh.write("\n")
    return path


def _check_partition(out, setup):
    path = os.path.join(out, "partition.json")
    if os.path.exists(path):
        with open(path) as fh:
            stored = Partition.from_json(fh.read())
        same = stored.n_nodes == setup.partition.n_nodes and len(stored.cells) == len(setup.partition.cells) and all(
            np.array_equal(a, b) for a, b in zip(stored.cells, setup.partition.cells)
        )
        if not same:
            raise ConfigError(f"{path} does not match the configuration; re-run 'partition'")


def build_basis(cfg, setup, *, threads=1):
    r = cfg.rom
    return build_bases(
        setup.pencil, setup.partition, cfg.omega_max,
        epsilon=r.get("epsilon"), rel_epsilon=float(r.get("rel_epsilon", 1e-6)),
        max_size=r.get("max_size"), collar=r.get("collar", "global"), threads=threads,
    )


def _projected_io(setup, basis, vec):
    if vec is None:
        return None
    out = {}
    P = setup.partition
    for key in basis.S:
        nodes = P.ports[key[0]] if key[1] < 0 else P.interfaces[key]
        out[key] = project_io(basis.S[key], vec[nodes])[0]
    return out


def cmd_build_rom(cfg, out, *, threads=1, setup=None, basis=None):
    """Build every cell ROM and write the archive directory ``out/rom``."""
    setup = setup or prepare(cfg)
    _check_partition(out, setup)
    basis = basis or build_basis(cfg, setup, threads=threads)
    roms = build_roms(setup.partition, setup.splits, basis, cfg.m, cfg.rom.get("shift"),
                      zero_power=bool(cfg.rom.get("zero_power", True)), threads=threads)
    directory = os.path.join(out, "rom")
    save_archive(directory, roms, basis, source=_projected_io(setup, basis, setup.g),
                 receiver=_projected_io(setup, basis, setup.q),
                 extra={"n_nodes": int(setup.pencil.N), "fine_nodes": int(setup.pencil0.N)})
    return directory, roms, basis


def _choose_dt(cfg, setup, system, seed):
    dt = cfg.solver.get("dt", "fine")
    safety = float(cfg.solver.get("cfl_safety", 0.9))
    if dt == "fine":
        return safety * fine_cfl(setup.pencil0, seed=seed)
    if dt == "rom":
        return estimate_dt(system, safety, seed=seed)
    return float(dt)


def _state_doc(state):
    return {"n": int(state.n), "dt": float(state.dt)}


def cmd_simulate(cfg, out, *, threads=1, seed=0, setup=None, archive=None, restart=None, stem="trace"):
    """Run the multiscale solver from the archive; write ``<stem>.csv``, ``<stem>.json`` and ``<stem>.state.bin``."""
    setup = setup or prepare(cfg)
    roms, basis, manifest, _ = load_archive(archive or os.path.join(out, "rom"))
    if len(roms) != setup.partition.n_cells:
        raise ConfigError("ROM archive and configuration disagree on the number of cells")
    system = assemble_system(setup.partition, roms, basis, setup.g, setup.q, pencil=setup.pencil)
    wavelet = _wavelet(cfg)
    energy_every = int(cfg.solver.get("energy_every", 1))
    corner = bool(cfg.solver.get("corner_correction", False))
    T_final = float(cfg.solver.get("T_final", 1.0))
    prior_t = prior_v = None
    prior_energy = []
    state = None
    if restart is not None:
        with open(restart) as fh:
            meta = json.load(fh)
        base = os.path.dirname(restart) or "."
        arrays = read_container(os.path.join(base, meta["state_file"]))
        dt = float(meta["dt"])
        state = WaveState(arrays["x"], arrays["x_prev"], int(meta["state"]["n"]), dt)
        prev = Trace.from_csv(os.path.join(base, meta["trace_file"]))
        prior_t, prior_v = prev.times[:-1], prev.values[:-1]
        prior_energy = [tuple(e) for e in meta["energy"]]
    else:
        dt = _choose_dt(cfg, setup, system, seed)
    t0 = time.perf_counter()
    trace = run(system, wavelet, T_final, dt, corner_correction=corner, threads=threads, state=state,
                energy_every=energy_every)
    wall = time.perf_counter() - t0
    final = trace.metadata["final_state"]
    if prior_t is not None:
        trace = Trace(np.concatenate([prior_t, trace.times]), np.concatenate([prior_v, trace.values]), trace.metadata)
    csv_path = os.path.join(out, f"{stem}.csv")
    trace.to_csv(csv_path)
    write_container(os.path.join(out, f"{stem}.state.bin"), {"x": final.x, "x_prev": final.x_prev})
    meta = {
        "kind": "multiscale",
        "dt": dt,
        "steps": int(final.n),
        "m": [int(r.m) for r in roms],
        "K": [int(r.K) for r in roms],
        "shift": [float(r.shift) for r in roms],
        "dof": int(system.n_state),
        "fine_nodes": int(setup.pencil0.N),
        "flops_per_step": flops_per_step(system),
        "wavelet": wavelet.to_dict(),
        "corner_correction": corner,
        "seed": int(seed),
        "energy": [list(e) for e in prior_energy] + [list(e) for e in trace.metadata["energy"]],
        "trace_file": f"{stem}.csv",
        "state_file": f"{stem}.state.bin",
        "state": _state_doc(final),
        "archive_cells": len(manifest["cells"]),
    }
    _write_json(os.path.join(out, f"{stem}.json"), meta)
    _write_json(os.path.join(out, f"{stem}.timing.json"), {"wall_seconds": wall})
    return trace, meta


def cmd_reference(cfg, out, *, seed=0, setup=None, stem="reference"):
    """Fine-grid leapfrog on the original grid (``solver.reference_grid = "modified"`` uses the corner-free one)."""
    setup = setup or prepare(cfg)
    which = cfg.solver.get("reference_grid", "original")
    pen, g, q = (setup.pencil, setup.g, setup.q) if which == "modified" else (setup.pencil0, setup.g0, setup.q0)
    if q is None:
        raise ConfigError("the reference run needs a receiver")
    g = np.zeros(pen.N) if g is None else g
    dt = cfg.solver.get("dt", "fine")
    if dt == "rom":
        raise ConfigError("solver.dt = 'rom' needs a ROM; give the multiscale dt explicitly for the reference")
    dt = float(cfg.solver.get("cfl_safety", 0.9)) * fine_cfl(setup.pencil0, seed=seed) if dt == "fine" else float(dt)
    wavelet = _wavelet(cfg)
    t0 = time.perf_counter()
    trace = fine_leapfrog(pen, g, q, wavelet, float(cfg.solver.get("T_final", 1.0)), dt)
    wall = time.perf_counter() - t0
    trace.to_csv(os.path.join(out, f"{stem}.csv"))
    meta = {
        "kind": "fine",
        "grid": which,
        "dt": dt,
        "steps": int(trace.metadata["steps"]),
        "dof": int(pen.N),
        "fine_nodes": int(setup.pencil0.N),
        "flops_per_step": fine_flops_per_step(pen),
        "wavelet": wavelet.to_dict(),
        "seed": int(seed),
        "trace_file": f"{stem}.csv",
    }
    _write_json(os.path.join(out, f"{stem}.json"), meta)
    _write_json(os.path.join(out, f"{stem}.timing.json"), {"wall_seconds": wall})
    return trace, meta


@dataclass
class ComparisonReport:
    """Error metrics of a trace against a reference on the trace's time grid."""

    max_abs: float
    rel_l2: float
    steps: dict
    wall_seconds: dict
    dof: dict
    flops_per_period: dict

    def to_dict(self):
        return {
            "max_abs": self.max_abs,
            "rel_l2": self.rel_l2,
            "steps": self.steps,
            "wall_seconds": self.wall_seconds,
            "dof": self.dof,
            "flops_per_period": self.flops_per_period,
        }


def compare_traces(trace, ref):
    """``(max_abs, rel_l2)`` of ``trace`` against ``ref`` resampled onto the times of ``trace``."""
    t, v = np.asarray(trace.times), np.asarray(trace.values)
    rt, rv = np.asarray(ref.times), np.asarray(ref.values)
    if t.shape == rt.shape and np.allclose(t, rt, rtol=0, atol=1e-12 * max(1.0, abs(t[-1]))):
        r = rv
    else:
        inside = t <= rt[-1] + 1e-12
        t, v = t[inside], v[inside]
        r = np.interp(t, rt, rv)
    err = v - r
    denom = np.linalg.norm(r)
    return float(np.abs(err).max(initial=0.0)), float(np.linalg.norm(err) / denom) if denom > 0 else float(np.linalg.norm(err))


def _sidecar(path, suffix):
    stem = os.path.splitext(path)[0]
    p = stem + suffix
    if os.path.exists(p):
        with open(p) as fh:
            return json.load(fh)
    return {}


def cmd_compare(trace_path, ref_path, out=None, *, omega_max=None):
    """Compare two trace CSV files; write ``comparison.json`` into ``out`` if given."""
    try:
        a, b = Trace.from_csv(trace_path), Trace.from_csv(ref_path)
    except OSError as exc:
        raise ConfigError(f"cannot read traces: {exc}") from exc
    max_abs, rel = compare_traces(a, b)
    metas = {"trace": _sidecar(trace_path, ".json"), "reference": _sidecar(ref_path, ".json")}
    timings = {"trace": _sidecar(trace_path, ".timing.json"), "reference": _sidecar(ref_path, ".timing.json")}
    flops = {}
    for name, meta in metas.items():
        om = omega_max or (meta.get("wavelet") or {}).get("omega_max")
        if om and "flops_per_step" in meta:
            flops[name] = meta["flops_per_step"] * (2 * math.pi / om) / meta["dt"]
    report = ComparisonReport(
        max_abs, rel,
        {k: m.get("steps") for k, m in metas.items()},
        {k: t.get("wall_seconds") for k, t in timings.items()},
        {"fine_nodes": metas["reference"].get("fine_nodes", metas["trace"].get("fine_nodes")),
         "trace": metas["trace"].get("dof"), "reference": metas["reference"].get("dof")},
        flops,
    )
    if out is not None:
        os.makedirs(out, exist_ok=True)
        _write_json(os.path.join(out, "comparison.json"), report.to_dict())
    return report


def cmd_convergence(cfg, out, *, param=None, values=None, threads=1, seed=0):
    """Sweep ``rom.<param>`` over ``values`` against one fine reference; write ``convergence.csv``.

    Sweeping ``m`` reuses one boundary basis for every row.
    """
    param = param or cfg.convergence.get("param", "m")
    values = list(values if values is not None else cfg.convergence.get("values", [cfg.rom.get(param)]))
    if not values or any(v is None for v in values):
        raise ConfigError("convergence sweep needs values")
    setup = prepare(cfg)
    ref, _ = cmd_reference(cfg, out, seed=seed, setup=setup)
    basis = build_basis(cfg, setup, threads=threads) if param == "m" else None
    rows = []
    for v in values:
        c = cfg.with_rom(**{param: v})
        sub = os.path.join(out, f"{param}_{v}")
        os.makedirs(sub, exist_ok=True)
        _, roms, b = cmd_build_rom(c, sub, threads=threads, setup=setup, basis=basis)
        trace, meta = cmd_simulate(c, sub, threads=threads, seed=seed, setup=setup)
        max_abs, rel = compare_traces(trace, ref)
        rows.append({"param": param, "value": v, "K_total": sum(b.size(k) for k in b.S), "dof": meta["dof"],
                     "max_abs": max_abs, "rel_l2": rel})
    path = os.path.join(out, "convergence.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["param", "value", "K_total", "dof", "max_abs", "rel_l2"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "max_abs": repr(r["max_abs"]), "rel_l2": repr(r["rel_l2"])})
    return rows


def _parse_values(text):
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        out.append(int(tok) if tok.lstrip("-").isdigit() else float(tok))
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="sfrom", description="Multiscale S-fraction reduced-order wave simulator")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--out", help="output directory (default: output.dir of the config, else ./out)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-cell work")
    common.add_argument("--seed", type=int, default=0, help="seed of the eigensolver and power-iteration start vectors")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("partition", parents=[common], help="partition the grid and write partition.json")
    sub.add_parser("build-rom", parents=[common], help="build the per-cell ROM archive")
    s = sub.add_parser("simulate", parents=[common], help="run the multiscale solver")
    s.add_argument("--archive", help="ROM archive directory (default: <out>/rom)")
    s.add_argument("--restart", help="metadata JSON of an earlier run to continue from")
    sub.add_parser("reference", parents=[common], help="run the fine-grid reference")
    c = sub.add_parser("compare", parents=[common], help="compare two trace CSV files")
    c.add_argument("trace")
    c.add_argument("reference")
    v = sub.add_parser("convergence", parents=[common], help="sweep a ROM parameter and tabulate errors")
    v.add_argument("--param", help="rom parameter to sweep (m, rel_epsilon, max_size, ...)")
    v.add_argument("--values", help="comma-separated values")
    return p


def _dispatch(args):
    if args.command == "compare":
        report = cmd_compare(args.trace, args.reference, args.out)
        print(json.dumps(report.to_dict(), sort_keys=True))
        return
    if not args.config:
        raise ConfigError(f"'{args.command}' needs --config")
    cfg = load_config(args.config)
    out = _out(args.out, cfg)
    if args.command == "partition":
        print(cmd_partition(cfg, out))
    elif args.command == "build-rom":
        print(cmd_build_rom(cfg, out, threads=args.threads)[0])
    elif args.command == "simulate":
        _, meta = cmd_simulate(cfg, out, threads=args.threads, seed=args.seed, archive=args.archive, restart=args.restart)
        print(os.path.join(out, meta["trace_file"]))
    elif args.command == "reference":
        _, meta = cmd_reference(cfg, out, seed=args.seed)
        print(os.path.join(out, meta["trace_file"]))
    elif args.command == "convergence":
        values = _parse_values(args.values) if args.values else None
        for row in cmd_convergence(cfg, out, param=args.param, values=values, threads=args.threads, seed=args.seed):
            print(f"{row['param']}={row['value']}  K={row['K_total']}  max_abs={row['max_abs']:.3e}  rel_l2={row['rel_l2']:.3e}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except NumericalError as exc:
        print(f"sfrom: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, SfromError, ValueError, KeyError, OSError) as exc:
        print(f"sfrom: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
