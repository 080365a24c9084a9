"""Experiment driver.

Subcommands: gen-stream, run, ablate, probe, report. Exit codes: 0 success,
2 configuration error, 3 data/file error, 4 partial sweep failure. Relative
output directories are resolved under $TICLAB_OUTPUT_ROOT when it is set.
All file writes go through a write-temp-then-rename path.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .backbone import init_backbone
from .config import ExperimentConfig, load_config
from .dap import MODES, run_continual, run_manifest, save_state
from .errors import ConfigError, FormatError, StreamError, TiclabError
from .metrics import plasticity_forgetting, probe_curve, summary_accuracies
from .streams import ORDERINGS, load_stream, save_stream

RESULTS_HEADER = "mode,ordering,rho,seed,A_N,A_L,mean_P,mean_F,lambda_trace,wall_time_s"
PROBE_HEADER = "mode,seed,task,probe_accuracy"
SUMMARY_HEADER = (
    "mode,ordering,lambda,n_seeds,A_N_mean,A_N_stderr,A_L_mean,A_L_stderr,"
    "P_mean,P_stderr,F_mean,F_stderr"
)


def _out_path(path_str: str) -> Path:
    p = Path(path_str)
    root = os.environ.get("TICLAB_OUTPUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _append_csv_row(path: Path, header: str, row: str) -> None:
    if not path.exists():
        _atomic_write_text(path, header + "\n")
    with open(path, "a", encoding="utf-8") as f:
        f.write(row + "\n")


def _mode_label(mode: str, lam: float | None) -> str:
    if mode == "fixed_lambda":
        return f"fixed_{lam:.2f}"
    return mode


def _mean_stderr(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    stderr = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return mean, stderr


def execute_run(
    cfg: ExperimentConfig,
    mode: str,
    ordering: str,
    seed: int,
    stream=None,
    fixed_lambda: float | None = None,
    after_task=None,
):
    """One continual run; returns everything the file writers need."""
    if stream is None:
        stream = cfg.make_stream(ordering=ordering, run_seed=seed)
    backbone = init_backbone(cfg.backbone_config())
    dap_cfg = cfg.dap_config(mode=mode, seed=seed, fixed_lambda=fixed_lambda)
    start = time.perf_counter()
    state, matrix = run_continual(stream, backbone, dap_cfg, after_task=after_task)
    wall = time.perf_counter() - start
    a_n, a_l = summary_accuracies(matrix)
    pf = plasticity_forgetting(matrix)
    lam_trace = [log.lam for log in state.logs]
    return {
        "cfg": dap_cfg,
        "stream": stream,
        "backbone": backbone,
        "state": state,
        "matrix": matrix,
        "A_N": a_n,
        "A_L": a_l,
        "mean_P": pf.mean_plasticity,
        "mean_F": pf.mean_forgetting,
        "lambda_trace": lam_trace,
        "wall_time_s": wall,
    }


def _lambda_trace_str(trace) -> str:
    vals = [v for v in trace if v is not None]
    if not vals:
        return ""
    return ";".join(f"{v:.6f}" for v in vals)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_stream(args) -> int:
    cfg = _config_from(args)
    ordering = args.ordering or cfg.ordering
    stream = cfg.make_stream(ordering=ordering, run_seed=None)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_stream(stream, out)
    sizes = [t.total_size for t in stream.tasks]
    print(f"stream written to {out}")
    print(f"fingerprint {stream.fingerprint()}")
    print(f"ordering {ordering}; task sizes {sizes}")
    return 0


def cmd_run(args) -> int:
    cfg = _config_from(args)
    mode = args.mode or cfg.mode
    if mode not in MODES:
        raise ConfigError(f"run: unknown mode {mode!r}, expected one of {MODES}")
    ordering = args.ordering or cfg.ordering
    if ordering not in ORDERINGS:
        raise ConfigError(f"run: unknown ordering {ordering!r}")
    out = _out_path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    pinned_stream = load_stream(_out_path(args.stream)) if args.stream else None
    label = _mode_label(mode, cfg.fixed_lambda)

    for seed in cfg.seeds:
        tag = f"{label}_{ordering}_seed{seed}"
        manifest_path = out / f"manifest_{tag}.json"
        if manifest_path.exists() and not args.force:
            raise ConfigError(
                f"run: {manifest_path} already exists; pass --force to overwrite"
            )
        run = execute_run(cfg, mode, ordering, seed, stream=pinned_stream)
        _atomic_write_text(out / f"acc_matrix_{tag}.csv", run["matrix"].to_csv_text())
        save_state(out / f"state_{tag}.bin", run["state"], run["backbone"], run["cfg"])
        manifest = run_manifest(run["cfg"], run["stream"], run["backbone"], run["state"])
        manifest["ordering"] = ordering
        manifest["results_csv_schema"] = "results/1"
        _atomic_write_text(manifest_path, json.dumps(manifest, sort_keys=True, indent=2))
        row = ",".join(
            [
                label,
                ordering,
                f"{cfg.rho:.6f}",
                str(seed),
                f"{run['A_N']:.6f}",
                f"{run['A_L']:.6f}",
                f"{run['mean_P']:.6f}",
                f"{run['mean_F']:.6f}",
                _lambda_trace_str(run["lambda_trace"]),
                f"{run['wall_time_s']:.6f}",
            ]
        )
        _append_csv_row(out / "results.csv", RESULTS_HEADER, row)
        print(
            f"{tag}: A_N={run['A_N']:.4f} A_L={run['A_L']:.4f} "
            f"P={run['mean_P']:.4f} F={run['mean_F']:.4f}"
        )
    return 0


def _sweep_cells(cfg: ExperimentConfig):
    cells = []
    for ordering in cfg.ablate_orderings:
        for mode in cfg.ablate_modes:
            for seed in cfg.seeds:
                cells.append({"mode": mode, "lambda": None, "ordering": ordering, "seed": seed})
        for lam in cfg.lambda_grid:
            for seed in cfg.seeds:
                cells.append(
                    {"mode": "fixed_lambda", "lambda": lam, "ordering": ordering, "seed": seed}
                )
    return cells


def _cell_id(cell) -> str:
    label = _mode_label(cell["mode"], cell["lambda"])
    return f"{label}_{cell['ordering']}_seed{cell['seed']}"


def write_summary_csv(cell_rows, path: Path) -> None:
    """Aggregate per-(mode, ordering, lambda) mean and standard error."""
    groups: dict[tuple, list[dict]] = {}
    for row in cell_rows:
        key = (row["mode"], row["ordering"], row["lambda"])
        groups.setdefault(key, []).append(row)
    lines = [SUMMARY_HEADER]
    for key in sorted(groups, key=lambda k: (k[0], k[1], -1.0 if k[2] is None else k[2])):
        rows = groups[key]
        mode, ordering, lam = key
        cols = [mode, ordering, "" if lam is None else f"{lam:.2f}", str(len(rows))]
        for metric in ("A_N", "A_L", "mean_P", "mean_F"):
            mean, stderr = _mean_stderr([r[metric] for r in rows])
            cols += [f"{mean:.6f}", f"{stderr:.6f}"]
        lines.append(",".join(cols))
    _atomic_write_text(path, "\n".join(lines) + "\n")


def cmd_ablate(args) -> int:
    cfg = _config_from(args)
    out = _out_path(args.out or cfg.output_dir)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)

    failures = []
    for cell in _sweep_cells(cfg):
        cell_path = cells_dir / f"{_cell_id(cell)}.json"
        if cell_path.exists():
            continue
        try:
            run = execute_run(
                cfg, cell["mode"], cell["ordering"], cell["seed"],
                fixed_lambda=cell["lambda"],
            )
        except TiclabError as exc:
            failures.append((_cell_id(cell), str(exc)))
            print(f"cell {_cell_id(cell)} failed: {exc}", file=sys.stderr)
            continue
        record = {
            "mode": _mode_label(cell["mode"], cell["lambda"]),
            "raw_mode": cell["mode"],
            "lambda": cell["lambda"],
            "ordering": cell["ordering"],
            "seed": cell["seed"],
            "A_N": run["A_N"],
            "A_L": run["A_L"],
            "mean_P": run["mean_P"],
            "mean_F": run["mean_F"],
            "lambda_trace": [v for v in run["lambda_trace"] if v is not None],
            "stream_fingerprint": run["stream"].fingerprint(),
            "backbone_fingerprint": run["backbone"].fingerprint(),
        }
        _atomic_write_text(cell_path, json.dumps(record, sort_keys=True, indent=2))
        print(f"cell {_cell_id(cell)}: A_N={run['A_N']:.4f}")

    rows = _read_cells(cells_dir)
    write_summary_csv(rows, out / "aggregate.csv")
    print(f"aggregate written to {out / 'aggregate.csv'} ({len(rows)} cells)")
    if failures:
        print(f"{len(failures)} cell(s) failed", file=sys.stderr)
        return 4
    return 0


def _read_cells(cells_dir: Path):
    rows = []
    for path in sorted(cells_dir.glob("*.json")):
        with open(path, "r", encoding="utf-8") as f:
            rows.append(json.load(f))
    return rows


def cmd_probe(args) -> int:
    cfg = _config_from(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for mode in modes:
        if mode not in MODES:
            raise ConfigError(f"probe: unknown mode {mode!r}")
        if mode == "task_specific_only":
            raise ConfigError("probe: task_specific_only keeps no general prompt to probe")
    ordering = args.ordering or cfg.ordering
    out = _out_path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for mode in modes:
        for seed in cfg.seeds:
            snapshots = []
            run = execute_run(
                cfg, mode, ordering, seed,
                after_task=lambda state, pos: snapshots.append(state.general_prompt.copy()),
            )
            accs = probe_curve(
                run["backbone"], snapshots, run["stream"], probe_epochs=cfg.probe_epochs
            )
            for task_pos, acc in enumerate(accs):
                rows.append((mode, seed, task_pos, acc))
            print(f"probe {mode} seed{seed}: final={accs[-1]:.4f}")

    lines = [PROBE_HEADER]
    lines += [f"{m},{s},{t},{a:.6f}" for (m, s, t, a) in rows]
    _atomic_write_text(out / "probe_curve.csv", "\n".join(lines) + "\n")
    print(f"probe curve written to {out / 'probe_curve.csv'}")
    return 0


def cmd_report(args) -> int:
    from . import plots

    results_dir = _out_path(args.results_dir)
    out = _out_path(args.out) if args.out else results_dir
    out.mkdir(parents=True, exist_ok=True)

    cells_dir = results_dir / "cells"
    probe_path = results_dir / "probe_curve.csv"
    cell_rows = _read_cells(cells_dir) if cells_dir.is_dir() else []
    missing = []
    if not cell_rows:
        missing.append(str(cells_dir / "*.json"))
    if not probe_path.exists():
        missing.append(str(probe_path))
    if not cell_rows and not probe_path.exists():
        raise StreamError(
            "report: no results found; expected " + " and/or ".join(missing)
        )

    produced = []
    if cell_rows:
        write_summary_csv(cell_rows, out / "summary.csv")
        produced.append("summary.csv")
        fixed = [r for r in cell_rows if r.get("lambda") is not None]
        dyn = [r for r in cell_rows if r.get("raw_mode", r["mode"]) == "dap"]
        if fixed:
            grid = sorted({r["lambda"] for r in fixed})
            means, errs = [], []
            for lam in grid:
                m, e = _mean_stderr([r["A_N"] for r in fixed if r["lambda"] == lam])
                means.append(m)
                errs.append(e)
            dyn_mean = dyn_err = None
            if dyn:
                dyn_mean, dyn_err = _mean_stderr([r["A_N"] for r in dyn])
            fig = plots.lambda_sweep_figure(grid, means, errs, dyn_mean, dyn_err)
            plots.save_svg(fig, out / "lambda_sweep.svg")
            produced.append("lambda_sweep.svg")

    if probe_path.exists():
        curves = _load_probe_curves(probe_path)
        fig = plots.probe_curve_figure(curves)
        plots.save_svg(fig, out / "probe_curve.svg")
        produced.append("probe_curve.svg")

    if missing:
        print("missing inputs (skipped): " + ", ".join(missing), file=sys.stderr)
    print(f"report artifacts in {out}: {', '.join(produced)}")
    return 0


def _load_probe_curves(path: Path):
    by_mode: dict[str, dict[int, list[float]]] = {}
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != PROBE_HEADER:
            raise FormatError(f"{path}: unexpected header {header!r}")
        for line in f:
            if not line.strip():
                continue
            mode, seed, task, acc = line.strip().split(",")
            by_mode.setdefault(mode, {}).setdefault(int(task), []).append(float(acc))
    curves = {}
    for mode, per_task in by_mode.items():
        tasks = sorted(per_task)
        stats = [_mean_stderr(per_task[t]) for t in tasks]
        curves[mode] = (tasks, [s[0] for s in stats], [s[1] for s in stats])
    return curves


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _config_from(args) -> ExperimentConfig:
    overrides = {}
    for item in args.override or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return load_config(args.config, overrides)


def _add_common(p) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument(
        "-o", "--override", action="append", metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ticlab",
        description="anchored prompt tuning on task-imbalanced continual streams",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-stream", help="materialize a stream file")
    _add_common(p)
    p.add_argument("--out", required=True, help="stream file path")
    p.add_argument("--ordering", choices=ORDERINGS)
    p.set_defaults(func=cmd_gen_stream)

    p = sub.add_parser("run", help="continual runs over the configured seeds")
    _add_common(p)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--ordering", choices=ORDERINGS)
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--stream", help="use this stream file for every seed")
    p.add_argument("--force", action="store_true", help="overwrite existing run outputs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="full-factorial mode/ordering/lambda sweep")
    _add_common(p)
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe", help="linear-probe curve per task")
    _add_common(p)
    p.add_argument("--modes", default="dap,general_only", help="comma-separated modes")
    p.add_argument("--ordering", choices=ORDERINGS)
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="summary CSV and SVG charts from results")
    p.add_argument("results_dir")
    p.add_argument("--out", help="where to write artifacts (default: results dir)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (StreamError, FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
