"""Batch command-line front end.

Subcommands run the kernel identity suites, the unit-sphere benchmark
solves, the volume-forced problem, gradient recovery, and refinement
sweeps.  Every report lands as a CSV with a machine-readable provenance
header, a JSON mirror, and a matplotlib figure next to the delimited
output.  Option precedence: command-line flags, then a plain
``key = value`` config file, then built-in defaults.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 numerical
failure.
"""

import argparse
import json
import os
import re
import sys

import matplotlib
import numpy as np
import scipy

from . import __version__, verify
from .galerkin import SolverError
from .quadrature import QuadratureError

matplotlib.use("Agg")
import matplotlib.pyplot as plt   # noqa: E402  (backend must be set first)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

SUBDIV_LIMIT = 7    # icosphere(7) tops 80k elements: dense operators blow up

SUITE_LEVELS = {"homogeneous": (1, 2, 3), "volume": (1, 2), "gradients": (1, 2)}


class UsageError(Exception):
    pass


def parse_point(text):
    parts = str(text).split(",")
    if len(parts) != 3:
        raise UsageError(f"expected a point as x,y,z, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise UsageError(f"expected a point as x,y,z, got {text!r}") from None


def parse_levels(text):
    try:
        levels = tuple(int(p) for p in str(text).split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if not levels:
        raise UsageError("subdivision list is empty")
    return levels


def load_config(path):
    """Plain ``key = value`` lines; blank lines and # comments ignored."""
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for ln, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{ln}: expected key = value")
                key, val = line.split("=", 1)
                values[key.strip()] = val.strip()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    return values


CONFIG_PARSERS = {
    "mu": float, "box": float, "grid": int, "subdiv": int, "samples": int,
    "seed": int, "threads": int, "source": parse_point, "case": str,
    "problem": str, "suite": str, "out": str, "subdivisions": parse_levels,
}


def resolve(args, config, key, default=None):
    """Flag > config file > default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in config:
        parser = CONFIG_PARSERS.get(key, str)
        try:
            return parser(config[key])
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad config value for {key}: {exc}") from None
    return default


def default_threads(args, config):
    value = resolve(args, config, "threads")
    if value is None:
        env = os.environ.get("STOKES_THREADS", "").strip()
        if env:
            try:
                value = int(env)
            except ValueError:
                raise UsageError(f"STOKES_THREADS must be an integer, got {env!r}") from None
    if value is None:
        value = os.cpu_count() or 1
    if value < 1:
        raise UsageError("thread count must be >= 1")
    return value


def provenance(command, config_echo):
    prov = {"command": command, "package": "stokesbie", "version": __version__,
            "numpy": np.__version__, "scipy": scipy.__version__}
    prov.update({k: config_echo[k] for k in sorted(config_echo)})
    return prov


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.9e}"
    return str(value)


def write_table(table, out_csv, prov):
    """CSV + JSON mirror + error-bar figure sharing the output stem."""
    rows = table.to_dicts()
    header = ["field", "component", "error", "reference", "ratio"]
    lines = [f"# {k} = {json.dumps(v, sort_keys=True, default=float)}" for k, v in prov.items()]
    lines += [f"# {k} = {json.dumps(v, sort_keys=True, default=float)}"
              for k, v in sorted(table.metadata.items())]
    lines.append(",".join(header))
    lines += [",".join(_fmt(r[k]) for k in header) for r in rows]
    with open(out_csv, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    stem = os.path.splitext(out_csv)[0]
    with open(stem + ".json", "w", encoding="utf-8") as fh:
        json.dump({"provenance": prov, "metadata": table.metadata, "rows": rows},
                  fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    _table_figure(table, stem + ".png")
    return [out_csv, stem + ".json", stem + ".png"]


def _table_figure(table, path):
    rows = table.to_dicts()
    labels = [f"{r['field']}.{r['component']}" for r in rows]
    errors = [r["error"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(6.0, 0.6 * len(rows)), 4.0))
    x = np.arange(len(rows))
    ax.bar(x, errors, color="steelblue", label="this run")
    refs = [r["reference"] for r in rows]
    if any(r is not None for r in refs):
        ax.plot(x, [np.nan if r is None else r for r in refs], "k_",
                markersize=14, label="reference")
    ax.set_yscale("log")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylabel("mean-square nodal error")
    ax.set_title(table.name)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": "stokesbie"})
    plt.close(fig)


def write_report(report, out_json, prov):
    rows = report.rows()
    with open(out_json, "w", encoding="utf-8") as fh:
        json.dump({"provenance": prov, "metadata": report.metadata,
                   "checks": rows, "passed": report.passed},
                  fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    stem = os.path.splitext(out_json)[0]
    header = ["check", "residual", "tolerance", "passed"]
    lines = [f"# {k} = {json.dumps(v, sort_keys=True, default=float)}" for k, v in prov.items()]
    lines.append(",".join(header))
    lines += [",".join(_fmt(r[k]) for k in header) for r in rows]
    with open(stem + ".csv", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    _report_figure(report, stem + ".png")
    return [out_json, stem + ".csv", stem + ".png"]


def _report_figure(report, path):
    rows = report.rows()
    margins = [max(r["residual"], 1e-300) / r["tolerance"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(6.0, 0.7 * len(rows)), 4.0))
    x = np.arange(len(rows))
    ax.bar(x, margins, color=["seagreen" if r["passed"] else "firebrick" for r in rows])
    ax.axhline(1.0, color="black", linewidth=1.0, label="tolerance")
    ax.set_yscale("log")
    ax.set_xticks(x)
    ax.set_xticklabels([r["check"] for r in rows], rotation=45, ha="right")
    ax.set_ylabel("residual / tolerance")
    ax.set_title(report.name)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": "stokesbie"})
    plt.close(fig)


def print_table(table, out_files):
    print(f"{table.name}: elements={table.metadata.get('elements')}")
    for r in table.to_dicts():
        ratio = "" if r["ratio"] is None else f"  ratio {r['ratio']:7.2f}"
        ref = "" if r["reference"] is None else f"  reference {r['reference']:.3e}"
        print(f"  {r['field']:>4s}.{r['component']}: {r['error']:.3e}{ref}{ratio}")
    print("wrote " + " ".join(out_files))


def cmd_verify(args, config):
    samples = resolve(args, config, "samples", 100)
    if samples < 1:
        raise UsageError("--samples must be >= 1")
    seed = resolve(args, config, "seed", 0)
    out = resolve(args, config, "out", "verify_report.json")
    r3 = verify.kernel_identity_check_3d(samples=samples, seed=seed)
    r2 = verify.kernel_identity_check_2d(samples=samples, seed=seed)
    merged = verify.VerificationReport("kernel_identities",
                                       r3.checks + r2.checks,
                                       {"3d": r3.metadata, "2d": r2.metadata})
    prov = provenance("verify", {"samples": samples, "seed": seed})
    files = write_report(merged, out, prov)
    for c in merged.checks:
        state = "pass" if c.passed else "FAIL"
        print(f"  {c.name}: {c.residual:.3e} <= {c.tolerance:.1e} [{state}]")
    print("wrote " + " ".join(files))
    return EXIT_OK if merged.passed else EXIT_CHECK_FAILED


def cmd_solve(args, config):
    case = resolve(args, config, "case")
    if case not in ("interior", "exterior"):
        raise UsageError("--case must be interior or exterior")
    source = resolve(args, config, "source")
    if source is None:
        raise UsageError("--source is required")
    subdiv = resolve(args, config, "subdiv", 2)
    if subdiv >= SUBDIV_LIMIT:
        raise UsageError(f"refusing subdivisions >= {SUBDIV_LIMIT}: "
                         "the dense operators would not fit in memory")
    if subdiv < 0:
        raise UsageError("--subdiv must be >= 0")
    mu = resolve(args, config, "mu", 1.0)
    if mu <= 0:
        raise UsageError("--mu must be positive")
    out = resolve(args, config, "out", f"solve_{case}.csv")
    threads = default_threads(args, config)
    table = verify.run_homogeneous_test(source, case, subdivisions=subdiv,
                                        mu=mu, threads=threads)
    prov = provenance("solve", {"case": case, "source": list(source),
                                "subdiv": subdiv, "mu": mu})
    print_table(table, write_table(table, out, prov))
    return EXIT_OK


def cmd_volume(args, config):
    source = resolve(args, config, "source")
    if source is None:
        raise UsageError("--source is required")
    subdiv = resolve(args, config, "subdiv", 2)
    if not 1 <= subdiv < SUBDIV_LIMIT:
        raise UsageError(f"--subdiv must be between 1 and {SUBDIV_LIMIT - 1}")
    grid = resolve(args, config, "grid", 40)
    if grid < 1:
        raise UsageError("--grid must be >= 1")
    box = resolve(args, config, "box", 1.1)
    mu = resolve(args, config, "mu", 1.0)
    if mu <= 0:
        raise UsageError("--mu must be positive")
    out = resolve(args, config, "out", "volume.csv")
    threads = default_threads(args, config)
    table = verify.run_nonhomogeneous_test(source, subdivisions=subdiv,
                                           grid_n=grid, box=box, mu=mu,
                                           threads=threads)
    prov = provenance("volume", {"source": list(source), "subdiv": subdiv,
                                 "grid": grid, "box": box, "mu": mu})
    print_table(table, write_table(table, out, prov))
    return EXIT_OK


def cmd_gradients(args, config):
    problem = resolve(args, config, "problem")
    if problem not in ("a", "b", "c"):
        raise UsageError("--problem must be one of a, b, c")
    subdiv = resolve(args, config, "subdiv", 2)
    if not 1 <= subdiv < SUBDIV_LIMIT:
        raise UsageError(f"--subdiv must be between 1 and {SUBDIV_LIMIT - 1}")
    grid = resolve(args, config, "grid", 40)
    box = resolve(args, config, "box", 1.1)
    mu = resolve(args, config, "mu", 1.0)
    if mu <= 0:
        raise UsageError("--mu must be positive")
    out = resolve(args, config, "out", f"gradients_{problem}.csv")
    threads = default_threads(args, config)
    table = verify.run_gradient_test(problem, subdivisions=subdiv, mu=mu,
                                     grid_n=grid, box=box, threads=threads)
    prov = provenance("gradients", {"problem": problem, "subdiv": subdiv,
                                    "grid": grid, "box": box, "mu": mu})
    print_table(table, write_table(table, out, prov))
    return EXIT_OK


def cmd_convergence(args, config):
    suite = resolve(args, config, "suite")
    if suite not in SUITE_LEVELS:
        raise UsageError("--suite must be homogeneous, volume, or gradients")
    levels = resolve(args, config, "subdivisions", SUITE_LEVELS[suite])
    if any(lv >= SUBDIV_LIMIT or lv < 1 for lv in levels):
        raise UsageError(f"subdivisions must be between 1 and {SUBDIV_LIMIT - 1}")
    grid = resolve(args, config, "grid", 40)
    box = resolve(args, config, "box", 1.1)
    mu = resolve(args, config, "mu", 1.0)
    if mu <= 0:
        raise UsageError("--mu must be positive")
    source = resolve(args, config, "source")
    problem = resolve(args, config, "problem", "a")
    case = resolve(args, config, "case", "interior")
    out = resolve(args, config, "out", f"convergence_{suite}.csv")
    threads = default_threads(args, config)

    tables = []
    for lv in levels:
        if suite == "homogeneous":
            src = source or (-2.0, 0.0, 0.0)
            tables.append(verify.run_homogeneous_test(src, case, subdivisions=lv,
                                                      mu=mu, threads=threads))
        elif suite == "volume":
            src = source or (2.0, 0.0, 0.0)
            tables.append(verify.run_nonhomogeneous_test(src, subdivisions=lv,
                                                         grid_n=grid, box=box,
                                                         mu=mu, threads=threads))
        else:
            tables.append(verify.run_gradient_test(problem, subdivisions=lv,
                                                   grid_n=grid, box=box, mu=mu,
                                                   threads=threads))

    prov = provenance("convergence", {"suite": suite, "subdivisions": list(levels),
                                      "grid": grid, "box": box, "mu": mu})
    header = ["elements", "field", "component", "error", "reference", "ratio", "decay"]
    lines = [f"# {k} = {json.dumps(v, sort_keys=True, default=float)}" for k, v in prov.items()]
    lines.append(",".join(header))
    json_rows = []
    for i, table in enumerate(tables):
        prev = tables[i - 1].to_dicts() if i else None
        for j, r in enumerate(table.to_dicts()):
            decay = None if prev is None or r["error"] == 0 else prev[j]["error"] / r["error"]
            row = {"elements": table.metadata["elements"], **r, "decay": decay}
            json_rows.append(row)
            lines.append(",".join(_fmt(row[k]) for k in header))
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    stem = os.path.splitext(out)[0]
    with open(stem + ".json", "w", encoding="utf-8") as fh:
        json.dump({"provenance": prov, "rows": json_rows}, fh, indent=2,
                  sort_keys=True, default=float)
        fh.write("\n")
    _convergence_figure(tables, stem + ".png")

    decays = [r["decay"] for r in json_rows if r["decay"] is not None]
    if decays:
        print(f"decay factors: min {min(decays):.2f} median "
              f"{sorted(decays)[len(decays) // 2]:.2f}")
    print(f"wrote {out} {stem}.json {stem}.png")
    return EXIT_OK


def _convergence_figure(tables, path):
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    labels = [f"{r['field']}.{r['component']}" for r in tables[0].to_dicts()]
    counts = [t.metadata["elements"] for t in tables]
    series = np.array([[r["error"] for r in t.to_dicts()] for t in tables])
    for j, lab in enumerate(labels):
        ax.loglog(counts, series[:, j], "o-", label=lab)
    ax.set_xlabel("elements")
    ax.set_ylabel("mean-square nodal error")
    ax.set_title("refinement sweep")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": "stokesbie"})
    plt.close(fig)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stokesbie",
        description="Boundary-element benchmarks for forced Stokes flow on the unit sphere")
    parser.add_argument("--config", help="plain key = value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the kernel identity suites")
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("solve", help="mixed point-force benchmark solve")
    p.add_argument("--case", choices=("interior", "exterior"))
    p.add_argument("--source", type=parse_point)
    p.add_argument("--subdiv", type=int)
    p.add_argument("--mu", type=float)
    p.add_argument("--out")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("volume", help="volume-forced benchmark solve")
    p.add_argument("--source", type=parse_point)
    p.add_argument("--subdiv", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--box", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--out")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("gradients", help="boundary velocity-gradient recovery")
    p.add_argument("--problem", choices=("a", "b", "c"))
    p.add_argument("--subdiv", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--box", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--out")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("convergence", help="refinement sweep over a suite")
    p.add_argument("--suite", choices=tuple(SUITE_LEVELS))
    p.add_argument("--subdivisions", type=parse_levels)
    p.add_argument("--grid", type=int)
    p.add_argument("--box", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--source", type=parse_point)
    p.add_argument("--problem", choices=("a", "b", "c"))
    p.add_argument("--case", choices=("interior", "exterior"))
    p.add_argument("--out")
    p.add_argument("--threads", type=int)

    # argparse only treats plain numbers as values after options, so a point
    # like -2,0,0 would be read as a flag; widen the matcher everywhere.
    point_like = re.compile(r"^-\d[\d.,eE+-]*$")
    parser._negative_number_matcher = point_like
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            sp._negative_number_matcher = point_like
    return parser


COMMANDS = {"verify": cmd_verify, "solve": cmd_solve, "volume": cmd_volume,
            "gradients": cmd_gradients, "convergence": cmd_convergence}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = load_config(args.config) if args.config else {}
        return COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, QuadratureError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
