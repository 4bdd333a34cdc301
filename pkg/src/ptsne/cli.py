"""Batch command line: run, refine, eval, generate, plot.

Exit codes: 0 on success, 2 for configuration or input-format problems,
3 for numerical aborts (failed calibration, diverged embedding, worker
failure).  All CSV and SVG outputs are byte-deterministic functions of
the command line and input files.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .affinity import build_neighbor_index, load_index, save_index
from .core import (
    DataSet,
    fmt_float,
    load_dataset,
    make_hierarchical_gaussians,
    make_sierpinski,
    write_dataset_csv,
)
from .engine import EmbeddingLayers, RunConfig, refine, run_ptsne
from .errors import ConfigError, DataFormatError, NumericalError
from .quality import KnpCurve, auc, knp_curve, rank_matrix
from .svg import label_colors, rank_colors, scatter_svg


# ---------------------------------------------------------------------------
# file writers / readers
# ---------------------------------------------------------------------------

def write_embedding_csv(path, positions: np.ndarray) -> None:
    """id,layer,x,y rows; layers are 1-based, ids are row numbers."""
    layers, n, _ = positions.shape
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,layer,x,y\n")
        for li in range(layers):
            for i in range(n):
                fh.write(
                    f"{i},{li + 1},{fmt_float(positions[li, i, 0])},"
                    f"{fmt_float(positions[li, i, 1])}\n"
                )


def read_embedding_csv(path) -> np.ndarray:
    """Read embedding.csv back into a (layers, n, 2) array."""
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != "id,layer,x,y":
                raise DataFormatError(
                    f"{path}: expected header 'id,layer,x,y', got {header!r}"
                )
            rows = []
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != 4:
                    raise DataFormatError(f"{path}: malformed row {line!r}")
                rows.append(
                    (int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3]))
                )
    except OSError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    n = max(r[0] for r in rows) + 1
    layers = max(r[1] for r in rows)
    out = np.full((layers, n, 2), np.nan)
    for i, li, x, y in rows:
        if not (0 <= i < n and 1 <= li <= layers):
            raise DataFormatError(f"{path}: id/layer out of range in row")
        out[li - 1, i, 0] = x
        out[li - 1, i, 1] = y
    if np.any(np.isnan(out)):
        raise DataFormatError(f"{path}: missing (id, layer) rows")
    return out


def write_cost_csv(path, costs: np.ndarray) -> None:
    """epoch,thread,pseudo_normalized_cost; epoch 0 is the initial state."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,thread,pseudo_normalized_cost\n")
        for e in range(costs.shape[0]):
            for t in range(costs.shape[1]):
                fh.write(f"{e},{t},{fmt_float(costs[e, t])}\n")


def write_knp_csv(path, curve: KnpCurve) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("k,preservation\n")
        for k, p in zip(curve.ks, curve.preservation):
            fh.write(f"{k},{fmt_float(p)}\n")


def _meta_value(v) -> str:
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, float):
        return fmt_float(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return ",".join(fmt_float(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def write_run_meta(path, meta: dict) -> None:
    """key=value lines in insertion order; floats in round-trip form."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for key, value in meta.items():
            fh.write(f"{key}={_meta_value(value)}\n")


def parse_run_meta(path) -> dict:
    """Read a run_meta file back into an ordered str -> str mapping."""
    meta = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, value = line.partition("=")
            meta[key] = value
    return meta


def config_from_meta(meta: dict) -> RunConfig:
    """Reconstruct the run configuration recorded in a run_meta file."""
    return RunConfig(
        ppx=float(meta["ppx"]),
        threads=int(meta["threads"]),
        layers=int(meta["layers"]),
        theta=float(meta["theta"]),
        epochs=int(meta["epochs"]),
        iters=int(meta["iters"]),
        seed=int(meta["seed"]),
        use_momentum=meta["momentum"] == "True",
    )


def read_csv_column(path, name: str) -> list[str]:
    """One named column of a CSV as raw strings (labels allowed)."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = [c.strip() for c in fh.readline().strip().split(",")]
        if name not in header:
            raise ConfigError(
                f"{path}: no column named {name!r} (have {header})"
            )
        col = header.index(name)
        values = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(header):
                raise DataFormatError(f"{path}: ragged row {line!r}")
            values.append(parts[col])
    return values


# ---------------------------------------------------------------------------
# shared plotting logic
# ---------------------------------------------------------------------------

def _fills_for(args, y: np.ndarray):
    mode = args.color_by
    if mode == "none":
        return None
    if mode == "pairwise-distance-rank":
        return rank_colors(y, args.ref_point)
    if mode == "label-column":
        if not args.label_column:
            raise ConfigError("--color-by label-column needs --label-column")
        if not getattr(args, "input", None):
            raise ConfigError("--color-by label-column needs --input")
        labels = read_csv_column(args.input, args.label_column)
        if len(labels) != y.shape[0]:
            raise ConfigError(
                f"label column has {len(labels)} rows, embedding has {y.shape[0]}"
            )
        return label_colors(labels)
    raise ConfigError(f"unknown color mode {mode!r}")


def _write_scatter(args, y: np.ndarray, out_path) -> None:
    svg = scatter_svg(y, _fills_for(args, y), point_size=args.point_size)
    Path(out_path).write_text(svg, encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _resolve_index(data: DataSet, cfg: RunConfig, cache_path):
    """Load the neighbor index cache if present, else build and save it."""
    if cache_path is None:
        return None
    cache = Path(cache_path)
    if cache.exists():
        index = load_index(cache, cfg.ppx)
        if index.n != data.n:
            raise ConfigError(
                f"{cache}: cache holds {index.n} points, data has {data.n}"
            )
        return index
    index = build_neighbor_index(data, cfg.ppx, cfg.tol, cfg.max_iter)
    save_index(index, cache)
    return index


def _write_run_outputs(
    args, data: DataSet, result: EmbeddingLayers, outdir: Path
) -> None:
    curve = knp_curve(data, result.canonical)
    lin = auc(curve, "linear")
    lg = auc(curve, "log")

    write_embedding_csv(outdir / "embedding.csv", result.positions)
    write_cost_csv(outdir / "cost.csv", result.costs)
    write_knp_csv(outdir / "knp.csv", curve)
    meta = dict(result.meta)
    meta["z_estimated_cost"] = result.z_estimated
    meta["final_cost"] = float(result.global_costs[-1])
    meta["epoch_seconds"] = result.epoch_seconds
    meta["pooling_seconds"] = result.pooling_seconds
    meta["linAUC"] = f"{lin:.6f}"
    meta["logAUC"] = f"{lg:.6f}"
    write_run_meta(outdir / "run_meta", meta)
    _write_scatter(args, result.canonical, outdir / "scatter.svg")
    if result.debug_trace is not None:
        t = args.debug_thread
        with (outdir / f"debug_thread_{t}.csv").open(
            "w", encoding="utf-8", newline="\n"
        ) as fh:
            fh.write("iteration,cost,diameter,mean_gain\n")
            for it, row in enumerate(result.debug_trace):
                fh.write(
                    f"{it},{fmt_float(row[0])},{fmt_float(row[1])},"
                    f"{fmt_float(row[2])}\n"
                )
    print(
        f"n={data.n} layers={result.layers} epochs={meta['epochs']} "
        f"final_cost={meta['final_cost']:.6f} "
        f"linAUC={meta['linAUC']} logAUC={meta['logAUC']}"
    )


def cmd_run(args) -> int:
    data = load_dataset(args.input)
    cfg = RunConfig(
        ppx=args.ppx,
        threads=args.threads,
        layers=args.layers,
        theta=args.theta,
        epochs=args.epochs,
        iters=args.iters,
        seed=args.seed,
        use_momentum=not args.no_momentum,
    )
    cfg.validate(data.n)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    index = _resolve_index(data, cfg, args.cache_index)
    result = run_ptsne(
        data, cfg, index=index, debug_thread=args.debug_thread
    )
    _write_run_outputs(args, data, result, outdir)
    return 0


def cmd_refine(args) -> int:
    data = load_dataset(args.input)
    layers = read_embedding_csv(args.embedding)
    if data.n != layers.shape[1]:
        raise ConfigError(
            f"embedding has {layers.shape[1]} points, data has {data.n}"
        )
    cfg = RunConfig(ppx=args.ppx)  # reuse validation ranges for the knob
    cfg.validate(data.n)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    index = _resolve_index(data, cfg, args.cache_index)
    result = refine(
        data,
        layers[0],
        args.ppx,
        args.extra_iters,
        theta=args.theta,
        use_momentum=not args.no_momentum,
        index=index,
    )
    _write_run_outputs(args, data, result, outdir)
    return 0


def cmd_eval(args) -> int:
    data = load_dataset(args.input)
    layers = read_embedding_csv(args.embedding)
    if data.n != layers.shape[1]:
        raise ConfigError(
            f"embedding has {layers.shape[1]} points, data has {data.n}"
        )
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    hd_ranks = rank_matrix(data.sq_distance_matrix())
    which = range(layers.shape[0]) if args.all_layers else [0]
    lines = []
    for li in which:
        curve = knp_curve(data, layers[li], hd_ranks=hd_ranks)
        lin = auc(curve, "linear")
        lg = auc(curve, "log")
        name = "knp.csv" if li == 0 else f"knp_layer{li + 1}.csv"
        write_knp_csv(outdir / name, curve)
        lines.append(f"layer={li + 1} linAUC={lin:.6f} logAUC={lg:.6f}")
    (outdir / "eval_meta").write_text(
        "".join(line + "\n" for line in lines), encoding="utf-8", newline="\n"
    )
    for line in lines:
        print(line)
    return 0


def cmd_generate(args) -> int:
    if args.kind == "sierpinski":
        ds = make_sierpinski(args.depth)
        write_dataset_csv(ds, args.out)
        print(f"wrote {ds.n} points ({ds.m} features) to {args.out}")
        return 0
    if args.kind == "gaussians":
        ds = make_hierarchical_gaussians(
            args.levels,
            args.clusters,
            args.points,
            separation=args.separation,
            dim=args.dim,
            seed=args.seed,
        )
        write_dataset_csv(ds, args.out)
        if args.labels_out:
            per_leaf = args.points
            with Path(args.labels_out).open(
                "w", encoding="utf-8", newline="\n"
            ) as fh:
                fh.write("label\n")
                for i in range(ds.n):
                    fh.write(f"leaf{i // per_leaf}\n")
        print(f"wrote {ds.n} points ({ds.m} features) to {args.out}")
        return 0
    raise ConfigError(f"unknown synthetic kind {args.kind!r}")


def cmd_plot(args) -> int:
    layers = read_embedding_csv(args.embedding)
    if not 1 <= args.layer <= layers.shape[0]:
        raise ConfigError(
            f"layer {args.layer} out of range (embedding has {layers.shape[0]})"
        )
    _write_scatter(args, layers[args.layer - 1], args.out)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_plot_options(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--color-by",
        choices=["none", "pairwise-distance-rank", "label-column"],
        default="none",
        help="point fill: flat, by distance rank from --ref-point, or by a label column of --input",
    )
    p.add_argument("--ref-point", type=int, default=0,
                   help="reference point id for pairwise-distance-rank")
    p.add_argument("--label-column", default=None,
                   help="column name in --input used for label-column coloring")
    p.add_argument("--point-size", type=float, default=2.0,
                   help="circle radius in pixels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ptsne",
        description="Epoch-parallel Barnes-Hut t-SNE with one perplexity knob",
    )
    sub = parser.add_subparsers(dest="command")

    p_run = sub.add_parser("run", help="embed a dataset and write all outputs")
    p_run.add_argument("--input", required=True, help="CSV or MatrixMarket file")
    p_run.add_argument("--outdir", required=True)
    p_run.add_argument("--ppx", type=float, required=True,
                       help="perplexity, the one required knob (> 1)")
    p_run.add_argument("--threads", type=int, default=1)
    p_run.add_argument("--layers", type=int, default=1)
    p_run.add_argument("--theta", type=float, default=0.5,
                       help="Barnes-Hut opening angle in [0, 1]; 0 is exact")
    p_run.add_argument("--epochs", type=int, default=None)
    p_run.add_argument("--iters", type=int, default=None)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--no-momentum", action="store_true")
    p_run.add_argument("--cache-index", default=None,
                       help="neighbor index cache path (loaded if present)")
    p_run.add_argument("--debug-thread", type=int, default=None,
                       help="write per-iteration diagnostics for one thread")
    _add_plot_options(p_run)
    p_run.set_defaults(func=cmd_run)

    p_ref = sub.add_parser("refine", help="full-data polish of an embedding")
    p_ref.add_argument("--input", required=True)
    p_ref.add_argument("--embedding", required=True, help="embedding.csv to start from")
    p_ref.add_argument("--outdir", required=True)
    p_ref.add_argument("--ppx", type=float, required=True,
                       help="low perplexity for the polish phase")
    p_ref.add_argument("--extra-iters", type=int, required=True)
    p_ref.add_argument("--theta", type=float, default=0.5)
    p_ref.add_argument("--no-momentum", action="store_true")
    p_ref.add_argument("--cache-index", default=None)
    _add_plot_options(p_ref)
    p_ref.set_defaults(func=cmd_refine)

    p_eval = sub.add_parser("eval", help="score an embedding against its data")
    p_eval.add_argument("--input", required=True)
    p_eval.add_argument("--embedding", required=True)
    p_eval.add_argument("--outdir", required=True)
    p_eval.add_argument("--all-layers", action="store_true",
                        help="score every layer, not just layer 1")
    p_eval.set_defaults(func=cmd_eval)

    p_gen = sub.add_parser("generate", help="write a synthetic dataset CSV")
    gen_sub = p_gen.add_subparsers(dest="kind")
    p_sier = gen_sub.add_parser("sierpinski", help="triangle graph, hop-distance features")
    p_sier.add_argument("--depth", type=int, required=True)
    p_sier.add_argument("--out", required=True)
    p_gauss = gen_sub.add_parser("gaussians", help="nested gaussian clusters")
    p_gauss.add_argument("--levels", type=int, required=True)
    p_gauss.add_argument("--clusters", type=int, required=True)
    p_gauss.add_argument("--points", type=int, required=True,
                         help="points per leaf cluster")
    p_gauss.add_argument("--separation", type=float, default=10.0)
    p_gauss.add_argument("--dim", type=int, default=8)
    p_gauss.add_argument("--seed", type=int, default=0)
    p_gauss.add_argument("--out", required=True)
    p_gauss.add_argument("--labels-out", default=None,
                         help="also write the leaf label of each point")
    p_gen.set_defaults(func=cmd_generate)

    p_plot = sub.add_parser("plot", help="render an embedding as SVG")
    p_plot.add_argument("--embedding", required=True)
    p_plot.add_argument("--out", required=True)
    p_plot.add_argument("--input", default=None,
                        help="dataset CSV, needed for label-column coloring")
    p_plot.add_argument("--layer", type=int, default=1)
    _add_plot_options(p_plot)
    p_plot.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    if getattr(args, "command", None) is None:
        parser.print_help(file=sys.stderr)
        return 2
    if args.command == "generate" and getattr(args, "kind", None) is None:
        print("error: generate needs a kind (sierpinski or gaussians)",
              file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())
