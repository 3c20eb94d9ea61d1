"""Command-line surface: fit / select / cluster / simulate / verify.

File formats: data is UTF-8 comma-separated CSV, one point per row, with an
optional header row of column names.  The block-structure config is a TOML
or JSON document listing, per block and in chain order, the raw columns
(names or 0-based indices) and the state count.  Models, reports, and modes
are JSON.  Exit codes: 0 success, 2 configuration or validation error,
3 numerical failure, 4 size guard exceeded.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .exceptions import EnumerationSizeError, ModelValidationError, NumericalError
from .inference import forward_backward, log_density, viterbi
from .modal import ModeSearchConfig, cluster, mbw_step, modal_em_step_gmm
from .model import (
    BlockStructure,
    Dataset,
    deserialize_model,
    load_model_document,
    serialize_model,
)
from .oracle import DEFAULT_COMPONENT_LIMIT, enumerate_mapped_gmm, posterior_over_sequences
from .simulate import REGIMES, SimSpec, generate
from .training import FitConfig, baum_welch_fit, select_model

__all__ = ["RunConfig", "entry_point", "main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_GUARD = 4


@dataclass
class RunConfig:
    """Everything a command needs, resolved from flags."""

    out_dir: str
    data_path: str | None = None
    blocks_path: str | None = None
    model_path: str | None = None
    grid_path: str | None = None
    seed: int = 0
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    standardize: bool = False
    has_header: bool = True
    max_iterations: int = 500
    tolerance: float = 1e-6
    covariance_ridge: float | None = None
    init_scheme: str = "kmeans-full"
    subset_fraction: float = 0.1
    covariance_shrinkage: float = 0.5
    restarts: int = 5
    prefer_simplest: bool = False
    mode_max_iterations: int = 1000
    movement_tolerance: float = 1e-8
    merge_tolerance: float = 1e-3
    start_mode: str = "viterbi-means"
    regime: str | None = None
    n: int = 0
    limit: int = DEFAULT_COMPONENT_LIMIT

    def fit_config(self) -> FitConfig:
        return FitConfig(
            max_iterations=self.max_iterations,
            rel_loglik_tolerance=self.tolerance,
            covariance_ridge=self.covariance_ridge,
            init_scheme=self.init_scheme,
            subset_fraction=self.subset_fraction,
            covariance_shrinkage=self.covariance_shrinkage,
            restarts=self.restarts,
            rng_seed=self.seed,
        )

    def mode_config(self) -> ModeSearchConfig:
        return ModeSearchConfig(
            max_iterations=self.mode_max_iterations,
            movement_tolerance=self.movement_tolerance,
            merge_tolerance=self.merge_tolerance,
            start_mode=self.start_mode,
        )


def _require_file(path: str | None, what: str) -> str:
    if path is None:
        raise ModelValidationError(f"missing required {what} path")
    if not os.path.isfile(path):
        raise ModelValidationError(f"{what} file not found: {path}")
    return path


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_data_csv(path: str, has_header: bool = True) -> tuple[list[str] | None, np.ndarray]:
    """Load a data CSV; returns (column names or None, float array (n, d))."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]
    if not rows:
        raise ModelValidationError(f"data file is empty: {path}")
    names = None
    if has_header:
        names = [c.strip() for c in rows[0]]
        rows = rows[1:]
        if not rows:
            raise ModelValidationError(f"data file has a header but no rows: {path}")
    try:
        data = np.array([[float(v) for v in row] for row in rows])
    except ValueError as exc:
        raise ModelValidationError(f"data file {path} has a non-numeric entry: {exc}") from None
    widths = {len(row) for row in rows}
    if len(widths) != 1:
        raise ModelValidationError(f"data file {path} has rows of differing lengths")
    return names, data


def _load_structured_doc(path: str) -> dict | list:
    if path.endswith(".toml"):
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelValidationError(f"{path} is not valid JSON: {exc}") from None


def read_block_config(path: str, column_names: list[str] | None, dimension: int) -> BlockStructure:
    """Parse the block-structure config; file order defines the chain order.

    Each block entry carries ``columns`` (data column names or 0-based
    indices) and ``states``.  Every data column must be used exactly once.
    """
    doc = _load_structured_doc(path)
    if isinstance(doc, dict):
        entries = doc.get("blocks") or doc.get("block")
    else:
        entries = doc
    if not isinstance(entries, list) or not entries:
        raise ModelValidationError(f"{path} must define a non-empty list of blocks")

    layout_columns: list[int] = []
    block_dims: list[int] = []
    state_counts: list[int] = []
    for b, entry in enumerate(entries):
        if not isinstance(entry, dict) or "columns" not in entry or "states" not in entry:
            raise ModelValidationError(
                f"block {b} in {path} must be an object with 'columns' and 'states'"
            )
        cols = entry["columns"]
        if not isinstance(cols, list) or not cols:
            raise ModelValidationError(f"block {b} in {path} has an empty 'columns' list")
        indices = []
        for c in cols:
            if isinstance(c, bool):
                raise ModelValidationError(f"block {b} in {path}: invalid column {c!r}")
            if isinstance(c, int):
                if not (0 <= c < dimension):
                    raise ModelValidationError(
                        f"block {b} in {path}: column index {c} out of range 0..{dimension - 1}"
                    )
                indices.append(c)
            elif isinstance(c, str):
                if column_names is None:
                    raise ModelValidationError(
                        f"block {b} in {path} names column {c!r} but the data has no header"
                    )
                if c not in column_names:
                    raise ModelValidationError(
                        f"block {b} in {path} names unknown column {c!r}"
                    )
                indices.append(column_names.index(c))
            else:
                raise ModelValidationError(f"block {b} in {path}: invalid column {c!r}")
        layout_columns.extend(indices)
        block_dims.append(len(indices))
        state_counts.append(int(entry["states"]))

    if sorted(layout_columns) != list(range(dimension)):
        raise ModelValidationError(
            f"{path} must use every data column exactly once "
            f"(data has {dimension} columns, config uses {sorted(layout_columns)})"
        )
    permutation = [0] * dimension
    for position, raw in enumerate(layout_columns):
        permutation[raw] = position
    return BlockStructure(tuple(block_dims), tuple(state_counts), tuple(permutation))


def _read_grid(path: str, num_blocks: int) -> list[tuple[int, ...]]:
    doc = _load_structured_doc(path)
    if isinstance(doc, dict):
        doc = doc.get("grid")
    if not isinstance(doc, list) or not doc:
        raise ModelValidationError(f"{path} must define a non-empty grid of state-count lists")
    grid = []
    for cell in doc:
        if not isinstance(cell, list) or len(cell) != num_blocks:
            raise ModelValidationError(
                f"grid entry {cell!r} must list one state count per block ({num_blocks})"
            )
        grid.append(tuple(int(v) for v in cell))
    return grid


def _standardization_arrays(points: np.ndarray) -> dict:
    mean = points.mean(axis=0)
    scale = points.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return {"mean": mean, "scale": scale}


def _apply_standardization(points: np.ndarray, transform: dict) -> np.ndarray:
    return (points - np.asarray(transform["mean"])) / np.asarray(transform["scale"])


def _prepare_training_data(config: RunConfig) -> tuple[Dataset, BlockStructure, dict | None]:
    data_path = _require_file(config.data_path, "data")
    blocks_path = _require_file(config.blocks_path, "block config")
    names, points = read_data_csv(data_path, config.has_header)
    structure = read_block_config(blocks_path, names, points.shape[1])
    transform = None
    if config.standardize:
        transform = _standardization_arrays(points)
        points = _apply_standardization(points, transform)
    return Dataset(points), structure, transform


def cmd_fit(config: RunConfig) -> int:
    """Fit one model; writes model.json, fit_report.json, loglik_trace.csv."""
    dataset, structure, transform = _prepare_training_data(config)
    model, report = baum_welch_fit(
        dataset, structure, config.fit_config(), n_jobs=config.threads
    )
    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "model.json"), "w", encoding="utf-8") as fh:
        fh.write(serialize_model(model, standardization=transform))
    with open(os.path.join(config.out_dir, "fit_report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.as_json_dict(), fh, indent=2)
    _write_csv(
        os.path.join(config.out_dir, "loglik_trace.csv"),
        ["iteration", "log_likelihood"],
        list(enumerate(report.log_likelihood_trace)),
    )
    print(
        f"fit: log_likelihood={report.final_log_likelihood:.6f} bic={report.bic:.6f} "
        f"iterations={report.iterations} converged={report.converged}"
    )
    return EXIT_OK


def cmd_select(config: RunConfig) -> int:
    """Sweep a state-count grid; writes selection.csv and best_model.json."""
    dataset, structure, transform = _prepare_training_data(config)
    grid_path = _require_file(config.grid_path, "grid")
    grid = _read_grid(grid_path, structure.num_blocks)
    best_model, cells = select_model(
        dataset,
        structure,
        grid,
        config.fit_config(),
        prefer_simplest=config.prefer_simplest,
        mode_config=config.mode_config(),
        n_jobs=config.threads,
    )
    os.makedirs(config.out_dir, exist_ok=True)
    rows = []
    for cell in cells:
        rows.append(
            [
                "x".join(str(v) for v in cell.state_counts),
                "" if cell.bic is None else _fmt(cell.bic),
                "" if cell.log_likelihood is None else _fmt(cell.log_likelihood),
                "" if cell.num_parameters is None else cell.num_parameters,
                ""
                if cell.nonempty_components is None
                else "x".join(str(v) for v in cell.nonempty_components),
                ""
                if cell.nonempty_components is None
                else sum(cell.nonempty_components),
                "" if cell.cluster_count is None else cell.cluster_count,
                "" if cell.converged is None else cell.converged,
                cell.error or "",
            ]
        )
    _write_csv(
        os.path.join(config.out_dir, "selection.csv"),
        [
            "state_counts",
            "bic",
            "log_likelihood",
            "num_parameters",
            "nonempty_components",
            "total_nonempty_components",
            "cluster_count",
            "converged",
            "error",
        ],
        rows,
    )
    if best_model is None:
        print("select: every grid cell failed", file=sys.stderr)
        return EXIT_NUMERICAL
    with open(os.path.join(config.out_dir, "best_model.json"), "w", encoding="utf-8") as fh:
        fh.write(serialize_model(best_model, standardization=transform))
    ok = sum(1 for c in cells if c.bic is not None)
    print(f"select: {ok}/{len(cells)} cells fitted; best state_counts="
          f"{'x'.join(str(v) for v in best_model.structure.state_counts)}")
    return EXIT_OK


def cmd_cluster(config: RunConfig) -> int:
    """Cluster a dataset under a fitted model; writes labels.csv, modes.json,
    summary.json.  Modes are reported in raw units when the model stores a
    standardization transform."""
    model_path = _require_file(config.model_path, "model")
    data_path = _require_file(config.data_path, "data")
    with open(model_path, "r", encoding="utf-8") as fh:
        model, transform = load_model_document(fh.read())
    _, points = read_data_csv(data_path, config.has_header)
    if transform is not None:
        points = _apply_standardization(points, transform)
    dataset = Dataset(points)
    result = cluster(model, dataset, config.mode_config())

    def to_raw_units(arr: np.ndarray) -> np.ndarray:
        if transform is None or arr.size == 0:
            return arr
        return arr * transform["scale"] + transform["mean"]

    os.makedirs(config.out_dir, exist_ok=True)
    T = model.num_blocks
    header = ["index", "cluster", "mode_index"] + [f"seq_{t}" for t in range(T)]
    rows = [
        [i, int(result.labels[i]), int(result.mode_indices[i])]
        + [int(s) for s in result.sequences[i]]
        for i in range(dataset.num_points)
    ]
    _write_csv(os.path.join(config.out_dir, "labels.csv"), header, rows)

    modes_doc = result.as_json_dict()
    modes_doc["cluster_modes"] = to_raw_units(result.cluster_modes).tolist()
    modes_doc["modes"] = to_raw_units(result.modes).tolist()
    with open(os.path.join(config.out_dir, "modes.json"), "w", encoding="utf-8") as fh:
        json.dump(modes_doc, fh, indent=2)

    summary = {
        "num_points": dataset.num_points,
        "num_clusters": result.num_clusters,
        "cluster_sizes": result.cluster_sizes.tolist(),
        "start_mode_used": result.start_mode_used,
        "num_mode_searches": result.num_mode_searches,
        "unconverged_modes": int((~result.mode_converged).sum()),
    }
    with open(os.path.join(config.out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    print(f"cluster: {result.num_clusters} clusters, sizes={result.cluster_sizes.tolist()}")
    return EXIT_OK


def cmd_simulate(config: RunConfig) -> int:
    """Generate a synthetic sample; writes data.csv and labels.csv."""
    if config.regime is None:
        raise ModelValidationError(f"missing --regime (one of {REGIMES})")
    spec = SimSpec(regime=config.regime, n=config.n, rng_seed=config.seed)
    sample = generate(spec)
    os.makedirs(config.out_dir, exist_ok=True)
    d = sample.dataset.dimension
    _write_csv(
        os.path.join(config.out_dir, "data.csv"),
        [f"x{j}" for j in range(d)],
        sample.dataset.points,
    )
    B = sample.component_labels.shape[1]
    _write_csv(
        os.path.join(config.out_dir, "labels.csv"),
        ["index", "target_label"] + [f"component_{b}" for b in range(B)],
        [
            [i, int(sample.target_labels[i])] + [int(v) for v in sample.component_labels[i]]
            for i in range(sample.dataset.num_points)
        ],
    )
    print(
        f"simulate: regime={config.regime} n={config.n} seed={config.seed} "
        f"target_points={int(sample.target_mask.sum())}"
    )
    return EXIT_OK


def cmd_verify(config: RunConfig) -> int:
    """Cross-check a model against exhaustive state-sequence enumeration."""
    model_path = _require_file(config.model_path, "model")
    with open(model_path, "r", encoding="utf-8") as fh:
        model = deserialize_model(fh.read())
    mapped = enumerate_mapped_gmm(model, limit=config.limit)

    rng = np.random.default_rng(config.seed)
    num_probes = 100
    comps = rng.choice(
        mapped.num_components, size=num_probes, p=mapped.mixture.weights
    )
    z = rng.standard_normal((num_probes, model.dimension))
    points = mapped.mixture.means[comps] + np.einsum(
        "nij,nj->ni", mapped.mixture.cholesky_factors[comps], z
    )

    density_dev = float(
        np.abs(log_density(model, points) - mapped.mixture.log_density(points)).max()
    )

    tables = forward_backward(model, points)
    post = posterior_over_sequences(mapped, points)
    state_dev = max(
        float(np.abs(tables.state_marginals[t] - mapped.state_marginals(post, t)).max())
        for t in range(model.num_blocks)
    )
    pair_dev = 0.0
    for t in range(model.num_blocks - 1):
        pair_dev = max(
            pair_dev,
            float(np.abs(tables.transition_marginals[t] - mapped.pair_marginals(post, t)).max()),
        )

    with np.errstate(divide="ignore"):
        seq_scores = mapped.mixture.component_log_densities(points) + np.log(
            mapped.mixture.weights
        )
    decoded = viterbi(model, points)
    radix = np.ones(model.num_blocks, dtype=np.intp)
    for t in range(model.num_blocks - 2, -1, -1):
        radix[t] = radix[t + 1] * model.structure.state_counts[t + 1]
    decoded_idx = decoded @ radix
    viterbi_dev = float(
        (seq_scores.max(axis=1) - seq_scores[np.arange(num_probes), decoded_idx]).max()
    )

    step_dev = 0.0
    for x in points[:20]:
        a = mbw_step(model, x)
        b = modal_em_step_gmm(mapped.mixture, x)
        step_dev = max(step_dev, float(np.abs(a - b).max()))

    report = {
        "num_components": mapped.num_components,
        "num_probes": num_probes,
        "max_log_density_deviation": density_dev,
        "max_state_marginal_deviation": state_dev,
        "max_pair_marginal_deviation": pair_dev,
        "max_viterbi_logprob_deviation": viterbi_dev,
        "max_mode_step_deviation": step_dev,
    }
    for key, value in report.items():
        print(f"{key}: {value}")
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        with open(os.path.join(config.out_dir, "verify.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hmmvb",
        description="Chain-structured Gaussian mixtures over variable blocks: "
        "fitting, model selection, and modal clustering.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0, help="RNG seed")
        p.add_argument(
            "--threads", type=int, default=os.cpu_count() or 1, help="worker thread count"
        )

    def add_data(p: argparse.ArgumentParser) -> None:
        p.add_argument("--data", required=True, help="input data CSV")
        p.add_argument(
            "--no-header",
            action="store_true",
            help="data CSV has no header row of column names",
        )

    def add_fit_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--blocks", required=True, help="block-structure config (TOML or JSON)")
        p.add_argument("--standardize", action="store_true", help="center and scale columns")
        p.add_argument("--restarts", type=int, default=5)
        p.add_argument("--max-iterations", type=int, default=500)
        p.add_argument("--tolerance", type=float, default=1e-6)
        p.add_argument("--ridge", type=float, default=None, help="covariance ridge epsilon")
        p.add_argument(
            "--init-scheme",
            default="kmeans-full",
            choices=["kmeans-full", "kmeans-subset", "random-centroids"],
        )
        p.add_argument("--subset-fraction", type=float, default=0.1)
        p.add_argument("--shrinkage", type=float, default=0.5)

    def add_mode_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument(
            "--start-mode", default="viterbi-means", choices=["viterbi-means", "data-points"]
        )
        p.add_argument("--merge-tol", type=float, default=1e-3)
        p.add_argument("--mode-max-iterations", type=int, default=1000)
        p.add_argument("--movement-tol", type=float, default=1e-8)

    p_fit = sub.add_parser("fit", help="fit a model to data")
    add_data(p_fit)
    add_fit_flags(p_fit)
    add_common(p_fit)

    p_select = sub.add_parser("select", help="sweep state-count grids and pick by BIC")
    add_data(p_select)
    add_fit_flags(p_select)
    add_mode_flags(p_select)
    p_select.add_argument("--grid", required=True, help="grid file (TOML or JSON)")
    p_select.add_argument(
        "--prefer-simplest",
        action="store_true",
        help="among cells with the winner's cluster count, pick fewest parameters",
    )
    add_common(p_select)

    p_cluster = sub.add_parser("cluster", help="modal-cluster data under a fitted model")
    add_data(p_cluster)
    p_cluster.add_argument("--model", required=True, help="model JSON from fit/select")
    add_mode_flags(p_cluster)
    add_common(p_cluster)

    p_sim = sub.add_parser("simulate", help="generate a synthetic benchmark sample")
    p_sim.add_argument("--regime", required=True, choices=list(REGIMES))
    p_sim.add_argument("--n", type=int, required=True)
    add_common(p_sim)

    p_verify = sub.add_parser("verify", help="cross-check a model against enumeration")
    p_verify.add_argument("--model", required=True, help="model JSON")
    p_verify.add_argument(
        "--limit", type=int, default=DEFAULT_COMPONENT_LIMIT, help="component-count guard"
    )
    add_common(p_verify)

    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    config = RunConfig(out_dir=args.out, seed=args.seed, threads=args.threads)
    if hasattr(args, "data"):
        config.data_path = args.data
        config.has_header = not args.no_header
    if hasattr(args, "blocks"):
        config.blocks_path = args.blocks
        config.standardize = args.standardize
        config.restarts = args.restarts
        config.max_iterations = args.max_iterations
        config.tolerance = args.tolerance
        config.covariance_ridge = args.ridge
        config.init_scheme = args.init_scheme
        config.subset_fraction = args.subset_fraction
        config.covariance_shrinkage = args.shrinkage
    if hasattr(args, "start_mode"):
        config.start_mode = args.start_mode
        config.merge_tolerance = args.merge_tol
        config.mode_max_iterations = args.mode_max_iterations
        config.movement_tolerance = args.movement_tol
    if hasattr(args, "model"):
        config.model_path = args.model
    if hasattr(args, "grid"):
        config.grid_path = args.grid
        config.prefer_simplest = args.prefer_simplest
    if hasattr(args, "regime"):
        config.regime = args.regime
        config.n = args.n
    if hasattr(args, "limit"):
        config.limit = args.limit
    return config


_COMMANDS = {
    "fit": cmd_fit,
    "select": cmd_select,
    "cluster": cmd_cluster,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    config = _config_from_args(args)
    try:
        return _COMMANDS[args.command](config)
    except EnumerationSizeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except (ModelValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def entry_point() -> None:
    sys.exit(main())
