"""Command-line pipeline: preprocess, build-graphs, train, evaluate, embed.

Every command takes ``--config PATH`` (flat key=value file) plus flag
overrides; flags win over the file, the file wins over defaults. Stage
outputs land under the configured output directory and later stages refuse
to run until their inputs exist. Exit codes: 0 success, 1 usage error,
2 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import graphs as G
from . import metrics as M
from . import mobility as mob
from .config import ABLATIONS, RunConfig, resolve_config, seeded_rng
from .errors import ConfigError, DataError, TrainingError
from .model import ModelParams, build_model_inputs, fused_representations
from .train import (
    evaluate_on_split,
    load_checkpoint,
    save_checkpoint,
    save_history,
    train,
)


@dataclass
class StagePaths:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)
        self.grid_map = self.root / "grid_map.json"
        self.sequences = self.root / "sequences.jsonl"
        self.splits = self.root / "splits.json"
        self.manifest = self.root / "manifest.json"
        self.local_graph = self.root / "local_graph.txt"
        self.global_graph = self.root / "global_graph.txt"
        self.checkpoint = self.root / "checkpoint.bin"
        self.history = self.root / "history.tsv"
        self.metrics = self.root / "metrics.txt"
        self.embeddings = self.root / "embeddings.tsv"


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DataError(f"missing artifact {path.name}; run the {stage!r} stage first")
    return path


def _load_preprocessed(paths: StagePaths):
    _require(paths.grid_map, "preprocess")
    _require(paths.sequences, "preprocess")
    _require(paths.splits, "preprocess")
    gm = mob.load_grid_map(paths.grid_map)
    sequences = mob.load_sequences(paths.sequences)
    split = mob.load_split(paths.splits)
    return gm, sequences, split


def run_preprocess(cfg: RunConfig) -> dict:
    if not cfg.dataset:
        raise ConfigError("no dataset path configured")
    paths = StagePaths(cfg.output_dir or ".")
    paths.root.mkdir(parents=True, exist_ok=True)

    trajectories, report = mob.parse_dataset(cfg.dataset)
    subtrajs = [
        st
        for tr in trajectories
        for st in mob.split_trajectory_by_interval(tr, cfg.tau)
    ]
    subtrajs.sort(key=lambda s: (s.user_id, s.interval_index))
    all_points = [p for tr in trajectories for p in tr.points]
    gm = mob.build_grid_map(all_points, cfg.cell_size)
    sequences = mob.build_grid_sequences(
        subtrajs, gm, cfg.time_window, cfg.motion_speed_eps, cfg.motion_turn_deg
    )
    split = mob.chronological_split(subtrajs)

    manifest = {
        "users": len(trajectories),
        "user_roster": [tr.user_id for tr in trajectories],
        "trajectories": len(sequences),
        "points": sum(len(s) for s in sequences),
        "grids": gm.n_grids,
        "split_sizes": {
            "train": len(split.train),
            "validation": len(split.validation),
            "test": len(split.test),
        },
        "parse_lines": report.data_lines,
        "parse_failures": report.failed,
    }
    mob.save_grid_map(gm, paths.grid_map)
    mob.save_sequences(sequences, paths.sequences)
    mob.save_split(split, paths.splits)
    paths.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def run_build_graphs(cfg: RunConfig) -> dict:
    paths = StagePaths(cfg.output_dir or ".")
    gm, sequences, split = _load_preprocessed(paths)

    local = G.build_local_graph(sequences, gm.n_grids)
    incidence = G.build_grid_incidence(sequences, gm.n_grids)
    by_id = {s.traj_id: s for s in sequences}
    labels = {tid: by_id[tid].user_id for tid in split.train}
    global_g = G.build_global_graph(incidence, [s.traj_id for s in sequences], labels)

    G.save_local_graph(local, paths.local_graph)
    G.save_global_graph(global_g, paths.global_graph)
    return {
        "local": {"nodes": local.n_grids, "edges": local.n_edges,
                  "max_weight": local.max_weight},
        "global": {"nodes": global_g.n_nodes, "edges": global_g.n_edges,
                   "max_weight": global_g.max_weight},
    }


def _load_model_inputs(cfg: RunConfig, paths: StagePaths):
    gm, sequences, split = _load_preprocessed(paths)
    _require(paths.local_graph, "build-graphs")
    _require(paths.global_graph, "build-graphs")
    local = G.load_local_graph(paths.local_graph)
    global_g = G.load_global_graph(paths.global_graph)
    inputs = build_model_inputs(sequences, local, global_g, cfg.model_config())
    return inputs, split


def run_train(cfg: RunConfig) -> dict:
    paths = StagePaths(cfg.output_dir or ".")
    inputs, split = _load_model_inputs(cfg, paths)
    result = train(inputs, split, cfg.model_config(), cfg.train_config())
    save_checkpoint(result.params, paths.checkpoint)
    save_history(result.history, paths.history)
    return {
        "epochs": len(result.history),
        "best_epoch": result.best_epoch,
        "best_val_acc1": result.best_val_acc1,
    }


def _restore_params(cfg: RunConfig, inputs, paths: StagePaths) -> ModelParams:
    _require(paths.checkpoint, "train")
    params = ModelParams(
        cfg.model_config(),
        n_grids=inputs.n_grids,
        n_users=inputs.n_users,
        max_seq_len=inputs.max_seq_len,
        rng=seeded_rng(cfg.seed, "init"),
    )
    return load_checkpoint(params, paths.checkpoint)


def run_evaluate(cfg: RunConfig, split_name: str = "test") -> M.MetricsReport:
    paths = StagePaths(cfg.output_dir or ".")
    inputs, split = _load_model_inputs(cfg, paths)
    params = _restore_params(cfg, inputs, paths)
    ids = getattr(split, split_name)
    if not ids:
        raise DataError(f"split {split_name!r} is empty")
    report = evaluate_on_split(params, cfg.model_config(), inputs, ids)
    M.save_report(report, paths.metrics)
    return report


def run_embed(cfg: RunConfig) -> Path:
    paths = StagePaths(cfg.output_dir or ".")
    inputs, _ = _load_model_inputs(cfg, paths)
    params = _restore_params(cfg, inputs, paths)
    rng = np.random.default_rng(0)  # unused in evaluation mode
    rows = []
    all_idx = np.arange(inputs.n_traj)
    for lo in range(0, inputs.n_traj, 64):
        chunk = all_idx[lo : lo + 64]
        rows.append(
            fused_representations(
                params, cfg.model_config(), inputs, chunk, rng, training=False
            ).values
        )
    reps = np.concatenate(rows, axis=0)
    users = [inputs.user_ids[i] for i in inputs.labels]
    M.export_embeddings(reps, inputs.traj_ids, users, paths.embeddings)
    return paths.embeddings


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument("--dataset", help="input CSV path")
    sub.add_argument("--output", dest="output_dir", help="artifact directory")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--cell-size", dest="cell_size", type=float)
    sub.add_argument("--tau", type=float)
    sub.add_argument("--time-window", dest="time_window", type=float)
    sub.add_argument("--embed-dim", dest="embed_dim", type=int)
    sub.add_argument("--gcn-layers", dest="gcn_layers", type=int)
    sub.add_argument("--attn-layers", dest="attn_layers", type=int)
    sub.add_argument("--heads", type=int)
    sub.add_argument("--lambda-l2", dest="lambda_l2", type=float)
    sub.add_argument("--dropout", type=float)
    sub.add_argument("--learning-rate", dest="learning_rate", type=float)
    sub.add_argument("--epochs", dest="epochs_max", type=int)
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--patience", type=int)
    sub.add_argument("--ablation", choices=sorted(ABLATIONS))
    sub.add_argument("--binarize-adjacency", dest="binarize_adjacency",
                     action=argparse.BooleanOptionalAction)
    sub.add_argument("--scale-full-d", dest="scale_full_d",
                     action=argparse.BooleanOptionalAction)
    sub.add_argument("--early-stop-on-loss", dest="early_stop_on_loss",
                     action=argparse.BooleanOptionalAction)


def build_parser() -> _Parser:
    parser = _Parser(prog="tulink", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)
    for name in ("preprocess", "build-graphs", "train", "evaluate", "embed"):
        sub = commands.add_parser(name, help=f"run the {name} stage")
        _add_common(sub)
        if name == "evaluate":
            sub.add_argument("--split", choices=("train", "validation", "test"),
                             default="test")
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {
        key: value
        for key, value in vars(args).items()
        if key not in ("command", "config", "split") and value is not None
    }
    return resolve_config(args.config, overrides)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _config_from_args(args)
        if args.command == "preprocess":
            manifest = run_preprocess(cfg)
            print(
                f"preprocessed {manifest['points']} points into "
                f"{manifest['trajectories']} sub-trajectories of "
                f"{manifest['users']} users over {manifest['grids']} grids"
            )
        elif args.command == "build-graphs":
            stats = run_build_graphs(cfg)
            for kind, s in stats.items():
                print(
                    f"{kind} graph: {s['nodes']} nodes, {s['edges']} edges, "
                    f"max weight {s['max_weight']}"
                )
        elif args.command == "train":
            summary = run_train(cfg)
            print(
                f"trained {summary['epochs']} epochs; best epoch "
                f"{summary['best_epoch']} with validation acc@1 "
                f"{summary['best_val_acc1']:.4f}"
            )
        elif args.command == "evaluate":
            report = run_evaluate(cfg, args.split)
            for k in sorted(report.acc_at):
                print(f"acc@{k}={report.acc_at[k]:.6f}")
            print(f"macro_p={report.macro_p:.6f}")
            print(f"macro_r={report.macro_r:.6f}")
            print(f"macro_f1={report.macro_f1:.6f}")
        elif args.command == "embed":
            out = run_embed(cfg)
            print(f"wrote embeddings to {out}")
    except ConfigError as exc:
        print(f"tulink: config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, TrainingError) as exc:
        print(f"tulink: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
