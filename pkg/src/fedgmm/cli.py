"""Command-line entry point (``fedgmm``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dem import DemConfig, InitScheme, benchmark_train, dem_train
from .evaluation import anomaly_scores, auc_pr, fitness_gamma
from .experiment import ExperimentConfig, emit_results, run_scenario, write_manifest
from .gmm import CovarianceType, FitConfig
from .io import load_client_model, load_csv, load_model, read_partition, save_model, write_csv, write_partition
from .one_shot import AggregationConfig, aggregate, train_local
from .partition import PartitionSpec, gen_mixture_dataset


def _fit_args(p: argparse.ArgumentParser, k_default: int = 1) -> None:
    p.add_argument("--k-min", type=int, default=k_default)
    p.add_argument("--k-max", type=int, default=None, help="defaults to --k-min")
    p.add_argument("--cov", choices=[c.value for c in CovarianceType], default="diag")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--reg-floor", type=float, default=1e-6)
    p.add_argument("--n-init", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)


def _fit_config(a) -> FitConfig:
    return FitConfig(a.k_min, a.k_max or a.k_min, a.cov, a.tol, a.max_iters, a.reg_floor, a.n_init, a.seed)


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--label-column", default="label")


def _client_rows(a):
    data = load_csv(a.data, a.label_column)
    return data, read_partition(a.partition).client_rows(data)


def cmd_gen_data(a) -> None:
    data, _ = gen_mixture_dataset(a.classes, a.dim, a.n, a.separation, a.seed)
    write_csv(a.out, data.rows, data.labels)


def cmd_partition(a) -> None:
    data = load_csv(a.data, a.label_column)
    spec = PartitionSpec(a.scheme, a.alpha, a.clients, a.seed)
    write_partition(a.out, spec.apply(data), data.labels)


def cmd_train_local(a) -> None:
    _, clients = _client_rows(a)
    out = Path(a.out)
    ids = range(len(clients)) if a.client is None else [a.client]
    if a.client is None:
        out.mkdir(parents=True, exist_ok=True)
    cfg = _fit_config(a)
    for c in ids:
        model = train_local(clients[c], replace(cfg, seed=cfg.seed + c))
        target = out / f"client_{c:04d}.fgmm" if a.client is None else out
        save_model(target, model.params, model.n_local)


def cmd_aggregate(a) -> None:
    paths = []
    for m in a.models:
        p = Path(m)
        paths.extend(sorted(p.glob("*.fgmm")) if p.is_dir() else [p])
    clients = [load_client_model(p) for p in paths]
    params, report, stats = aggregate(clients, AggregationConfig(a.h, _fit_config(a), a.seed))
    save_model(a.out, params, sum(c.n_local for c in clients))
    print(json.dumps({
        "clients": len(clients), "synthetic_rows": stats.n_synthetic, "pooled_components": stats.pooled_k,
        "selected_k": report.selected_k, "client_to_server_rounds": stats.ledger.client_to_server_rounds,
        "payload_floats": stats.ledger.payload_floats,
    }))


def cmd_dem(a) -> None:
    _, clients = _client_rows(a)
    cfg = DemConfig(a.k, a.init, a.tol, a.max_rounds, a.subset_size, a.seed, a.cov, a.reg_floor)
    result = dem_train(clients, cfg)
    save_model(a.out, result.params, sum(len(x) for x in clients))
    print(json.dumps({
        "rounds": result.rounds, "converged": result.report.converged,
        "avg_loglik": result.report.final_avg_loglik, "payload_floats": result.ledger.payload_floats,
    }))


def cmd_benchmark(a) -> None:
    data = load_csv(a.data, a.label_column)
    params, report = benchmark_train(data.rows, _fit_config(a))
    save_model(a.out, params, data.rows.shape[0])
    print(json.dumps({"selected_k": report.selected_k, "avg_loglik": report.final_avg_loglik, "bic": report.bic}))


def cmd_evaluate(a) -> None:
    params, _ = load_model(a.model)
    data = load_csv(a.data, a.anomaly_column, normalize=a.normalize, ignore_columns=a.ignore)
    out = {"gamma": fitness_gamma(params, data.rows)}
    if a.anomaly_column is not None:
        out["auc_pr"] = auc_pr(anomaly_scores(params, data.rows), data.labels)
    print(json.dumps(out))


def cmd_experiment(a) -> None:
    cfg = ExperimentConfig.from_json(a.config)
    if a.seed is not None:
        cfg = replace(cfg, seed_base=a.seed)
    if a.workers is not None:
        cfg = replace(cfg, workers=a.workers)
    result = run_scenario(cfg)
    emit_results(result, a.out)
    write_manifest(result, a.manifest or str(Path(a.out).with_suffix(".manifest.json")))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgmm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic class-structured dataset as CSV")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("partition", help="split rows over clients (row_index, client_id, label)")
    _data_args(p)
    p.add_argument("--scheme", choices=["dirichlet", "quantity"], default="dirichlet")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--clients", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train-local", help="fit client models from a partition table")
    _data_args(p)
    p.add_argument("--partition", required=True)
    p.add_argument("--client", type=int, default=None, help="single client; omit to train all into --out dir")
    _fit_args(p, k_default=15)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_local)

    p = sub.add_parser("aggregate", help="one-shot aggregation of uploaded client models")
    p.add_argument("models", nargs="+", help="model files or directories of *.fgmm")
    p.add_argument("--h", type=int, default=100)
    _fit_args(p, k_default=15)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("dem", help="distributed EM baseline")
    _data_args(p)
    p.add_argument("--partition", required=True)
    p.add_argument("--k", type=int, default=15)
    p.add_argument("--init", choices=[s.value for s in InitScheme], default="fedkmeans")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--max-rounds", type=int, default=100)
    p.add_argument("--subset-size", type=int, default=100)
    p.add_argument("--cov", choices=[c.value for c in CovarianceType], default="diag")
    p.add_argument("--reg-floor", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dem)

    p = sub.add_parser("benchmark", help="non-federated fit on the whole dataset")
    _data_args(p)
    _fit_args(p, k_default=15)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("evaluate", help="fitness score, plus AUC-PR when an anomaly column is given")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--anomaly-column", default=None, help="binary column, 1 = anomaly")
    p.add_argument("--ignore", nargs="*", default=[], help="columns that are not features (e.g. label)")
    p.add_argument("--normalize", action="store_true", help="min-max normalise the features first")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run a full scenario from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override seed_base")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True, help="long-format results CSV")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    np.seterr(under="ignore")
    try:
        args.func(args)
    except (ValueError, OSError) as exc:
        print(f"fedgmm {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
