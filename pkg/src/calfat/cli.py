"""Command-line entry point.

    calfat run              --config exp.cfg [--out DIR] [--seed N]
    calfat partition-report --config exp.cfg [--out DIR] [--seed N]
    calfat verify-theory    --config exp.cfg [--out DIR]
    calfat attack-eval      --config exp.cfg --model model.bin [--out DIR]

Exit codes: 0 success, 1 runtime failure, 2 config/input error,
3 theory verification failure. All outputs land under the output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .data import DataFormatError, Dataset, PartitionConfig, dirichlet_partition, partition_counts
from .federation import run_federation
from .metrics import RoundMetrics, accuracy, robust_accuracy, write_metrics
from .nn import load_model, save_model
from .theory import check_report, variance_sweep


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calfat",
        description="Federated adversarial training simulator with calibrated losses",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "train per configured seed and write metrics plus a summary"),
        ("partition-report", "emit per-client per-class count matrices without training"),
        ("verify-theory", "run the heterogeneity sweep and gate on its invariants"),
        ("attack-eval", "evaluate a serialized model on natural and attacked data"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to the experiment config")
        cmd.add_argument("--out", default=None, help="override output.dir")
        if name in ("run", "partition-report"):
            cmd.add_argument("--seed", type=int, default=None, help="run only this seed")
        if name == "attack-eval":
            cmd.add_argument("--model", required=True, help="path to a serialized model")
    return parser


def _prepare(args) -> tuple[ExperimentConfig, Path, list[int]]:
    cfg = load_config(args.config)
    out_dir = Path(args.out if args.out is not None else cfg["output.dir"])
    seeds = cfg["seeds"]
    if getattr(args, "seed", None) is not None:
        seeds = [args.seed]
    out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, out_dir, seeds


def _summary(per_seed_final: list[RoundMetrics], seeds: list[int]) -> dict:
    def stats(values: list[float]) -> dict:
        arr = np.asarray(values, dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return {"mean": float(arr.mean()), "std": std}

    attack_names = sorted({name for rm in per_seed_final for name in rm.robust_acc})
    summary = {
        "seeds": seeds,
        "final_round": {
            "natural_acc": stats([rm.natural_acc for rm in per_seed_final]),
            "s2": stats([rm.heterogeneity_s2 for rm in per_seed_final]),
        },
    }
    for name in attack_names:
        summary["final_round"][f"rob_{name}"] = stats(
            [rm.robust_acc[name] for rm in per_seed_final if name in rm.robust_acc]
        )
    return summary


def cmd_run(args) -> int:
    cfg, out_dir, seeds = _prepare(args)
    train, evalset = cfg.load_data()
    (out_dir / "resolved_config.txt").write_text(cfg.resolved_text(), encoding="utf-8")

    finals = []
    for seed in seeds:
        clients = dirichlet_partition(
            train, PartitionConfig(cfg["partition.clients"], cfg["partition.beta"], seed=seed)
        )
        result = run_federation(cfg.federation_config(seed), clients, evalset)
        write_metrics(result.metrics, out_dir / f"metrics_seed{seed}.csv", "csv")
        write_metrics(result.metrics, out_dir / f"metrics_seed{seed}.json", "json")
        save_model(result.model, out_dir / f"model_seed{seed}.bin")
        finals.append(result.metrics[-1])
        print(
            f"seed {seed}: natural={result.metrics[-1].natural_acc:.4f} "
            + " ".join(f"rob_{k}={v:.4f}" for k, v in sorted(result.metrics[-1].robust_acc.items()))
        )
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(_summary(finals, seeds), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out_dir}/summary.json")
    return 0


def cmd_partition_report(args) -> int:
    cfg, out_dir, seeds = _prepare(args)
    train, _ = cfg.load_data()
    for seed in seeds:
        clients = dirichlet_partition(
            train, PartitionConfig(cfg["partition.clients"], cfg["partition.beta"], seed=seed)
        )
        counts = partition_counts(clients)
        path = out_dir / f"partition_seed{seed}.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("client," + ",".join(f"cls_{c}" for c in range(train.num_classes)) + "\n")
            for cid, row in enumerate(counts):
                fh.write(f"{cid}," + ",".join(str(int(v)) for v in row) + "\n")
        empty = int((counts.sum(axis=1) == 0).sum())
        print(f"seed {seed}: wrote {path} ({empty} empty clients)")
    return 0


def cmd_verify_theory(args) -> int:
    cfg, out_dir, _ = _prepare(args)
    dist = cfg.toy_distribution()
    report = variance_sweep(
        dist, cfg["theory.sizes"], cfg["theory.seeds"], delta=cfg["theory.delta"]
    )
    report.save_json(out_dir / "theory_report.json")
    report.save_csv(out_dir / "theory_report.csv")
    checks = check_report(dist, report)
    failed = [c for c in checks if not c.passed]
    for c in checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    if failed:
        print(f"error: theory invariant violated: {failed[0].name} ({failed[0].detail})", file=sys.stderr)
        return 3
    return 0


def cmd_attack_eval(args) -> int:
    cfg, out_dir, _ = _prepare(args)
    model = load_model(args.model)
    _, evalset = cfg.load_data()
    if model.input_dim != evalset.dim or model.num_classes != evalset.num_classes:
        raise ConfigError(
            f"model expects dim={model.input_dim}, classes={model.num_classes}; "
            f"eval data has dim={evalset.dim}, classes={evalset.num_classes}"
        )
    natural, per_class = accuracy(model, evalset)
    robust = {}
    for k, (name, spec) in enumerate(cfg.eval_attacks()):
        rng = np.random.default_rng((cfg["seeds"][0], k)) if spec.random_start else None
        robust[name] = robust_accuracy(model, evalset, spec, rng=rng)
    record = RoundMetrics(0, natural, 0.0, robust, per_class)
    write_metrics([record], out_dir / "attack_eval.csv", "csv")
    print(
        f"natural={natural:.4f} "
        + " ".join(f"rob_{k}={v:.4f}" for k, v in sorted(robust.items()))
    )
    return 0


_COMMANDS = {
    "run": cmd_run,
    "partition-report": cmd_partition_report,
    "verify-theory": cmd_verify_theory,
    "attack-eval": cmd_attack_eval,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
