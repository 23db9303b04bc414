"""Subcommand CLI tying the pipeline together.

    embedmatch gen-data --out runs/data --seed 7
    embedmatch train    --data runs/data --out runs/model --seed 7
    embedmatch attack   --weights runs/model/weights.vitw --data runs/data \
                        --out runs/attack --epsilon 0.1 --eta 0.05 --kind mil --seed 7
    embedmatch metrics  --weights ... --data ... --records runs/attack/records.jsonl --out runs/attack
    embedmatch project  / detect / report

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
All randomness derives from --seed (fallback: EMBEDMATCH_SEED, then 0).
Every command drops a manifest.json snapshot beside its outputs; re-running
with the recorded arguments reproduces the outputs bit for bit.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

from . import __version__
from .attack import AttackError, PairingError, PRMConfig, build_pairs, run_suite
from .data import (ImageParseError, ManifestError, generate_synthetic, load_dataset,
                   split, write_dataset)
from .detector import sweep
from .metrics import aggregate, per_record_metrics
from .model import ModelConfig
from .pca import fit_pca
from .pca import project as pca_project
from .records_io import read_records, write_records
from .seeding import derive_seed
from .train import TrainConfig, TrainingError, evaluate, train
from .weights_io import WeightFormatError, load_weights, save_weights

KIND_FLAGS = {"vit": "class_token", "mil": "mil_mean"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("EMBEDMATCH_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"EMBEDMATCH_SEED is not an integer: {env!r}") from None
    return 0


def _require(path, flag: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{flag}: no such file or directory: {path}")
    return path


def _manifest_path(data_arg, flag: str = "--data") -> Path:
    path = _require(data_arg, flag)
    if path.is_dir():
        path = path / "manifest.csv"
        if not path.exists():
            raise UsageError(f"{flag}: directory has no manifest.csv: {path.parent}")
    return path


def _write_run_manifest(out_dir: Path, command: str, args, seed: int, outputs) -> None:
    # one manifest per command so runs sharing an output directory never clobber
    payload = {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k not in ("func", "command")},
        "seed": seed,
        "tool_version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "outputs": [str(p) for p in outputs],
    }
    (out_dir / f"manifest-{command}.json").write_text(json.dumps(payload, indent=2) + "\n")


def _load_run_manifest(run_dir: Path, command: str) -> dict:
    path = _require(run_dir / f"manifest-{command}.json", "--run")
    return json.loads(path.read_text())


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split_items(items, seed: int):
    by_id = {it.id: it for it in items}
    parts = split([it.id for it in items], derive_seed(seed, "split"))
    return (
        [by_id[i] for i in parts.train],
        [by_id[i] for i in parts.validation],
        [by_id[i] for i in parts.test],
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    seed = _resolve_seed(args)
    out = _out_dir(args)
    items = generate_synthetic(args.num_per_class, args.num_classes, args.image_size,
                               derive_seed(seed, "synthetic"))
    manifest = write_dataset(items, out)
    _write_run_manifest(out, "gen-data", args, seed, [manifest])
    print(f"wrote {len(items)} images + manifest to {out}")


def cmd_train(args) -> None:
    seed = _resolve_seed(args)
    out = _out_dir(args)
    items = load_dataset(_manifest_path(args.data))
    num_classes = args.num_classes or max(it.label for it in items) + 1
    first = items[0].image
    config = ModelConfig(
        image_size=first.shape[0], channels=first.shape[2], patch_size=args.patch_size,
        embed_dim=args.embed_dim, depth=args.depth, num_heads=args.num_heads,
        mlp_ratio=args.mlp_ratio, num_classes=num_classes)
    train_items, val_items, _ = _split_items(items, seed)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       learning_rate=args.learning_rate, seed=seed)
    weights, history = train(config, tcfg, train_items, val_items)
    weights_path = out / "weights.vitw"
    save_weights(weights, weights_path)
    history.to_csv(out / "history.csv")
    _write_run_manifest(out, "train", args, seed, [weights_path, out / "history.csv"])
    last = history.epochs[-1]
    print(f"trained {tcfg.epochs} epochs; val acc vit={last.val_acc_vit:.3f} "
          f"mil={last.val_acc_mil:.3f}; weights at {weights_path}")


def cmd_attack(args) -> None:
    seed = _resolve_seed(args)
    out = _out_dir(args)
    weights = load_weights(_require(args.weights, "--weights"))
    items = load_dataset(_manifest_path(args.data))
    _, _, test_items = _split_items(items, seed)
    try:
        pairs = build_pairs(test_items, derive_seed(seed, "pairs"), limit=args.num_pairs)
    except PairingError as e:
        raise UsageError(f"--data: {e}") from None
    cfg = PRMConfig(eta=args.eta, epsilon=args.epsilon, max_iters=args.max_iters,
                    conv_threshold=args.conv_threshold, kind=KIND_FLAGS[args.kind],
                    trace_every=args.trace_every)
    by_id = {it.id: it for it in items}
    records, failures = run_suite(pairs, weights, cfg, by_id, workers=args.workers)
    records_path = write_records(records, out)
    _write_run_manifest(out, "attack", args, seed, [records_path])
    for source_id, target_id, message in failures:
        print(f"pair {source_id} -> {target_id} failed: {message}", file=sys.stderr)
    converged = sum(r.converged for r in records)
    print(f"attacked {len(records)}/{len(pairs)} pairs ({converged} converged) "
          f"-> {records_path}")


def _context_from_args(args):
    """Weights, dataset items and embedding kind shared by the analysis commands."""
    weights = load_weights(_require(args.weights, "--weights"))
    items = load_dataset(_manifest_path(args.data))
    records = read_records(_require(args.records, "--records"))
    if not records:
        raise UsageError(f"--records: no records in {args.records}")
    return weights, items, records, KIND_FLAGS[args.kind]


def cmd_metrics(args) -> None:
    seed = _resolve_seed(args)
    out = _out_dir(args)
    weights, items, records, kind = _context_from_args(args)
    _, _, test_items = _split_items(items, seed)
    clean_accuracy = evaluate(weights, test_items)[kind]
    by_id = {it.id: it for it in items}
    report = aggregate(records, clean_accuracy, items_by_id=by_id, weights=weights, kind=kind)
    metrics_path = out / "metrics.json"
    metrics_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    rows = per_record_metrics(records, items_by_id=by_id, weights=weights, kind=kind)
    with (out / "per_record.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f.name for f in rows[0].__dataclass_fields__.values()])
        for m in rows:
            writer.writerow([getattr(m, f) for f in m.__dataclass_fields__])
    _write_run_manifest(out, "metrics", args, seed, [metrics_path, out / "per_record.csv"])
    print(f"clean acc {report.clean_accuracy:.3f} -> attacked {report.attacked_accuracy:.3f}, "
          f"msr {report.msr:.3f}; report at {metrics_path}")


def cmd_project(args) -> None:
    seed = _resolve_seed(args)
    out = _out_dir(args)
    weights, items, records, kind = _context_from_args(args)
    from .model import embed  # local import keeps module load light
    _, _, test_items = _split_items(items, seed)
    basis = fit_pca([embed(it.image, weights, kind) for it in test_items], k=6)
    by_id = {it.id: it for it in items}
    path = out / "projections.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "role"] + [f"pc{i}" for i in range(1, 7)])
        for r in records:
            triples = [
                (r.source_id, "original", by_id[r.source_id].image),
                (f"{r.source_id}->{r.target_id}", "optimized", r.image),
                (r.target_id, "target", by_id[r.target_id].image),
            ]
            for row_id, role, image in triples:
                coords = pca_project(embed(image, weights, kind), basis)
                writer.writerow([row_id, role] + [repr(float(c)) for c in coords])
    _write_run_manifest(out, "project", args, seed, [path])
    print(f"wrote projections for {len(records)} attack triples to {path}")


def cmd_detect(args) -> None:
    seed = _resolve_seed(args)
    out = _out_dir(args)
    weights, items, records, kind = _context_from_args(args)
    by_id = {it.id: it for it in items}
    clean_images = [by_id[r.source_id].image for r in records]
    attacked_images = [r.image for r in records]
    try:
        sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sigmas: expected comma-separated floats, got {args.sigmas!r}") from None
    if not sigmas:
        raise UsageError("--sigmas: empty list")
    rows = sweep(clean_images, attacked_images, sigmas, weights, kind,
                 derive_seed(seed, "detector"), draws=args.draws)
    path = out / "sweep.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma", "clean_rate", "attacked_rate"])
        for row in rows:
            writer.writerow([repr(row.sigma), repr(row.clean_flag_rate),
                             repr(row.attacked_flag_rate)])
    _write_run_manifest(out, "detect", args, seed, [path])
    best = max(rows, key=lambda r: r.attacked_flag_rate - r.clean_flag_rate)
    print(f"best margin at sigma={best.sigma}: attacked {best.attacked_flag_rate:.3f} "
          f"vs clean {best.clean_flag_rate:.3f}; table at {path}")


def _fmt_pct(x: float) -> str:
    return f"{100.0 * x:5.1f}%"


def _summary_text(report, attack_args, sweep_rows) -> str:
    kind = attack_args.get("kind", "?")
    eps = attack_args.get("epsilon", "?")
    lines = [
        f"== Accuracy under attack (kind={kind}, epsilon={eps}) ==",
        f"records            {report.n_records}",
        f"clean accuracy     {_fmt_pct(report.clean_accuracy)}",
        f"attacked accuracy  {_fmt_pct(report.attacked_accuracy)}"
        f"   (drop {100.0 * report.accuracy_drop:.1f} pp)",
        f"match success rate {_fmt_pct(report.msr)}",
        "",
        "== Image quality ==",
        "pairing               mean PSNR      mean SSIM",
        f"original->optimized   {report.mean_psnr_original:7.2f} dB    "
        f"{report.mean_ssim_original:.3f}",
        f"target->optimized     {report.mean_psnr_target:7.2f} dB    "
        f"{report.mean_ssim_target:.3f}",
        f"(infinite PSNR values excluded from means: {report.psnr_excluded})",
        "",
        "== Embedding cosine similarity ==",
        f"optimized<->original  {report.mean_cosine_original:.3f}",
        f"optimized<->target    {report.mean_cosine_target:.3f}",
    ]
    if sweep_rows:
        lines += ["", "== Detector sweep ==", "sigma    clean rate   attacked rate"]
        for row in sweep_rows:
            lines.append(f"{row['sigma']:<8g} {row['clean_rate']:<12.3f} "
                         f"{row['attacked_rate']:.3f}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> None:
    run_dir = _require(args.run, "--run")
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    manifest = _load_run_manifest(run_dir, "attack")
    attack_args = manifest["args"]
    seed = manifest["seed"]
    weights = load_weights(_require(attack_args["weights"], "--run (weights path)"))
    items = load_dataset(_manifest_path(attack_args["data"], "--run (data path)"))
    records = read_records(_require(run_dir / "records.jsonl", "--run (records)"))
    kind = KIND_FLAGS[attack_args["kind"]]
    _, _, test_items = _split_items(items, seed)
    clean_accuracy = evaluate(weights, test_items)[kind]
    by_id = {it.id: it for it in items}
    report = aggregate(records, clean_accuracy, items_by_id=by_id, weights=weights, kind=kind)

    sweep_rows = []
    sweep_path = args.sweep or (run_dir / "sweep.csv")
    if Path(sweep_path).exists():
        with open(sweep_path, newline="") as fh:
            for row in csv.DictReader(fh):
                sweep_rows.append({"sigma": float(row["sigma"]),
                                   "clean_rate": float(row["clean_rate"]),
                                   "attacked_rate": float(row["attacked_rate"])})
    projections_path = args.projections or (run_dir / "projections.csv")
    projections_ref = str(projections_path) if Path(projections_path).exists() else None

    metrics_dict = {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                    for k, v in report.to_dict().items()}
    payload = {
        "attack": {"args": attack_args, "seed": seed},
        "metrics": metrics_dict,
        "detector_sweep": sweep_rows,
        "projections_csv": projections_ref,
        "records_file": str(run_dir / "records.jsonl"),
    }
    report_path = out / "report.json"
    report_path.write_text(json.dumps(payload, indent=2, allow_nan=False) + "\n")
    summary_path = out / "summary.txt"
    summary_path.write_text(_summary_text(report, attack_args, sweep_rows))
    print(summary_path.read_text())
    print(f"report at {report_path}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_seed(p):
    p.add_argument("--seed", type=int, default=None,
                   help="master seed (fallback: EMBEDMATCH_SEED, then 0)")


def _add_analysis_flags(p):
    p.add_argument("--weights", required=True, help="weights.vitw file")
    p.add_argument("--data", required=True, help="dataset directory or manifest.csv")
    p.add_argument("--records", required=True, help="records.jsonl from an attack run")
    p.add_argument("--kind", choices=sorted(KIND_FLAGS), default="mil")
    p.add_argument("--out", required=True)
    _add_seed(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="embedmatch", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate a synthetic fundus-like dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-per-class", type=int, default=300)
    p.add_argument("--num-classes", type=int, default=3)
    p.add_argument("--image-size", type=int, default=32)
    _add_seed(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the two-headed ViT classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--num-heads", type=int, default=4)
    p.add_argument("--mlp-ratio", type=int, default=2)
    p.add_argument("--num-classes", type=int, default=None,
                   help="default: inferred from manifest labels")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    _add_seed(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run the matching attack over test-split pairs")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eta", type=float, default=0.05, help="gradient-descent step size")
    p.add_argument("--epsilon", type=float, default=0.1, help="max per-pixel change")
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--conv-threshold", type=float, default=None,
                   help="absolute embedding-distance stop; default 0.01*||target||")
    p.add_argument("--kind", choices=sorted(KIND_FLAGS), default="mil")
    p.add_argument("--trace-every", type=int, default=25)
    p.add_argument("--num-pairs", type=int, default=None,
                   help="attack a random subset of this size (default: all test images)")
    p.add_argument("--workers", type=int, default=1)
    _add_seed(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("metrics", help="aggregate metrics over an attack run")
    _add_analysis_flags(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("project", help="PCA projections of original/optimized/target embeddings")
    _add_analysis_flags(p)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("detect", help="noise-consistency detector sweep")
    _add_analysis_flags(p)
    p.add_argument("--sigmas", default="0.01,0.02,0.05,0.1")
    p.add_argument("--draws", type=int, default=1)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="join records, metrics, projections and sweep")
    p.add_argument("--run", required=True, help="attack output directory")
    p.add_argument("--out", default=None, help="default: the run directory")
    p.add_argument("--sweep", default=None, help="sweep.csv (default: <run>/sweep.csv)")
    p.add_argument("--projections", default=None,
                   help="projections.csv (default: <run>/projections.csv)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_help()
            return 1
        args.func(args)
        return 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (TrainingError, AttackError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3
    except (ImageParseError, ManifestError, WeightFormatError, json.JSONDecodeError,
            ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
