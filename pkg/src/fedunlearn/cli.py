"""Command-line entry point: ``datagen``, ``run`` and ``analyze``.

Run directory layout::

    <run>/config.toml          resolved configuration
    <run>/rounds.jsonl         one JSON object per round of the encrypted run
    <run>/retrain_rounds.jsonl rounds of the plaintext retrain baseline
    <run>/metrics.json         MetricsReport for each model plus the epsilon gap
    <run>/checkpoints/         final.ckpt, retrain.ckpt, retrain_b.ckpt, rounds/round_NNNN.ckpt
    <run>/reports/             written by ``analyze``

Exit codes: 0 success, 2 configuration, 3 data, 4 cryptography, 5 run failure,
6 missing run artifacts.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence


from . import analysis, config, data, nn
from .crypto.dmcfe import DMCFEError
from .fedsim import (
    ConfigInvalid,
    DatasetTooSmall,
    full_retrain_baseline,
    read_round_log,
    run_federation,
)
from .unlearn import EmptyForgetSet, ForgetSpec

log = logging.getLogger("fedunlearn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CRYPTO, EXIT_RUN, EXIT_ARTIFACTS = 0, 2, 3, 4, 5, 6


class MissingRunArtifacts(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# data


def load_dataset(sec: config.DataSection) -> data.DatasetBundle:
    if sec.source == "bundle":
        bundle = data.load_bundle(sec.path)
    elif sec.source == "blobs":
        bundle = data.bundle_from_blobs(sec.num_classes, sec.n, sec.dim, sec.spread, sec.test_fraction, sec.seed)
    elif sec.source == "idx":
        root = Path(sec.path)
        bundle = data.bundle_from_idx(
            _idx_file(root, "train-images"),
            _idx_file(root, "train-labels"),
            _idx_file(root, "t10k-images", "test-images"),
            _idx_file(root, "t10k-labels", "test-labels"),
            sec.classes or None,
            sec.per_class or None,
            sec.seed,
        )
    else:
        images, labels = data.bundled_mnist(sec.classes)
        ds = data.Dataset(images.reshape(len(images), -1) / 255.0, labels)
        ds = data.select_classes(ds, sec.classes, sec.per_class or None, sec.seed)
        train, test = data.train_test_split(ds, sec.test_fraction, sec.seed)
        prov = {"source": "mnist-bundled", "classes": list(sec.classes), "per_class": sec.per_class, "seed": sec.seed}
        bundle = data.DatasetBundle(train, test, (len(sec.classes),), prov)
    if sec.parity_task:
        bundle = data.DatasetBundle(
            data.add_parity_task(bundle.train),
            data.add_parity_task(bundle.test),
            (bundle.num_classes[0], 2),
            {**bundle.provenance, "parity_task": True},
        )
    return bundle


def _idx_file(root: Path, *stems: str) -> Path:
    for stem in stems:
        for suffix in ("-idx3-ubyte", "-idx1-ubyte"):
            for ext in ("", ".gz"):
                p = root / f"{stem}{suffix}{ext}"
                if p.exists():
                    return p
    raise FileNotFoundError(f"no IDX file for {stems} under {root}")


# ---------------------------------------------------------------------------
# commands


def cmd_datagen(args: argparse.Namespace) -> int:
    cfg = config.load(args.config) if args.config else config.ExperimentConfig()
    sec = cfg.data
    if args.source:
        sec = config.DataSection(**{**config.dataclasses.asdict(sec), "source": args.source})
    if args.seed is not None:
        sec = config.DataSection(**{**config.dataclasses.asdict(sec), "seed": args.seed})
    if args.path:
        sec = config.DataSection(**{**config.dataclasses.asdict(sec), "path": args.path})
    out = Path(args.out)
    if args.idx:
        paths = data.export_mnist_idx(out, sec.classes, sec.test_fraction, sec.seed)
        print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
        return EXIT_OK
    bundle = load_dataset(sec)
    path = data.save_bundle(bundle, out)
    print(json.dumps({"bundle": str(path), "train": len(bundle.train), "test": len(bundle.test),
                      "num_classes": list(bundle.num_classes)}, indent=2))
    return EXIT_OK


def _report(result, bundle, spec: Optional[ForgetSpec], meta: dict) -> analysis.MetricsReport:
    acc, acc_f = analysis.evaluate_snapshot(result.final, bundle.test, spec, bundle.num_classes)
    return analysis.MetricsReport(
        acc=acc,
        acc_f=acc_f,
        acc_series=[r["acc"] for r in result.rounds],
        acc_f_series=[r["acc_f"] for r in result.rounds],
        metadata=meta,
    )


def cmd_run(args: argparse.Namespace) -> int:
    cfg = config.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out)
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    config.save(cfg, out / "config.toml")
    bundle = load_dataset(cfg.data)
    fed = cfg.federation_config()
    spec = fed.forget

    t0 = time.perf_counter()
    res = run_federation(fed, bundle, out / "rounds.jsonl", check_oracle=cfg.run.check_oracle)
    runtime = {"federation": time.perf_counter() - t0}
    nn.save_checkpoint(res.final, ckpt / "final.ckpt")
    if cfg.run.save_round_models:
        (ckpt / "rounds").mkdir(exist_ok=True)
        for r, theta in enumerate(res.models):
            nn.save_checkpoint(res.final.with_theta(theta), ckpt / "rounds" / f"round_{r:04d}.ckpt")
    meta = {"designated": list(res.designated), "num_params": res.final.dim, "digest": res.digest}
    if cfg.run.check_oracle:
        meta["oracle_max_deviation"] = max(res.oracle_deviation)
    metrics: dict = {"efu": _report(res, bundle, spec, meta).to_dict()}

    if cfg.run.retrain:
        t0 = time.perf_counter()
        rt = full_retrain_baseline(fed, bundle, out / "retrain_rounds.jsonl")
        runtime["retrain"] = time.perf_counter() - t0
        nn.save_checkpoint(rt.final, ckpt / "retrain.ckpt")
        metrics["retrain"] = _report(rt, bundle, spec, {"digest": rt.digest}).to_dict()
        metrics["epsilon"] = analysis.prediction_gap(res.final, rt.final, bundle.test.x)
        if cfg.run.retrain_seed_b >= 0:
            rb = full_retrain_baseline(fed, bundle, out / "retrain_b_rounds.jsonl", train_seed=cfg.run.retrain_seed_b)
            nn.save_checkpoint(rb.final, ckpt / "retrain_b.ckpt")
            metrics["retrain_b"] = _report(rb, bundle, spec, {"digest": rb.digest}).to_dict()
            metrics["epsilon_retrain_pair"] = analysis.prediction_gap(rt.final, rb.final, bundle.test.x)
    metrics["runtime_seconds"] = runtime
    analysis.write_json(out / "metrics.json", metrics)
    print(json.dumps({"run": str(out), "digest": res.digest, "acc": metrics["efu"]["acc"],
                      "acc_f": metrics["efu"]["acc_f"], "epsilon": metrics.get("epsilon")}, indent=2))
    return EXIT_OK


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingRunArtifacts(f"missing {path}")
    return path


def _counterfactual_model(path: Path) -> nn.ModelParams:
    if path.is_dir():
        return nn.load_checkpoint(_require(path / "checkpoints" / "final.ckpt"))
    return nn.load_checkpoint(_require(path))


def cmd_analyze(args: argparse.Namespace) -> int:
    run = Path(args.run)
    cfg = config.load(_require(run / "config.toml"))
    rounds = read_round_log(_require(run / "rounds.jsonl"))
    final = nn.load_checkpoint(_require(run / "checkpoints" / "final.ckpt"))
    reports = Path(args.out) if args.out else run / "reports"
    reports.mkdir(parents=True, exist_ok=True)

    round_dir = run / "checkpoints" / "rounds"
    paths = sorted(round_dir.glob("round_*.ckpt")) if round_dir.exists() else []
    if len(paths) != len(rounds):
        raise MissingRunArtifacts(f"expected {len(rounds)} round checkpoints under {round_dir}, found {len(paths)}")
    series = analysis.param_mse_drift([nn.load_checkpoint(p) for p in paths])
    analysis.write_csv(reports / "drift.csv", ["round", "mse", "normalized"], analysis.drift_rows(series))

    comm = analysis.comm_size(rounds, final.dim)
    cols = list(comm[0]) if comm else ["round"]
    analysis.write_csv(reports / "comm.csv", cols, [[row[c] for c in cols] for row in comm])

    timing = analysis.timing_report(rounds)
    analysis.write_csv(
        reports / "timing.csv", ["round", "mean", "std", "clients"],
        [[r["round"], r["mean"], r["std"], r["clients"]] for r in timing["per_round"]],
    )
    analysis.write_json(reports / "timing_summary.json", {k: v for k, v in timing.items() if k != "per_round"})

    indist = analysis.indistinguishability_report(analysis.update_records(rounds))
    analysis.write_json(reports / "indistinguishability.json", indist.to_dict())

    cf_path = Path(args.counterfactual) if args.counterfactual else None
    if cf_path is None and (run / "checkpoints" / "retrain.ckpt").exists():
        cf_path = run / "checkpoints" / "retrain.ckpt"
    summary = {"drift_rows": len(series), "indistinguishable": indist.passed}
    if cf_path is not None:
        cf = _counterfactual_model(cf_path)
        bundle = load_dataset(cfg.data)
        spec = cfg.forget_spec()
        eps = analysis.prediction_gap(final, cf, bundle.test.x)
        rows = []
        for name, model in (("EFU", final), ("Full Retrain (FedAvg)", cf)):
            acc, acc_f = analysis.evaluate_snapshot(model, bundle.test, spec, bundle.num_classes)
            rows.append([name, acc, "" if acc_f is None else acc_f])
        analysis.write_csv(reports / "comparison.csv", ["method", "Acc", "Acc_f"], rows)
        analysis.write_json(reports / "epsilon.json", {"epsilon": eps, "counterfactual": str(cf_path)})
        summary["epsilon"] = eps
    print(json.dumps(summary, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedunlearn", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("datagen", help="build a dataset bundle or export the bundled MNIST subset as IDX")
    g.add_argument("--config", help="take the [data] section from this config")
    g.add_argument("--out", required=True)
    g.add_argument("--source", choices=config.DATA_SOURCES)
    g.add_argument("--path", help="IDX directory or saved bundle")
    g.add_argument("--seed", type=int)
    g.add_argument("--idx", action="store_true", help="write train/test IDX files instead of a bundle")
    g.set_defaults(func=cmd_datagen)

    r = sub.add_parser("run", help="run the encrypted federation (and the retrain baseline)")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, help="override federation.train_seed")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="write drift, comm, timing and indistinguishability reports")
    a.add_argument("run")
    a.add_argument("--counterfactual", help="run directory or checkpoint of a model trained without the forget set")
    a.add_argument("--out", help="report directory (default <run>/reports)")
    a.set_defaults(func=cmd_analyze)
    return p


def _fail(code: int, category: str, exc: BaseException) -> int:
    print(json.dumps({"error": category, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except MissingRunArtifacts as exc:
        return _fail(EXIT_ARTIFACTS, "artifacts", exc)
    except (data.MalformedIDX, data.InconsistentCounts, DatasetTooSmall, EmptyForgetSet, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except DMCFEError as exc:
        return _fail(EXIT_CRYPTO, "crypto", exc)
    except Exception as exc:  # noqa: BLE001 - surfaced as a categorised exit code
        log.debug("run failed", exc_info=True)
        return _fail(EXIT_RUN, "run", exc)


if __name__ == "__main__":
    sys.exit(main())
