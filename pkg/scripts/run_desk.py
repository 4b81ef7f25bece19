"""Run the desk-scale class-unlearning scenario end to end.

Exports the bundled 4-digit MNIST subset as IDX (if missing), runs the encrypted
federation plus the retrain baselines through the CLI, then writes the reports.

    python3 scripts/run_desk.py --out runs/desk [--config scripts/configs/desk_classwise.toml]
"""

import argparse
import json
from pathlib import Path

from fedunlearn import cli, config

HERE = Path(__file__).resolve().parent


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(HERE / "configs" / "desk_classwise.toml"))
    p.add_argument("--out", default="runs/desk")
    args = p.parse_args()

    cfg = config.load(args.config)
    if cfg.data.source == "idx" and not Path(cfg.data.path).exists():
        code = cli.main(["datagen", "--config", args.config, "--idx", "--out", cfg.data.path])
        if code:
            raise SystemExit(code)
    for argv in (["run", "--config", args.config, "--out", args.out], ["analyze", args.out]):
        code = cli.main(argv)
        if code:
            raise SystemExit(code)
    metrics = json.loads((Path(args.out) / "metrics.json").read_text())
    print(json.dumps(metrics, indent=2))


if __name__ == "__main__":
    main()
