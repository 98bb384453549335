"""MNIST accuracy table: rows are (p, algorithm), columns are SNR mean/std over seeds."""

import argparse
import logging
from pathlib import Path

from acpc_ota.config import parse_config
from acpc_ota.harness import sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/table1")
    ap.add_argument("--p", default="1,10", help="comma-separated non-IID levels")
    ap.add_argument("--snr-db", default="-1,20", help="comma-separated SNR values in dB")
    ap.add_argument("--algorithms", default="acpc,uniform,naive")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--rounds", type=int, default=200)
    ap.add_argument("--config", type=Path, help="INI file supplying every other knob")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    template = parse_config(args.config, {"seed": 0, "rounds": args.rounds, "out": args.out}
                            if args.config is None else {"rounds": args.rounds, "out": args.out})
    axes = {
        "non_iid_p": [int(v) for v in args.p.split(",")],
        "algorithm": args.algorithms.split(","),
        "snr_db": [float(v) for v in args.snr_db.split(",")],
        "seed": [int(v) for v in args.seeds.split(",")],
    }
    rows = sweep(template, axes)
    failed = [r for r in rows if r["status"] != "ok"]
    print((Path(args.out) / "table.csv").read_text(), end="")
    print(f"{len(rows)} runs, {len(failed)} failed")
    return 1 if failed else 0


if __name__ == "__main__":
    raise SystemExit(main())
