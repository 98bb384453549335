"""Min grad-norm^2 of ACPC on random quadratics as the horizon grows (sqrt step schedule)."""

import argparse

import numpy as np

from acpc_ota.experiments import acpc_on_quadratic


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--horizons", default="25,100,400,1600")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--snr-db", type=float, default=10.0)
    ap.add_argument("--clients", type=int, default=4)
    args = ap.parse_args()

    horizons = [int(v) for v in args.horizons.split(",")]
    print("T,median_min_grad_norm2,median_bound_total")
    for T in horizons:
        runs = [acpc_on_quadratic(s, rounds=T, m=args.clients, snr_db=args.snr_db, schedule="sqrt")
                for s in range(args.seeds)]
        grad = float(np.median([r.min_grad_norm2 for r in runs]))
        bound = float(np.median([r.bound.total for r in runs]))
        print(f"{T},{grad!r},{bound!r}")


if __name__ == "__main__":
    main()
