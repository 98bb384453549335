"""Monte-Carlo steady-state error of noisy SGD against the closed-form floor on a grid."""

import argparse
import itertools

from acpc_ota import streams
from acpc_ota.oracles import NoisySgdSpec, lb_rhs, simulate_noisy_sgd


def floats(text):
    return [float(v) for v in text.split(",")]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--eta", default="0.1,0.5,0.9")
    ap.add_argument("--sigma", default="0.2,1.0")
    ap.add_argument("--sigma-c", default="0.0,0.1,0.5")
    ap.add_argument("--reps", type=int, default=10_000)
    ap.add_argument("--T", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print("eta,sigma,sigma_c,floor,estimate,stderr,ratio")
    grid = itertools.product(floats(args.eta), floats(args.sigma), floats(args.sigma_c))
    for k, (eta, s, sc) in enumerate(grid):
        spec = NoisySgdSpec(L=1.0, eta=eta, sigma=s, sigma_c=sc, T=args.T)
        est = simulate_noisy_sgd(spec, args.reps, streams.stream(args.seed, streams.ORACLE, k))
        floor = lb_rhs(spec)
        ratio = est.mean / floor if floor > 0 else float("nan")
        print(f"{eta},{s},{sc},{floor:.6g},{est.mean:.6g},{est.stderr:.3g},{ratio:.4f}")


if __name__ == "__main__":
    main()
