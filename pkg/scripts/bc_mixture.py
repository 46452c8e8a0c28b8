"""Fit the flow policy by plain flow matching on a two-mode 1D dataset.

Prints the fraction of generated samples near each mode.
"""

import argparse

import numpy as np

from fmer.agent import fit_behavior_cloning
from fmer.flowpolicy import sample_candidates
from fmer.networks import VectorFieldNet


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--modes", type=float, nargs="+", default=[-0.8, 0.8])
    p.add_argument("--updates", type=int, default=1500)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    rng = np.random.default_rng(args.seed)
    modes = np.asarray(args.modes)
    actions = rng.choice(modes, size=(4096, 1))
    states = np.zeros((4096, 1))
    net = VectorFieldNet(1, 1, rng, hidden=args.hidden, n_hidden=3)
    losses = fit_behavior_cloning(net, states, actions, args.updates, args.batch, args.lr, rng)
    print(f"final loss (mean of last 100): {np.mean(losses[-100:]):.4f}")
    samples = sample_candidates(net, np.zeros((1, 1)), args.samples, 10, rng).actions.ravel()
    for m in modes:
        print(f"mass within 0.15 of {m:+.2f}: {np.mean(np.abs(samples - m) < 0.15):.3f}")


if __name__ == "__main__":
    main()
