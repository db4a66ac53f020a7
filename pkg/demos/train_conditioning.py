"""Train a small pair network briefly and see the priors start to pay off.

Runs a few hundred optimization steps on streaming synthetic pairs
(each step draws fresh scenes, with a random subset of the five priors
attached per pair), then evaluates held-out pairs under different
prior subsets.  At this scale the numbers are rough; the point is to
watch the machinery run end to end in a couple of minutes.  A longer
run of the same loop is what the eval guiding-trend suite benchmarks.
"""

import argparse
import time

from pointmaps.benchmarks import evaluate_subset, held_out_samples
from pointmaps.nn.model import NetConfig
from pointmaps.nn.train import train_toy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--pairs", type=int, default=16)
    args = ap.parse_args()

    cfg = NetConfig(patch_size=8, dim=32, enc_blocks=2, dec_blocks=2, heads=4,
                    seed=args.seed)
    start = time.perf_counter()
    net, history = train_toy(cfg, steps=args.steps, batch_size=4, seed=args.seed,
                             pool_size=0, image_size=args.size, crop_margin=8,
                             log=print, log_every=max(args.steps // 8, 1))
    print(f"trained {args.steps} steps in {time.perf_counter() - start:.0f}s "
          f"(loss {history[0]:.0f} -> {history[-1]:.0f})")

    samples = held_out_samples(args.seed, args.pairs, image_size=args.size)
    print(f"\nheld-out evaluation, {args.pairs} pairs:")
    print(f"{'priors':24s} {'rel%':>8s} {'tau%':>8s} {'rra2%':>8s}")
    for slots in ((), ("d1", "d2"), ("p12",), ("k1", "k2", "d1", "d2", "p12")):
        r = evaluate_subset(net, samples, slots)
        print(f"{','.join(slots) or '(none)':24s} {r.depth_rel:8.2f} "
              f"{r.depth_tau:8.2f} {r.rra_at:8.2f}")


if __name__ == "__main__":
    main()
