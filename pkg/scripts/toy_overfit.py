"""Overfit a small SegResNet on one 32³ phantom and print the loss and Dice trajectory."""
import argparse
import json

from longiseg.experiments import toy_overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--init-filters", type=int, default=4)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="optional JSON file for the full loss trace")
    args = ap.parse_args()
    res = toy_overfit(args.steps, args.init_filters, args.lr, args.size, args.seed)
    for i, m in enumerate(res.window_means):
        print(f"steps {20 * i:4d}-{20 * i + 19:4d}  mean loss {m:.4f}")
    print(f"training Dice {res.dice:.4f} after {args.steps} steps ({res.seconds:.0f} s)")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"dice": res.dice, "step_losses": res.step_losses, "seconds": res.seconds}, fh, indent=2)


if __name__ == "__main__":
    main()
