"""Train the desk-scale ensemble, MC-Dropout net and distilled students; print test metrics.

    python3 scripts/run_desk_experiment.py [--modes kl,crd] [--mcd-rate 0.2] [--out results.txt]
"""
import argparse
import logging
import time
from pathlib import Path

from uqd.experiment import DeskConfig, run_desk
from uqd.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--modes", default="kl,crd", help="comma-separated distillation modes")
    ap.add_argument("--members", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=70)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--mcd-rate", type=float, default=0.2, help="0 skips the MC-Dropout network")
    ap.add_argument("--out", default=None, help="also write the summary here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = DeskConfig(members=args.members, modes=tuple(m for m in args.modes.split(",") if m),
                     mcd_rate=args.mcd_rate, train=TrainConfig(epochs=args.epochs, lr_init=args.lr))
    t0 = time.perf_counter()
    text = run_desk(cfg).summary() + f"wall clock {time.perf_counter() - t0:.1f}s\n"
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)


if __name__ == "__main__":
    main()
