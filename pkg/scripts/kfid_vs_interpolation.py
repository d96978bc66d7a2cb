"""Toy diffusion model against linear interpolation on K-FID, over several seeds."""
import argparse
import csv
import time

from inbetween.experiments import kfid_experiment, metric_encoder


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--interval", type=int, default=30)
    ap.add_argument("--out", default="kfid.csv")
    args = ap.parse_args()
    t0 = time.time()
    encoder = metric_encoder()
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "kfid_model", "kfid_interpolation", "kerr_model_cm", "kerr_interpolation_cm"])
        for seed in args.seeds:
            r = kfid_experiment(seed, encoder, steps=args.steps, interval=args.interval)
            w.writerow([seed, r.kfid_model, r.kfid_interpolation, 100 * r.kerr_model, 100 * r.kerr_interpolation])
            fh.flush()
            print(f"seed {seed}: K-FID model {r.kfid_model:.3f} interpolation {r.kfid_interpolation:.3f} "
                  f"({time.time() - t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
