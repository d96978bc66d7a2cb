"""Train the toy biped tracking controller, then measure tracking quality and keyframe correction."""
import argparse
import time

from inbetween.experiments import correction_experiment, evaluate_tracker, train_tracker
from inbetween.rl import save_policy, write_history


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-drift", type=float, default=0.08, help="root drift (m) in the training references")
    ap.add_argument("--drift", type=float, default=0.06, help="root drift (m) in the correction clips")
    ap.add_argument("--window", type=int, default=10)
    ap.add_argument("--log", default="controller_train.csv")
    ap.add_argument("--policy", default="policy.ibck")
    args = ap.parse_args()
    t0 = time.time()

    def progress(it, row, policy):
        if it % 50 == 0:
            print(f"iteration {it}: mean reward {row['mean_reward']:.3f} ({time.time() - t0:.0f}s)", flush=True)
    policy, history, character, env = train_tracker(args.iterations, args.seed, max_drift=args.max_drift,
                                                    callback=progress)
    write_history(args.log, history)
    save_policy(args.policy, policy)
    ev = evaluate_tracker(policy, character, env)
    print(f"held-out tracking: mean reward {ev.mean_reward:.3f} (threshold {0.7 * 2.201:.3f}), "
          f"max foot penetration {ev.max_foot_penetration * 1e3:.2f} mm")
    for seed in range(3):
        r = correction_experiment(policy, character, env, seed, drift=args.drift, window=args.window)
        print(f"correction seed {seed}: keyframe root error {100 * r.first_error:.2f} cm -> "
              f"{100 * r.second_error:.2f} cm")


if __name__ == "__main__":
    main()
