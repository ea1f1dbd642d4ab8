"""Filter vs dead reckoning on the 60 s circle scenario over several seeds."""

import argparse

from lsckf.experiments import closed_loop_trial


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--duration", type=float, default=60.0)
    args = ap.parse_args()
    print(f"{'seed':>4} {'final_m':>8} {'dr_m':>8} {'ratio':>6} {'rmse_m':>7} {'nees':>6} {'maxtrP':>7} {'upd':>5} {'t_s':>5}")
    worst = 0.0
    for seed in range(args.seeds):
        t = closed_loop_trial(seed, args.duration)
        ratio = t.final_err / t.final_err_dr
        worst = max(worst, ratio)
        print(
            f"{seed:4d} {t.final_err:8.3f} {t.final_err_dr:8.3f} {ratio:6.3f} {t.rmse_pos:7.3f} "
            f"{t.nees_mean:6.2f} {t.max_trace_P:7.3f} {t.update_ratio:5.3f} {t.runtime_s:5.1f}",
            flush=True,
        )
    print(f"worst filter/dead-reckoning ratio: {worst:.3f}")


if __name__ == "__main__":
    main()
