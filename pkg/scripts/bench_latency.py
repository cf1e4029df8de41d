"""Wall-clock of one composed-score round versus worker count, with a synthetic per-call cost."""

import argparse

from diffcollage.cli import bench_latency


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lengths", type=int, nargs="+", default=[2, 4, 8, 16])
    ap.add_argument("--workers", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--cost-ms", type=float, default=5.0)
    ap.add_argument("--mode", choices=["sleep", "spin"], default="sleep",
                    help="sleep releases the GIL like a native kernel; spin holds it")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    rows, identical = bench_latency(args.lengths, args.workers, args.cost_ms, args.mode, args.repeats)
    print("length workers mean_ms speedup")
    for length, w, ms, sp in rows:
        print(f"{length:6d} {w:7d} {ms:7.2f} {sp:7.2f}")
    print(f"outputs identical across worker counts: {identical}")


if __name__ == "__main__":
    main()
