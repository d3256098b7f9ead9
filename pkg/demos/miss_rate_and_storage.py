"""How often ten random MSB flips slip past the 2-bit signature, and what
the signatures cost next to CRC and Hamming check bits on real layer tables.

    python3 demos/miss_rate_and_storage.py [--rounds 200000]
"""
import argparse

from radarlab import experiments as ex
from radarlab.baselines import code_storage_compare
from radarlab.codec import load_architecture


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rounds", type=int, default=200_000)
    args = ap.parse_args()

    print("miss rate, 512-weight layer, 10 random MSB flips per round")
    for G in (8, 16, 32, 64):
        for il in (True, False):
            r = ex.miss_rate(group_size=G, rounds=args.rounds, interleave=il)
            print(f"  G={G:3d} interleave={'on ' if il else 'off'} {r['misses']:6d}/{r['rounds']} "
                  f"= {r['rate']:.2e}  (95% CI {r['ci_low']:.1e}..{r['ci_high']:.1e})")

    codes = ("radar2", "radar3", "parity", "crc7", "crc13", "hamming")
    for arch in ("resnet20", "resnet18"):
        sizes = [n for _, n in load_architecture(arch)]
        print(f"\n{arch}: {sum(sizes):,} weights, check-bit storage in KB")
        print("     G " + "".join(f"{c:>9}" for c in codes))
        for G in (8, 32, 128, 512):
            rows = code_storage_compare(sizes, G, codes)
            print(f"  {G:4d} " + "".join(f"{r['total_kb']:9.2f}" for r in rows))


if __name__ == "__main__":
    main()
