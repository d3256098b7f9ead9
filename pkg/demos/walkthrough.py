"""Train, protect, attack, detect and recover, end to end on the lab model.

    python3 demos/walkthrough.py [--group-size 8] [--flips 10]
"""
import argparse

from radarlab import experiments as ex
from radarlab.attacker import pbfa
from radarlab.codec import bits_to_kb, detect, make_config, protect, recover
from radarlab.qnn import accuracy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--group-size", type=int, default=8)
    ap.add_argument("--flips", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = ex.lab_dataset()
    model = ex.lab_model(ds, seed=args.seed)
    acc = lambda m: accuracy(m, ds.x_test, ds.y_test)  # noqa: E731
    print(f"lab model {model.layer_sizes} weights per layer, clean accuracy {acc(model):.3f}")

    cfg = make_config(len(model.layers), args.group_size, master_seed=args.seed)
    store = protect(model, cfg)
    print(f"golden store: {store.n_bits} bits ({bits_to_kb(store.n_bits):.2f} KB) for G={args.group_size}")

    x, y = ex.attack_batch(ds, ex.ExperimentSpec("demo", seed=args.seed), 0)
    profile, attacked = pbfa(model, x, y, args.flips)
    print(f"\nPBFA, {len(profile)} flips -> accuracy {acc(attacked):.3f}")
    for f in profile:
        print(f"  layer {f.layer} weight {f.flat_index:6d} bit {f.bit_position} {f.direction} "
              f"(was {f.pre_flip_weight:4d})  loss {f.loss_after:.3f}")

    report = detect(attacked, store, profile)
    print(f"\nflagged {report.n_flagged} groups; {report.detected_count}/{len(profile)} flips sit in one")
    recover(attacked, report, cfg)
    print(f"after zeroing the flagged groups: accuracy {acc(attacked):.3f}")


if __name__ == "__main__":
    main()
