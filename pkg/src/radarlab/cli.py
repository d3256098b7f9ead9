"""Command-line driver.

Pipeline:   train, protect, attack, detect, recover
Experiments: detection-sweep, recovery-table, miss-rate, group-collision,
             knowledgeable, overhead

Exit status: 0 success / no attack found, 3 detect flagged at least one
group, 1 bad input (malformed or mismatched files), 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import attacker, baselines, codec, experiments as ex
from .qnn import (accuracy, gaussian_clusters, load_dataset_csv, load_model, save_dataset_csv,
                  save_model, train_tiny)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ATTACK = 3

log = logging.getLogger("radarlab")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _interleave(text: str) -> tuple[bool, ...]:
    table = {"on": (True,), "off": (False,), "both": (True, False)}
    if text not in table:
        raise argparse.ArgumentTypeError("interleave must be on, off or both")
    return table[text]


def _dataset(args):
    if getattr(args, "dataset", None):
        return load_dataset_csv(args.dataset)
    return ex.lab_dataset()


def _write_rows(rows, args) -> None:
    if args.out:
        ex.write_results(rows, args.out)
        log.info("wrote %d rows to %s", len(rows), args.out)
    else:
        ex.write_results(rows, sys.stdout)


# -- pipeline ----------------------------------------------------------------------

def cmd_train(args) -> int:
    if args.data == "lab":
        ds = ex.lab_dataset()
    elif args.data == "clusters":
        ds = gaussian_clusters(seed=args.seed)
    else:
        ds = load_dataset_csv(args.data)
    if args.data == "lab" and args.hidden is None:
        model = ex.lab_model(ds, seed=args.seed)
    else:
        model = train_tiny(ds, hidden=args.hidden or (32, 16), epochs=args.epochs, l1=args.l1, seed=args.seed)
    save_model(model, args.out)
    if args.save_data:
        save_dataset_csv(ds, args.save_data)
    print(f"test accuracy {model.baseline_accuracy:.4f} -> {args.out}")
    return EXIT_OK


def cmd_protect(args) -> int:
    model = load_model(args.model)
    cfg = codec.make_config(len(model.layers), args.group_size, interleave=not args.no_interleave,
                            width=args.width, offset=args.offset, stride=args.stride, master_seed=args.seed)
    store = codec.protect(model, cfg)
    codec.save_store(store, args.out)
    print(f"{store.n_bits} signature bits ({codec.bits_to_kb(store.n_bits):.3f} KB) -> {args.out}")
    return EXIT_OK


def cmd_attack(args) -> int:
    model = load_model(args.model)
    ds = _dataset(args)
    spec = ex.ExperimentSpec("attack", n_bf=args.n_bf, seed=args.seed, batch_size=args.batch_size)
    x, y = ex.attack_batch(ds, spec, 0)
    if args.kind == "pbfa":
        prof, attacked = attacker.pbfa(model, x, y, args.n_bf, batch_id=f"{args.seed}:0")
    elif args.kind == "msb1":
        prof, attacked = attacker.restricted_pbfa(model, x, y, args.n_bf, batch_id=f"{args.seed}:0")
    elif args.kind == "paired":
        prof, attacked = attacker.paired_attack(model, x, y, args.n_bf, args.assumed_group_size)
    else:
        prof, attacked = attacker.random_attack(model, args.n_bf, seed=args.seed)
    save_model(attacked, args.out)
    if args.profile:
        attacker.save_profiles([prof], args.profile)
    print(f"{len(prof)} flips, accuracy {accuracy(model, ds.x_test, ds.y_test):.4f} -> "
          f"{accuracy(attacked, ds.x_test, ds.y_test):.4f}")
    return EXIT_OK


def cmd_detect(args) -> int:
    model = load_model(args.model)
    store = codec.load_store(args.store)
    flips = attacker.load_profiles(args.profile)[0] if args.profile else None
    report = codec.detect(model, store, flips)
    text = json.dumps(report.to_dict(), indent=1)
    if args.report:
        Path(args.report).write_text(text)
    else:
        print(text)
    return EXIT_ATTACK if report.attack_detected else EXIT_OK


def cmd_recover(args) -> int:
    model = load_model(args.model)
    store = codec.load_store(args.store)
    report = codec.detect(model, store)
    codec.recover(model, report, store.config)
    save_model(model, args.out)
    msg = f"zeroed {report.n_flagged} groups -> {args.out}"
    if args.dataset:
        ds = load_dataset_csv(args.dataset)
        msg += f" (accuracy {accuracy(model, ds.x_test, ds.y_test):.4f})"
    print(msg)
    return EXIT_OK


# -- experiments ---------------------------------------------------------------------

def _spec(args, name: str) -> ex.ExperimentSpec:
    return ex.ExperimentSpec(name, args.model, args.dataset, args.group_sizes, args.interleave,
                             (args.width,), args.stride, args.offset, args.n_bf, args.rounds,
                             args.seed, args.batch_size, args.threads, args.out)


def cmd_detection_sweep(args) -> int:
    spec = _spec(args, "detection-sweep")
    model, ds = ex.resolve(spec)
    _write_rows(ex.detection_sweep(model, ds, spec), args)
    return EXIT_OK


def cmd_recovery_table(args) -> int:
    spec = _spec(args, "recovery-table")
    model, ds = ex.resolve(spec)
    _write_rows(ex.recovery_table(model, ds, spec, n_bf_values=args.n_bf_values), args)
    return EXIT_OK


def cmd_miss_rate(args) -> int:
    rows = ex.miss_rate_rows(args.group_sizes, layer_size=args.layer_size, n_flips=args.n_flips,
                             rounds=args.rounds, seed=args.seed, interleave=args.interleave[0],
                             stride=args.stride, offset=args.offset, width=args.width)
    _write_rows(rows, args)
    return EXIT_OK


def cmd_group_collision(args) -> int:
    profiles = attacker.load_profiles(args.profiles)
    if args.model:
        sizes = load_model(args.model).layer_sizes
    elif args.layer_sizes:
        sizes = list(args.layer_sizes)
    else:
        raise ValueError("group-collision needs --model or --layer-sizes")
    _write_rows(ex.group_collision(profiles, sizes, args.group_sizes, args.offset), args)
    return EXIT_OK


def cmd_save_profiles(args) -> int:
    spec = _spec(args, "profiles")
    model, ds = ex.resolve(spec)
    attacker.save_profiles(ex.pbfa_profiles(model, ds, spec), args.out)
    return EXIT_OK


def cmd_knowledgeable(args) -> int:
    spec = _spec(args, "knowledgeable")
    model, ds = ex.resolve(spec)
    _write_rows(ex.knowledgeable(model, ds, spec), args)
    return EXIT_OK


def cmd_overhead(args) -> int:
    rows = []
    model = ds = rec = None
    spec = _spec(args, "overhead")
    if args.with_recovery:
        model, ds = ex.resolve(spec)
        rec = ex.recovery_table(model, ds, spec, n_bf_values=(args.n_bf,))
    rows += ex.overhead(args.architectures, args.storage_group_sizes, args.codes, model, ds, rec, spec)
    _write_rows(rows, args)
    if args.table:
        for arch in args.architectures:
            sizes = [n for _, n in codec.load_architecture(arch)]
            table = [r for G in args.storage_group_sizes
                     for r in baselines.code_storage_compare(sizes, G, args.codes)]
            path = Path(args.table)
            baselines.write_comparison_csv(table, path.with_name(f"{path.stem}_{arch}{path.suffix}"))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def _experiment_flags(p, rounds=100, groups=(4, 8, 16, 32)):
    p.add_argument("--model", help="model JSON (default: train the lab model)")
    p.add_argument("--dataset", help="dataset CSV (default: the lab digits split)")
    p.add_argument("-G", "--group-sizes", type=_ints, default=groups, help="comma-separated G values")
    p.add_argument("--interleave", type=_interleave, default=(True, False), help="on, off or both")
    p.add_argument("--stride", type=int, default=None, help="interleave distance N_W (default: spread)")
    p.add_argument("--offset", type=int, default=3)
    p.add_argument("--width", type=int, choices=(2, 3), default=2, help="signature bits")
    p.add_argument("--n-bf", type=int, default=10)
    p.add_argument("--rounds", type=int, default=rounds)
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--batch-size", type=int, default=128, help="attack batch size")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-o", "--out", help="output path (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="radarlab", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and quantize a model")
    p.add_argument("--data", default="lab", help="lab, clusters, or a dataset CSV path")
    p.add_argument("--hidden", type=_ints, default=None)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--l1", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-data", help="also write the dataset CSV here")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("protect", help="compute the golden signature store")
    p.add_argument("--model", required=True)
    p.add_argument("-G", "--group-size", type=int, default=8)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--offset", type=int, default=3)
    p.add_argument("--width", type=int, choices=(2, 3), default=2)
    p.add_argument("--no-interleave", action="store_true")
    p.add_argument("--seed", type=int, default=0, help="master seed for the layer keys")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("attack", help="flip weight bits")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset")
    p.add_argument("--kind", choices=("pbfa", "msb1", "paired", "random"), default="pbfa")
    p.add_argument("--n-bf", type=int, default=10)
    p.add_argument("--assumed-group-size", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", help="write the attack profile JSON here")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("detect", help="check a model against a golden store (exit 3 if flagged)")
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--profile", help="attack profile for per-flip attribution")
    p.add_argument("--report", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("recover", help="zero every flagged group")
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--dataset")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("detection-sweep", help="mean detected flips per G and interleave")
    _experiment_flags(p)
    p.set_defaults(func=cmd_detection_sweep)

    p = sub.add_parser("recovery-table", help="attacked and recovered accuracy")
    _experiment_flags(p)
    p.add_argument("--n-bf-values", type=_ints, default=(5, 10))
    p.set_defaults(func=cmd_recovery_table)

    p = sub.add_parser("miss-rate", help="Monte Carlo miss rate of random MSB flips")
    p.add_argument("-G", "--group-sizes", type=_ints, default=(16, 32))
    p.add_argument("--layer-size", type=int, default=512)
    p.add_argument("--n-flips", type=int, default=10)
    p.add_argument("--rounds", type=int, default=1_000_000)
    p.add_argument("--interleave", type=_interleave, default=(True,))
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--offset", type=int, default=3)
    p.add_argument("--width", type=int, choices=(2, 3), default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_miss_rate)

    p = sub.add_parser("profiles", help="run PBFA rounds and save the profiles")
    _experiment_flags(p)
    p.set_defaults(func=cmd_save_profiles)

    p = sub.add_parser("group-collision", help="multi-flip-per-group proportion vs G")
    p.add_argument("--profiles", required=True)
    p.add_argument("--model")
    p.add_argument("--layer-sizes", type=_ints)
    p.add_argument("-G", "--group-sizes", type=_ints, default=(1, 2, 4, 8, 16, 32, 64))
    p.add_argument("--offset", type=int, default=3)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_group_collision)

    p = sub.add_parser("knowledgeable", help="paired and MSB-1 attackers")
    _experiment_flags(p, rounds=20, groups=(8,))
    p.set_defaults(func=cmd_knowledgeable)

    p = sub.add_parser("overhead", help="storage of signatures vs CRC/Hamming/parity")
    _experiment_flags(p, rounds=20)
    p.add_argument("--architectures", type=lambda s: tuple(s.split(",")), default=("resnet20", "resnet18"))
    p.add_argument("--storage-group-sizes", type=_ints, default=(8, 16, 32, 64, 128, 256, 512))
    p.add_argument("--codes", type=lambda s: tuple(s.split(",")),
                   default=("radar2", "radar3", "crc7", "crc10", "crc13", "hamming", "parity"))
    p.add_argument("--with-recovery", action="store_true",
                   help="join toy-model recovery accuracy and wall-clock ratio")
    p.add_argument("--table", help="also write per-architecture comparison CSVs (stem_<arch>.csv)")
    p.set_defaults(func=cmd_overhead)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:  # includes malformed and mismatched files
        print(f"radarlab: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
