"""Experiment drivers: detection sweep, recovery table, miss rate, group
collisions, knowledgeable attackers and storage overhead.

Every driver returns a list of :class:`ResultRow` in a long format
(one metric per row) and is a pure function of model, dataset, spec and
master seed. Per-round rows are emitted alongside the aggregates so any
other summary can be recomputed from the CSV.
"""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .attacker import AttackProfile, ALL_BITS, apply_profile, paired_attack, pbfa, profile_stats
from .baselines import DETECT_CRCS, code_storage_compare, detect_with_crc, golden_crcs
from .codec import (GroupMap, LayerConfig, ProtectionConfig, detect, key_signs, load_architecture, make_config,
                    protect, recover, signature_bits)
from .qnn import Dataset, QuantizedModel, accuracy, digits_dataset, forward, load_dataset_csv, load_model, train_tiny
from .rng import substream

SCHEMA_VERSION = 1
RESULT_COLUMNS = ("schema_version", "experiment", "config", "metric", "value",
                  "round", "n", "ci_low", "ci_high")

# desk-scale stand-in for the protected network
LAB_HIDDEN = (128, 128, 128)
LAB_L1 = 3e-4
LAB_EPOCHS = 60


@dataclass
class ResultRow:
    experiment: str
    config: str
    metric: str
    value: float
    round: int | None = None
    n: int = 1
    ci_low: float | None = None
    ci_high: float | None = None

    def __post_init__(self):
        self.value = float(self.value)
        if not math.isfinite(self.value):
            raise ValueError(f"{self.experiment}/{self.metric}: non-finite value {self.value}")

    def as_csv(self) -> dict:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return {"schema_version": SCHEMA_VERSION, "experiment": self.experiment,
                "config": self.config, "metric": self.metric, "value": repr(self.value),
                "round": "" if self.round is None else self.round, "n": self.n,
                "ci_low": fmt(self.ci_low), "ci_high": fmt(self.ci_high)}


def write_results(rows: Sequence[ResultRow], dest) -> None:
    """Long-format CSV to a path or open text file.

    Rows are sorted so the output never depends on round scheduling.
    """
    ordered = sorted(rows, key=lambda r: (r.experiment, r.config, r.metric,
                                          -1 if r.round is None else r.round))
    if hasattr(dest, "write"):
        _write_csv(ordered, dest)
    else:
        with open(dest, "w", newline="") as fh:
            _write_csv(ordered, fh)


def _write_csv(rows, fh) -> None:
    w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.as_csv())


def read_results(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for line, rec in enumerate(reader, start=2):
            if int(rec["schema_version"]) != SCHEMA_VERSION:
                raise ValueError(f"{path}:{line}: schema version {rec['schema_version']}")
            opt = lambda k, cast=float: None if rec[k] == "" else cast(rec[k])  # noqa: E731
            rows.append(ResultRow(rec["experiment"], rec["config"], rec["metric"], float(rec["value"]),
                                  opt("round", int), int(rec["n"]), opt("ci_low"), opt("ci_high")))
    return rows


def lookup(rows: Sequence[ResultRow], metric: str, config: str | None = None, aggregate: bool = True) -> list[ResultRow]:
    return [r for r in rows if r.metric == metric and (config is None or r.config == config)
            and (r.round is None) == aggregate]


def mean_row(experiment: str, config: str, metric: str, values: Sequence[float]) -> ResultRow:
    """Mean with a normal-approximation 95% interval."""
    v = np.asarray(values, dtype=float)
    m = float(v.mean()) if v.size else 0.0
    half = 1.96 * float(v.std(ddof=1)) / math.sqrt(v.size) if v.size > 1 else 0.0
    return ResultRow(experiment, config, metric, m, None, int(v.size), m - half, m + half)


def binomial_ci(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Exact (Clopper-Pearson) interval for k successes in n trials."""
    ci = stats.binomtest(k, n).proportion_ci(confidence_level=level, method="exact")
    return float(ci.low), float(ci.high)


# -- specs and the lab setup ----------------------------------------------------------

@dataclass
class ExperimentSpec:
    name: str
    model_path: str | None = None
    dataset_path: str | None = None
    group_sizes: tuple[int, ...] = (4, 8, 16, 32)
    interleave: tuple[bool, ...] = (True, False)
    widths: tuple[int, ...] = (2,)
    stride: int | None = None
    offset: int = 3
    n_bf: int = 10
    rounds: int = 100
    seed: int = 0
    batch_size: int = 128
    threads: int = 1
    output: str | None = None

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.n_bf < 0:
            raise ValueError("n_bf must be >= 0")
        if not self.group_sizes:
            raise ValueError("need at least one group size")
        for p in (self.model_path, self.dataset_path):
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(p)


def lab_dataset(seed: int = 0) -> Dataset:
    return digits_dataset(seed=seed)


def lab_model(dataset: Dataset | None = None, seed: int = 0) -> QuantizedModel:
    """The reference toy network: digits MLP 64-128-128-128-10, lightly L1-regularised."""
    dataset = dataset if dataset is not None else lab_dataset()
    return train_tiny(dataset, hidden=LAB_HIDDEN, epochs=LAB_EPOCHS, l1=LAB_L1, seed=seed)


def resolve(spec: ExperimentSpec) -> tuple[QuantizedModel, Dataset]:
    ds = load_dataset_csv(spec.dataset_path) if spec.dataset_path else lab_dataset()
    if spec.model_path:
        model = load_model(spec.model_path)
    else:
        model = lab_model(ds, seed=spec.seed)
    model.baseline_accuracy = accuracy(model, ds.x_test, ds.y_test)
    return model, ds


def round_config(model: QuantizedModel, spec: ExperimentSpec, G: int, interleave: bool,
                 rnd: int, width: int | None = None) -> ProtectionConfig:
    """Protection for one round: fresh per-layer keys from the ``key`` substream."""
    keys = substream(spec.seed, "key", rnd).integers(0, 1 << 16, size=len(model.layers))
    return make_config(len(model.layers), G, interleave=interleave,
                       width=width or spec.widths[0], offset=spec.offset, stride=spec.stride,
                       master_seed=spec.seed, keys=[int(k) for k in keys])


def attack_batch(ds: Dataset, spec: ExperimentSpec, rnd: int):
    n = len(ds.y_test)
    idx = substream(spec.seed, "attack", rnd).choice(n, size=min(spec.batch_size, n), replace=False)
    return ds.x_test[idx], ds.y_test[idx]


def _map_rounds(fn: Callable[[int], object], rounds: int, threads: int) -> list:
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, range(rounds)))
    return [fn(r) for r in range(rounds)]


def pbfa_profiles(model: QuantizedModel, ds: Dataset, spec: ExperimentSpec, n_bf: int | None = None,
                  allowed_bits: Sequence[int] = ALL_BITS) -> list[AttackProfile]:
    """One PBFA profile per round on that round's attack batch.

    The attack never sees the protection, so one profile per round is
    reused against every configuration of a sweep.
    """
    n_bf = spec.n_bf if n_bf is None else n_bf

    def one(r):
        x, y = attack_batch(ds, spec, r)
        prof, _ = pbfa(model, x, y, n_bf, allowed_bits=allowed_bits, batch_id=f"{spec.seed}:{r}")
        prof.seed = spec.seed
        return prof

    return _map_rounds(one, spec.rounds, spec.threads)


def _cfg_name(G, interleave, width=2, extra=""):
    return f"G={G},il={int(interleave)},w={width}" + (f",{extra}" if extra else "")


# -- experiments -------------------------------------------------------------------------

def detection_sweep(model: QuantizedModel, ds: Dataset, spec: ExperimentSpec,
                    profiles: Sequence[AttackProfile] | None = None) -> list[ResultRow]:
    """Mean number of injected flips landing in a flagged group, per G and interleave."""
    profiles = profiles if profiles is not None else pbfa_profiles(model, ds, spec)
    rows = []
    for G in spec.group_sizes:
        for il in spec.interleave:
            name = _cfg_name(G, il, spec.widths[0])
            det, flagged = [], []
            for r, prof in enumerate(profiles):
                attacked = apply_profile(model.copy(), prof)
                rep = detect(attacked, protect(model, round_config(model, spec, G, il, r)), prof)
                det.append(rep.detected_count)
                flagged.append(rep.n_flagged)
                rows.append(ResultRow("detection-sweep", name, "detected", rep.detected_count, r))
            rows.append(mean_row("detection-sweep", name, "detected_mean", det))
            rows.append(mean_row("detection-sweep", name, "flagged_groups_mean", flagged))
    return rows


def recovery_table(model: QuantizedModel, ds: Dataset, spec: ExperimentSpec,
                   n_bf_values: Sequence[int] = (5, 10),
                   profiles: Sequence[AttackProfile] | None = None) -> list[ResultRow]:
    """Attacked and post-recovery test accuracy per n_bf, G and interleave.

    PBFA is greedy, so the first k flips of an n-flip profile are exactly the
    k-flip attack on the same batch; one profile per round serves every n_bf.
    """
    top = max(n_bf_values)
    if profiles is None or any(len(p) < top for p in profiles):
        profiles = pbfa_profiles(model, ds, spec, n_bf=top)
    x, y = ds.x_test, ds.y_test
    clean = accuracy(model, x, y)
    rows = [ResultRow("recovery-table", "clean", "clean_accuracy", clean)]
    for n_bf in n_bf_values:
        attacked_models = [apply_profile(model.copy(), AttackProfile(p.flips[:n_bf])) for p in profiles]
        att = [accuracy(m, x, y) for m in attacked_models]
        rows += [ResultRow("recovery-table", f"n_bf={n_bf}", "attacked_accuracy", a, r) for r, a in enumerate(att)]
        rows.append(mean_row("recovery-table", f"n_bf={n_bf}", "attacked_accuracy_mean", att))
        for G in spec.group_sizes:
            for il in spec.interleave:
                name = _cfg_name(G, il, spec.widths[0], f"n_bf={n_bf}")
                rec = []
                for r, (p, am) in enumerate(zip(profiles, attacked_models)):
                    cfg = round_config(model, spec, G, il, r)
                    rep = detect(am, protect(model, cfg), p.flips[:n_bf])
                    acc = accuracy(recover(am.copy(), rep, cfg), x, y)
                    rec.append(acc)
                    rows.append(ResultRow("recovery-table", name, "recovered_accuracy", acc, r))
                rows.append(mean_row("recovery-table", name, "recovered_accuracy_mean", rec))
    return rows


def miss_rate(layer_size: int = 512, group_size: int = 32, n_flips: int = 10,
              rounds: int = 1_000_000, seed: int = 0, interleave: bool = True,
              stride: int | None = None, offset: int = 3, width: int = 2,
              chunk: int = 100_000) -> dict:
    """Monte Carlo probability that a round of random MSB flips raises no flag.

    One fixed random int8 layer and one fixed key. Each round flips the MSB
    of ``n_flips`` distinct weights; the round is a miss iff no group's
    signature changes. Rounds are vectorised: an MSB flip moves the weight
    by -128 (non-negative weight) or +128 (negative weight), so each group's
    checksum after the round is its clean checksum plus the masked sum of
    those moves.
    """
    if not 1 <= n_flips <= layer_size:
        raise ValueError("need 1 <= n_flips <= layer_size")
    rng = substream(seed, "miss-rate")
    weights = rng.integers(-128, 128, size=layer_size)
    key = int(rng.integers(0, 1 << 16))
    cfg = LayerConfig(group_size, stride, offset, key, width, interleave)
    gm = GroupMap.build(layer_size, cfg)
    n_groups = gm.members.shape[0]
    members = np.where(gm.members < layer_size, gm.members, 0)
    padded = np.where(gm.members < layer_size, weights[members], 0)
    clean_m = (padded * key_signs(key, group_size)).sum(axis=1)
    clean_sig = signature_bits(clean_m, width)
    contrib = gm.sign * np.where(weights >= 0, -128, 128)

    misses = 0
    done = 0
    while done < rounds:
        c = min(chunk, rounds - done)
        pos = rng.integers(0, layer_size, size=(c, n_flips))
        # redraw rounds that picked a weight twice; accepted rounds are uniform over distinct sets
        while True:
            s = np.sort(pos, axis=1)
            dup = (np.diff(s, axis=1) == 0).any(axis=1)
            if not dup.any():
                break
            pos[dup] = rng.integers(0, layer_size, size=(int(dup.sum()), n_flips))
        flat = (np.arange(c)[:, None] * n_groups + gm.group[pos]).ravel()
        delta = np.bincount(flat, weights=contrib[pos].ravel(), minlength=c * n_groups)
        delta = delta.reshape(c, n_groups).astype(np.int64)
        now = signature_bits(clean_m[None, :] + delta, width)
        flagged = (now != clean_sig[None, :, :]).any(axis=2).any(axis=1)
        misses += int((~flagged).sum())
        done += c
    lo, hi = binomial_ci(misses, rounds)
    return {"misses": misses, "rounds": rounds, "rate": misses / rounds, "ci_low": lo, "ci_high": hi,
            "layer_size": layer_size, "group_size": group_size, "n_flips": n_flips, "key": key}


def miss_rate_rows(group_sizes: Sequence[int] = (16, 32), **kw) -> list[ResultRow]:
    rows = []
    for G in group_sizes:
        res = miss_rate(group_size=G, **kw)
        name = f"G={G},L={res['layer_size']},flips={res['n_flips']},il={int(kw.get('interleave', True))}"
        rows.append(ResultRow("miss-rate", name, "miss_rate", res["rate"], None, res["rounds"],
                              res["ci_low"], res["ci_high"]))
        rows.append(ResultRow("miss-rate", name, "misses", res["misses"], None, res["rounds"]))
    return rows


def group_collision(profiles: Sequence[AttackProfile], layer_sizes: Sequence[int],
                    group_sizes: Sequence[int] = (1, 2, 4, 8, 16, 32, 64), offset: int = 3) -> list[ResultRow]:
    """Multi-flip-per-group proportion versus G, plus flip bit and weight-range tallies."""
    if not profiles:
        raise ValueError("group-collision needs saved attack profiles")
    st = profile_stats(profiles, layer_sizes, group_sizes, offset)
    n = st["n_profiles"]
    rows = []
    for G, d in st["multi_flip"].items():
        for kind, v in d.items():
            rows.append(ResultRow("group-collision", f"G={G},{kind}", "multi_flip_proportion", v, None, n))
    for k, v in st["bit_counts"].items():
        rows.append(ResultRow("group-collision", "profiles", f"flips_{k}", v, None, st["n_flips"]))
    for k, v in st["weight_ranges"].items():
        rows.append(ResultRow("group-collision", "profiles", f"weights_in_{k}", v, None, st["n_flips"]))
    return rows


def knowledgeable(model: QuantizedModel, ds: Dataset, spec: ExperimentSpec,
                  plain_profiles: Sequence[AttackProfile] | None = None,
                  msb1_budget: int = 60) -> list[ResultRow]:
    """Attackers who know the scheme but not the key or the interleave.

    Paired: every MSB flip gets an opposite-direction MSB companion in the same
    (assumed contiguous) group so the group's sum shifts by a multiple of 256.
    MSB-1: PBFA restricted to bit 6, which the 2-bit signature cannot see when
    flips pair up; compared against the 3-bit signature on the same profiles.
    """
    x, y = ds.x_test, ds.y_test
    plain_profiles = plain_profiles if plain_profiles is not None else pbfa_profiles(model, ds, spec)
    rows = []
    for G in spec.group_sizes:
        paired = []
        for r in range(spec.rounds):
            xb, yb = attack_batch(ds, spec, r)
            prof, _ = paired_attack(model, xb, yb, spec.n_bf, G, batch_id=f"{spec.seed}:{r}")
            paired.append(prof)
        for il in spec.interleave:
            name = _cfg_name(G, il, 2)
            plain_det, prim_det, all_det, rec = [], [], [], []
            for r, (pp, pl) in enumerate(zip(paired, plain_profiles)):
                cfg = round_config(model, spec, G, il, r, width=2)
                store = protect(model, cfg)
                rep = detect(apply_profile(model.copy(), pl), store, pl)
                plain_det.append(rep.detected_count)
                am = apply_profile(model.copy(), pp)
                rep = detect(am, store, pp)
                prim_det.append(sum(rep.flip_detected[i] for i in pp.primaries()))
                all_det.append(rep.detected_count)
                rec.append(accuracy(recover(am, rep, cfg), x, y))
                rows.append(ResultRow("knowledgeable", name, "paired_detected_primaries", prim_det[-1], r))
            rows.append(mean_row("knowledgeable", name, "plain_detected_mean", plain_det))
            rows.append(mean_row("knowledgeable", name, "paired_detected_primaries_mean", prim_det))
            rows.append(mean_row("knowledgeable", name, "paired_detected_all_mean", all_det))
            rows.append(mean_row("knowledgeable", name, "paired_recovered_accuracy_mean", rec))
            rows.append(mean_row("knowledgeable", name, "paired_companions_mean",
                                 [len(p) - len(p.primaries()) for p in paired]))

    # MSB-1 suite: damage-equivalent flip counts and signature width comparison
    G0 = spec.group_sizes[0]
    ratios, det = [], {(w, il): [] for w in (2, 3) for il in spec.interleave}
    for r in range(spec.rounds):
        xb, yb = attack_batch(ds, spec, r)
        msb, msb_model = pbfa(model, xb, yb, spec.n_bf, allowed_bits=(7,))
        target = accuracy(msb_model, x, y)
        # bit-6-only PBFA on the same batch, run until it matches the MSB damage;
        # an attack that never gets there is charged the whole budget
        used, _ = pbfa(model, xb, yb, msb1_budget, allowed_bits=(6,),
                       until=lambda z: accuracy(z, x, y) <= target)
        ratios.append(len(used) / max(spec.n_bf, 1))
        rows.append(ResultRow("knowledgeable", "msb1", "msb1_to_msb_flip_ratio", ratios[-1], r))
        am = apply_profile(model.copy(), used)
        for w in (2, 3):
            for il in spec.interleave:
                rep = detect(am, protect(model, round_config(model, spec, G0, il, r, width=w)), used)
                det[w, il].append(rep.detected_count / len(used))
    rows.append(mean_row("knowledgeable", "msb1", "msb1_to_msb_flip_ratio_mean", ratios))
    for (w, il), v in det.items():
        rows.append(mean_row("knowledgeable", _cfg_name(G0, il, w, "msb1"), "msb1_detection_ratio_mean", v))
    return rows


def timing_ratio(model: QuantizedModel, ds: Dataset, config: ProtectionConfig, repeats: int = 20) -> float:
    """Wall-clock of one full detection pass over one test-set inference pass (informational)."""
    store = protect(model, config)
    t = time.perf_counter()
    for _ in range(repeats):
        forward(model, ds.x_test)
    infer = time.perf_counter() - t
    t = time.perf_counter()
    for _ in range(repeats):
        detect(model, store)
    return (time.perf_counter() - t) / infer


def overhead(architectures: Sequence[str] = ("resnet20", "resnet18"),
             group_sizes: Sequence[int] = (8, 16, 32, 64, 128, 256, 512),
             codes: Sequence[str] = ("radar2", "radar3", "crc7", "crc10", "crc13", "hamming", "parity"),
             model: QuantizedModel | None = None, ds: Dataset | None = None,
             recovery_rows: Sequence[ResultRow] | None = None,
             spec: ExperimentSpec | None = None) -> list[ResultRow]:
    """Check-bit storage per architecture, G and code, plus the toy-model tradeoff."""
    rows = []
    for arch in architectures:
        sizes = [n for _, n in load_architecture(arch)]
        for G in group_sizes:
            for row in code_storage_compare(sizes, G, codes):
                rows.append(ResultRow("overhead", f"arch={arch},G={G},code={row['code']}", "storage_kb",
                                      row["total_kb"]))
    if model is not None and recovery_rows is not None:
        # one tradeoff row pair per (G, interleave, code): signature storage next to recovered accuracy
        for r in recovery_rows:
            if r.metric != "recovered_accuracy_mean":
                continue
            parts = dict(p.split("=") for p in r.config.split(","))
            G, il, code = int(parts["G"]), parts["il"], f"radar{parts['w']}"
            name = f"G={G},il={il},code={code},n_bf={parts['n_bf']}"
            kb = code_storage_compare(model.layer_sizes, G, (code,))[0]["total_kb"]
            rows.append(ResultRow("overhead", name, "tradeoff_storage_kb", kb))
            rows.append(ResultRow("overhead", name, "tradeoff_recovered_accuracy", r.value, None, r.n,
                                  r.ci_low, r.ci_high))
    if model is not None and ds is not None:
        spec = spec or ExperimentSpec("overhead")
        cfg = round_config(model, spec, group_sizes[0], True, 0)
        rows.append(ResultRow("overhead", f"toy,G={group_sizes[0]}", "detect_over_inference_wallclock",
                              timing_ratio(model, ds, cfg)))
    return rows


def crc_detection(model: QuantizedModel, profiles: Sequence[AttackProfile], group_size: int,
                  width: int = 7) -> float:
    """Mean detected flips per round for a contiguous-group CRC of the given width."""
    spec = DETECT_CRCS[width]
    golden = golden_crcs(model, spec, group_size)
    counts = [detect_with_crc(apply_profile(model.copy(), p), golden, spec, group_size, p).detected_count
              for p in profiles]
    return float(np.mean(counts)) if counts else 0.0
