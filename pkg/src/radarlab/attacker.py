"""Weight bit-flip adversaries and attack-profile statistics.

``pbfa`` is the progressive, gradient-guided search: each step ranks every
flippable bit of every layer by a first-order loss estimate, keeps the top
``k`` per layer, measures the true loss of each candidate on the attack batch
and commits the single worst one.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .codec import GroupMap, LayerConfig
from .qnn import ModelFormatError, QuantizedModel, bit_of, flip_bit, load_json, loss, loss_and_grad
from .rng import substream

PROFILE_MAGIC = "radarlab-attack-profile"
PROFILE_VERSION = 1
ALL_BITS = tuple(range(8))
WEIGHT_RANGES = ((-128, -32), (-32, 0), (0, 32), (32, 128))
RANGE_LABELS = ("(-128,-32)", "(-32,0)", "(0,32)", "(32,127)")


@dataclass
class BitFlip:
    layer: int
    flat_index: int
    bit_position: int
    direction: str  # "0->1" or "1->0"
    pre_flip_weight: int
    role: str = "pbfa"
    loss_after: float | None = None
    paired_with: int | None = None

    def __post_init__(self):
        expected = "1->0" if bit_of(self.pre_flip_weight, self.bit_position) else "0->1"
        if self.direction != expected:
            raise ValueError(f"direction {self.direction} inconsistent with weight "
                             f"{self.pre_flip_weight} bit {self.bit_position}")

    @property
    def address(self) -> tuple[int, int, int]:
        return self.layer, self.flat_index, self.bit_position


@dataclass
class AttackProfile:
    flips: list[BitFlip] = field(default_factory=list)
    kind: str = "pbfa"
    batch_id: str | None = None
    seed: int | None = None
    initial_loss: float | None = None
    skipped: list[int] = field(default_factory=list)  # primaries left without a companion

    def __len__(self):
        return len(self.flips)

    def __iter__(self):
        return iter(self.flips)

    @property
    def losses(self) -> list[float]:
        return [f.loss_after for f in self.flips if f.loss_after is not None]

    def primaries(self) -> list[int]:
        return [i for i, f in enumerate(self.flips) if f.role != "companion"]

    def to_dict(self) -> dict:
        return {"magic": PROFILE_MAGIC, "version": PROFILE_VERSION, "kind": self.kind,
                "batch_id": self.batch_id, "seed": self.seed, "initial_loss": self.initial_loss,
                "skipped": list(self.skipped), "flips": [asdict(f) for f in self.flips]}

    @classmethod
    def from_dict(cls, d: dict) -> AttackProfile:
        if d.get("magic") != PROFILE_MAGIC:
            raise ModelFormatError(f"not an attack profile (magic {d.get('magic')!r})")
        return cls([BitFlip(**f) for f in d["flips"]], d.get("kind", "pbfa"), d.get("batch_id"),
                   d.get("seed"), d.get("initial_loss"), list(d.get("skipped", [])))


def save_profiles(profiles: Sequence[AttackProfile], path) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in profiles], indent=1))


def load_profiles(path) -> list[AttackProfile]:
    d = load_json(path, "attack profile")
    if isinstance(d, dict):
        d = [d]
    try:
        return [AttackProfile.from_dict(p) for p in d]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: malformed attack profile: {exc}") from exc


def apply_profile(model: QuantizedModel, profile: Iterable[BitFlip]) -> QuantizedModel:
    """Replay flips on ``model`` in place, checking each recorded direction."""
    for f in profile:
        direction = flip_bit(model, f.layer, f.flat_index, f.bit_position)
        if direction != f.direction:
            raise ValueError(f"replay mismatch at {f.address}: model gives {direction}, "
                             f"profile recorded {f.direction}")
    return model


def bit_deltas(q) -> np.ndarray:
    """(n, 8) integer change caused by toggling each bit of each int8 value."""
    q = np.asarray(q, dtype=np.int64).reshape(-1)
    u = q & 0xFF
    out = np.empty((q.size, 8), dtype=np.int64)
    for b in range(8):
        nu = u ^ (1 << b)
        out[:, b] = np.where(nu >= 128, nu - 256, nu) - q
    return out


def _rank_layer(g_int: np.ndarray, q: np.ndarray, bits: Sequence[int], k: int,
                taken: set[tuple[int, int]]) -> list[tuple[int, int]]:
    est = g_int.reshape(-1, 1) * bit_deltas(q)[:, bits]
    for idx, b in taken:
        if b in bits:
            est[idx, bits.index(b)] = -np.inf
    idx, col = np.unravel_index(np.arange(est.size), est.shape)
    order = np.lexsort((np.asarray(bits)[col], idx, -est.ravel()))
    order = [o for o in order[:k] if np.isfinite(est.ravel()[o])]
    return [(int(idx[o]), bits[col[o]]) for o in order]


def pbfa(model: QuantizedModel, x, y, n_bf: int, k: int = 10,
         allowed_bits: Sequence[int] = ALL_BITS, batch_id=None, inplace: bool = False,
         until: Callable[[QuantizedModel], bool] | None = None):
    """Progressive bit-flip attack. Returns ``(profile, attacked_model)``.

    Candidates are ranked by the first-order loss increase
    ``grad_int * delta_int``; the commit uses the exact loss on the batch.
    Ties go to the lowest layer, then flat index, then bit. ``until`` is an
    optional stop test run on the model after each committed flip.
    """
    bits = sorted(set(int(b) for b in allowed_bits))
    if not bits or bits[0] < 0 or bits[-1] > 7:
        raise ValueError("allowed bits must be a nonempty subset of 0..7")
    if n_bf < 0 or n_bf > sum(model.layer_sizes) * len(bits):
        raise ValueError(f"cannot flip {n_bf} distinct bits")
    m = model if inplace else model.copy()
    taken: dict[int, set[tuple[int, int]]] = {i: set() for i in range(len(m.layers))}
    profile = AttackProfile(kind="pbfa" if bits == list(ALL_BITS) else f"pbfa-bits{bits}",
                            batch_id=batch_id, initial_loss=loss(m, x, y))
    for _ in range(n_bf):
        _, grads = loss_and_grad(m, x, y)
        best = None
        for li, layer in enumerate(m.layers):
            flat = m.int_weights(li)
            g_int = grads[li].reshape(-1) * layer.weights.scale
            for idx, b in _rank_layer(g_int, flat, bits, k, taken[li]):
                old = flat[idx]
                flip_bit(m, li, idx, b)
                cand = loss(m, x, y)
                flat[idx] = old
                key = (cand, -li, -idx, -b)
                if best is None or key > best:
                    best = key
        if best is None:
            break
        cand, li, idx, b = best[0], -best[1], -best[2], -best[3]
        pre = int(m.int_weights(li)[idx])
        direction = flip_bit(m, li, idx, b)
        taken[li].add((idx, b))
        profile.flips.append(BitFlip(li, idx, b, direction, pre, "pbfa", cand))
        if until is not None and until(m):
            break
    return profile, m


def restricted_pbfa(model, x, y, n_bf: int, allowed_bits=(6,), k: int = 10, batch_id=None):
    return pbfa(model, x, y, n_bf, k=k, allowed_bits=allowed_bits, batch_id=batch_id)


def random_attack(model: QuantizedModel, n: int, bit_positions: Sequence[int] = ALL_BITS,
                  seed: int = 0, inplace: bool = False):
    """``n`` distinct uniformly drawn (layer, index, bit) flips. Returns ``(profile, model)``."""
    bits = sorted(set(int(b) for b in bit_positions))
    sizes = np.array(model.layer_sizes)
    total = int(sizes.sum()) * len(bits)
    if n > total:
        raise ValueError(f"cannot draw {n} distinct bits from {total}")
    m = model if inplace else model.copy()
    rng = substream(seed, "random-attack")
    draws = rng.choice(total, size=n, replace=False) if n else np.array([], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(sizes * len(bits))])
    profile = AttackProfile(kind="random", seed=seed)
    for g in draws:
        li = int(np.searchsorted(starts, g, side="right") - 1)
        r = int(g - starts[li])
        idx, b = r // len(bits), bits[r % len(bits)]
        pre = int(m.int_weights(li)[idx])
        profile.flips.append(BitFlip(li, idx, b, flip_bit(m, li, idx, b), pre, "random"))
    return profile, m


def paired_attack(model: QuantizedModel, x, y, n_bf: int, assumed_group_size: int,
                  k: int = 10, batch_id=None):
    """PBFA plus one opposite-direction MSB companion per MSB flip.

    The attacker assumes contiguous groups of ``assumed_group_size`` and picks,
    inside the primary's group, the untouched weight whose MSB can flip the
    other way and whose integer gradient has the smallest magnitude.
    Returns ``(profile, attacked_model)``.
    """
    profile, m = pbfa(model, x, y, n_bf, k=k, batch_id=batch_id)
    profile.kind = "paired"
    _, grads = loss_and_grad(m, x, y)
    touched = {(f.layer, f.flat_index) for f in profile.flips}
    G = assumed_group_size
    for pi in list(profile.primaries()):
        f = profile.flips[pi]
        if f.bit_position != 7:
            profile.skipped.append(pi)
            continue
        flat = m.int_weights(f.layer)
        lo, hi = (f.flat_index // G) * G, min((f.flat_index // G + 1) * G, flat.size)
        # primary 0->1 needs a negative companion (1->0) and vice versa
        want_msb = 1 if f.direction == "0->1" else 0
        g_abs = np.abs(grads[f.layer].reshape(-1) * m.layers[f.layer].weights.scale)
        pool = [i for i in range(lo, hi)
                if (f.layer, i) not in touched and bit_of(flat[i], 7) == want_msb]
        if not pool:
            profile.skipped.append(pi)
            continue
        c = min(pool, key=lambda i: (g_abs[i], i))
        pre = int(flat[c])
        direction = flip_bit(m, f.layer, c, 7)
        touched.add((f.layer, c))
        profile.flips.append(BitFlip(f.layer, c, 7, direction, pre, "companion", paired_with=pi))
    return profile, m


# -- statistics -------------------------------------------------------------------

def weight_range_label(v: int) -> str:
    for (lo, hi), label in zip(WEIGHT_RANGES, RANGE_LABELS):
        if lo <= v < hi:
            return label
    raise ValueError(v)


def multi_flip_proportion(profiles: Sequence[AttackProfile], layer_sizes: Sequence[int],
                          group_size: int, interleave: bool, offset: int = 3) -> float:
    """Fraction of profiles with two or more flips in a single group."""
    cfg = LayerConfig(group_size, offset=offset, interleave=interleave)
    maps = {}
    hits = 0
    for p in profiles:
        seen = Counter()
        for f in p.flips:
            if f.layer not in maps:
                maps[f.layer] = GroupMap.build(layer_sizes[f.layer], cfg)
            seen[f.layer, int(maps[f.layer].group[f.flat_index])] += 1
        hits += any(c >= 2 for c in seen.values())
    return hits / len(profiles)


def profile_stats(profiles: Sequence[AttackProfile], layer_sizes: Sequence[int],
                  group_sizes: Sequence[int] = (2, 4, 8, 16, 32, 64), offset: int = 3) -> dict:
    if not profiles:
        raise ValueError("need at least one profile")
    flips = [f for p in profiles for f in p.flips]
    msb01 = sum(f.bit_position == 7 and f.direction == "0->1" for f in flips)
    msb10 = sum(f.bit_position == 7 and f.direction == "1->0" for f in flips)
    hist = Counter(weight_range_label(f.pre_flip_weight) for f in flips)
    return {
        "n_profiles": len(profiles),
        "n_flips": len(flips),
        "bit_counts": {"msb_0to1": msb01, "msb_1to0": msb10, "others": len(flips) - msb01 - msb10},
        "weight_ranges": {label: hist.get(label, 0) for label in RANGE_LABELS},
        "multi_flip": {
            int(G): {"contiguous": multi_flip_proportion(profiles, layer_sizes, G, False, offset),
                     "interleaved": multi_flip_proportion(profiles, layer_sizes, G, True, offset)}
            for G in group_sizes
        },
    }
