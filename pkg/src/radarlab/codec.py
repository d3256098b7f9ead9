"""Masked, interleaved addition-checksum signatures for int8 weight layers.

Per layer: reorder the (zero padded) weights with a strided interleave,
chunk the stream into groups of G, negate each element whose key bit is 0,
sum the group and keep bits 8 and 7 (optionally 6) of the sum. A golden copy
of these signatures, computed on clean weights, is compared at run time;
mismatching groups are flagged and can be zeroed out.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, replace
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .qnn import ModelFormatError, QuantizedModel, load_json
from .rng import substream

KEY_BITS = 16
STORE_MAGIC = "radarlab-golden"
STORE_VERSION = 1


class StoreMismatchError(ValueError):
    """Golden store does not describe the model it is checked against."""


@dataclass(frozen=True)
class LayerConfig:
    group_size: int
    stride: int | None = None  # interleave distance N_W; None spreads groups over the layer
    offset: int = 3
    key: int = 0xFFFF
    width: int = 2
    interleave: bool = True

    def __post_init__(self):
        if self.group_size < 1:
            raise ValueError("group size must be >= 1")
        if self.stride is not None and self.stride < 1:
            raise ValueError("interleave stride must be >= 1")
        if self.offset < 0:
            raise ValueError("offset must be non-negative")
        if not 0 <= self.key < 1 << KEY_BITS:
            raise ValueError("key must fit in 16 bits")
        if self.width not in (2, 3):
            raise ValueError("signature width must be 2 or 3")

    def n_w(self, n: int) -> int:
        """Interleave distance for a layer of ``n`` weights.

        The default is padded length / G, so each group takes one weight
        from every stride-sized block and spans the whole layer.
        """
        if self.stride is not None:
            return self.stride
        return max(1, padded_length(n, self.group_size) // self.group_size)


@dataclass(frozen=True)
class ProtectionConfig:
    layers: tuple[LayerConfig, ...]
    master_seed: int | None = None

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i) -> LayerConfig:
        return self.layers[i]

    def fingerprint(self) -> str:
        c = self.layers[0]
        same = all(replace(l, key=0) == replace(c, key=0) for l in self.layers)
        nw = "spread" if c.stride is None else c.stride
        head = (f"G={c.group_size},NW={nw},off={c.offset},w={c.width},"
                f"il={int(c.interleave)}")
        return head if same else head + ",mixed"


def derive_keys(master_seed: int, n_layers: int) -> list[int]:
    """Per-layer 16-bit keys from the ``key`` substream of ``master_seed``."""
    rng = substream(master_seed, "key")
    return [int(k) for k in rng.integers(0, 1 << KEY_BITS, size=n_layers)]


def make_config(n_layers: int, group_size: int, *, interleave: bool = True,
                width: int = 2, offset: int = 3, stride: int | None = None,
                master_seed: int = 0, keys: Sequence[int] | None = None) -> ProtectionConfig:
    if keys is None:
        keys = derive_keys(master_seed, n_layers)
    layers = tuple(LayerConfig(group_size, stride, offset, int(k), width, interleave) for k in keys)
    return ProtectionConfig(layers, master_seed)


class Signature(NamedTuple):
    a: int
    b: int
    c: int | None = None

    def bits(self) -> tuple[int, ...]:
        return (self.a, self.b) if self.c is None else (self.a, self.b, self.c)


# -- primitives ----------------------------------------------------------------

def padded_length(n: int, group_size: int) -> int:
    return -(-n // group_size) * group_size


def interleave_indices(n: int, stride: int, offset: int = 0, group_size: int | None = None) -> np.ndarray:
    """Original index of each position of the interleaved stream.

    The stream visits k, k+stride, k+2*stride, ... for k = 0..stride-1 and
    every visited index is shifted circularly by ``offset``. The layer is
    padded to a multiple of ``group_size`` first; indices >= n are pad slots.
    """
    if n < 1 or stride < 1:
        raise ValueError("layer size and stride must be >= 1")
    lp = padded_length(n, group_size or 1)
    stream = np.concatenate([np.arange(k, lp, stride) for k in range(min(stride, lp))])
    return (stream + offset) % lp


def layer_permutation(n: int, cfg: LayerConfig) -> np.ndarray:
    if not cfg.interleave:
        return np.arange(padded_length(n, cfg.group_size))
    return interleave_indices(n, cfg.n_w(n), cfg.offset, cfg.group_size)


def key_signs(key: int, length: int) -> np.ndarray:
    """+1 where key bit (t mod 16) is 1, -1 where it is 0; bit 0 drives t = 0."""
    t = np.arange(length) % KEY_BITS
    return np.where((key >> t) & 1, 1, -1).astype(np.int64)


def mask_group(values, key: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64)
    return v * key_signs(key, len(v))


def checksum(masked) -> int:
    return int(np.sum(np.asarray(masked, dtype=np.int64)))


def signature_bits(m, width: int = 2) -> np.ndarray:
    """Vectorised signature: columns are bits 8, 7 (and 6) of two's-complement M."""
    m = np.asarray(m, dtype=np.int64)
    shifts = (8, 7, 6)[:width]
    return np.stack([(m >> s) & 1 for s in shifts], axis=-1).astype(np.uint8)


def signature(m: int, width: int = 2) -> Signature:
    """S_A = floor(M/256) mod 2, S_B = floor(M/128) mod 2, S_C = floor(M/64) mod 2."""
    if width not in (2, 3):
        raise ValueError("signature width must be 2 or 3")
    m = int(m)
    return Signature((m // 256) % 2, (m // 128) % 2, (m // 64) % 2 if width == 3 else None)


def group_checksums(flat, cfg: LayerConfig) -> np.ndarray:
    flat = np.asarray(flat, dtype=np.int64).reshape(-1)
    perm = layer_permutation(flat.size, cfg)
    padded = np.zeros(perm.size, dtype=np.int64)
    padded[:flat.size] = flat
    groups = padded[perm].reshape(-1, cfg.group_size)
    return (groups * key_signs(cfg.key, cfg.group_size)).sum(axis=1)


def sign_layer(flat, cfg: LayerConfig) -> list[Signature]:
    return [Signature(*map(int, row)) for row in signature_bits(group_checksums(flat, cfg), cfg.width)]


@dataclass(frozen=True)
class GroupMap:
    """Where each original weight lands: its group and its mask sign."""
    group: np.ndarray
    sign: np.ndarray
    members: np.ndarray  # (n_groups, G) original indices, pad slots >= layer size

    @classmethod
    def build(cls, n: int, cfg: LayerConfig) -> GroupMap:
        perm = layer_permutation(n, cfg)
        pos = np.empty_like(perm)
        pos[perm] = np.arange(perm.size)
        signs = key_signs(cfg.key, cfg.group_size)
        return cls(pos[:n] // cfg.group_size, signs[pos[:n] % cfg.group_size],
                   perm.reshape(-1, cfg.group_size))


# -- store, detect, recover ------------------------------------------------------

@dataclass
class GoldenSignatureStore:
    config: ProtectionConfig
    layer_sizes: list[int]
    signatures: list[np.ndarray]  # per layer, (n_groups, width) uint8

    @property
    def n_bits(self) -> int:
        return sum(s.size for s in self.signatures)

    def layer_signatures(self, i: int) -> list[Signature]:
        return [Signature(*map(int, row)) for row in self.signatures[i]]

    def refresh_groups(self, model: QuantizedModel, report: DetectionReport) -> GoldenSignatureStore:
        """Copy of the store with the flagged groups re-signed from ``model``."""
        sigs = [s.copy() for s in self.signatures]
        for i, flagged in enumerate(report.flagged):
            if flagged:
                cfg = self.config[i]
                fresh = signature_bits(group_checksums(model.int_weights(i), cfg), cfg.width)
                idx = sorted(flagged)
                sigs[i][idx] = fresh[idx]
        return GoldenSignatureStore(self.config, list(self.layer_sizes), sigs)


def _check_config(model: QuantizedModel, config: ProtectionConfig) -> None:
    if len(config) != len(model.layers):
        raise StoreMismatchError(f"config has {len(config)} layers, model has {len(model.layers)}")


def protect(model: QuantizedModel, config: ProtectionConfig) -> GoldenSignatureStore:
    _check_config(model, config)
    sigs = [signature_bits(group_checksums(model.int_weights(i), cfg), cfg.width)
            for i, cfg in enumerate(config.layers)]
    return GoldenSignatureStore(config, model.layer_sizes, sigs)


@dataclass
class DetectionReport:
    flagged: list[set[int]]
    flip_detected: list[bool] | None = None
    flip_groups: list[tuple[int, int]] | None = None

    @property
    def n_flagged(self) -> int:
        return sum(len(f) for f in self.flagged)

    @property
    def attack_detected(self) -> bool:
        return self.n_flagged > 0

    @property
    def detected_count(self) -> int:
        return sum(self.flip_detected) if self.flip_detected else 0

    def to_dict(self) -> dict:
        d = {"flagged": [sorted(int(g) for g in f) for f in self.flagged],
             "n_flagged": self.n_flagged}
        if self.flip_detected is not None:
            d["flip_detected"] = [bool(b) for b in self.flip_detected]
            d["detected_count"] = self.detected_count
        return d


def flip_group(layer_sizes: Sequence[int], config: ProtectionConfig, layer: int, index: int) -> int:
    return int(GroupMap.build(layer_sizes[layer], config[layer]).group[index])


def detect(model: QuantizedModel, store: GoldenSignatureStore, flips=None) -> DetectionReport:
    """Flag every group whose recomputed signature differs from the golden one.

    ``flips`` is optional ground truth: an iterable of objects with ``layer``
    and ``flat_index`` attributes (e.g. an AttackProfile). A flip counts as
    detected iff its group is flagged.
    """
    if model.layer_sizes != list(store.layer_sizes):
        raise StoreMismatchError(f"store built for layer sizes {store.layer_sizes}, "
                                 f"model has {model.layer_sizes}")
    flagged = []
    for i, cfg in enumerate(store.config.layers):
        now = signature_bits(group_checksums(model.int_weights(i), cfg), cfg.width)
        if now.shape != store.signatures[i].shape:
            raise StoreMismatchError(f"layer {i}: signature shape {store.signatures[i].shape} "
                                     f"vs recomputed {now.shape}")
        flagged.append(set(np.flatnonzero((now != store.signatures[i]).any(axis=1)).tolist()))
    report = DetectionReport(flagged)
    if flips is not None:
        maps: dict[int, GroupMap] = {}
        groups = []
        for f in flips:
            if f.layer not in maps:
                maps[f.layer] = GroupMap.build(store.layer_sizes[f.layer], store.config[f.layer])
            groups.append((f.layer, int(maps[f.layer].group[f.flat_index])))
        report.flip_groups = groups
        report.flip_detected = [g in flagged[l] for l, g in groups]
    return report


def recover(model: QuantizedModel, report: DetectionReport, config: ProtectionConfig) -> QuantizedModel:
    """Zero every real weight of every flagged group, in place."""
    _check_config(model, config)
    for i, flagged in enumerate(report.flagged):
        if not flagged:
            continue
        flat = model.int_weights(i)
        members = GroupMap.build(flat.size, config[i]).members[sorted(flagged)].ravel()
        flat[members[members < flat.size]] = 0
    return model


# -- storage accounting ----------------------------------------------------------

def storage_bits(layer_sizes: Sequence[int], group_size: int, bits_per_group: int) -> int:
    return sum(math.ceil(n / group_size) for n in layer_sizes) * bits_per_group


def storage_overhead(layer_sizes: Sequence[int], config: ProtectionConfig | LayerConfig) -> int:
    """Signature storage in bits for the given layer sizes."""
    if isinstance(config, LayerConfig):
        return storage_bits(layer_sizes, config.group_size, config.width)
    return sum(math.ceil(n / c.group_size) * c.width for n, c in zip(layer_sizes, config.layers))


def bits_to_kb(bits: int) -> float:
    return bits / 8 / 1024


def load_architecture(name_or_path) -> list[tuple[str, int]]:
    """Layer-size table: a shipped name (``resnet18``, ``resnet20``) or a JSON path."""
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        text = p.read_text()
    else:
        text = resources.files("radarlab.data").joinpath(f"{name_or_path}.json").read_text()
    d = json.loads(text)
    return [(str(name), int(n)) for name, n in d["layers"]]


# -- store file -------------------------------------------------------------------

def store_to_dict(store: GoldenSignatureStore) -> dict:
    layers = []
    for cfg, n, sig in zip(store.config.layers, store.layer_sizes, store.signatures):
        packed = np.packbits(sig.reshape(-1), bitorder="little")
        layers.append({**asdict(cfg), "layer_size": n, "n_groups": int(sig.shape[0]),
                       "signatures": base64.b64encode(packed.tobytes()).decode("ascii")})
    return {"magic": STORE_MAGIC, "version": STORE_VERSION,
            "bit_packing": "group-major, S_A then S_B then S_C, LSB-first within bytes",
            "master_seed": store.config.master_seed, "layers": layers}


def store_from_dict(d: dict) -> GoldenSignatureStore:
    if d.get("magic") != STORE_MAGIC:
        raise ModelFormatError(f"not a golden store (magic {d.get('magic')!r})")
    if d.get("version") != STORE_VERSION:
        raise ModelFormatError(f"unsupported store version {d.get('version')!r}")
    cfgs, sizes, sigs = [], [], []
    for rec in d["layers"]:
        cfg = LayerConfig(rec["group_size"], rec["stride"], rec["offset"], rec["key"],
                          rec["width"], rec["interleave"])
        bits = np.unpackbits(np.frombuffer(base64.b64decode(rec["signatures"]), dtype=np.uint8),
                             bitorder="little")
        n_groups = rec["n_groups"]
        if bits.size < n_groups * cfg.width:
            raise ModelFormatError(f"signature payload too short for {n_groups} groups")
        cfgs.append(cfg)
        sizes.append(int(rec["layer_size"]))
        sigs.append(bits[:n_groups * cfg.width].reshape(n_groups, cfg.width).copy())
    return GoldenSignatureStore(ProtectionConfig(tuple(cfgs), d.get("master_seed")), sizes, sigs)


def save_store(store: GoldenSignatureStore, path) -> None:
    Path(path).write_text(json.dumps(store_to_dict(store), indent=1))


def load_store(path) -> GoldenSignatureStore:
    d = load_json(path, "golden store")
    try:
        return store_from_dict(d)
    except ModelFormatError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: malformed golden store: {exc!r}") from exc
