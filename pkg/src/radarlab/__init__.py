"""Run-time detection and recovery of adversarial bit flips in int8 weights."""
from .attacker import AttackProfile, BitFlip, paired_attack, pbfa, profile_stats, random_attack, restricted_pbfa
from .codec import (DetectionReport, GoldenSignatureStore, LayerConfig, ProtectionConfig, checksum, detect,
                    interleave_indices, make_config, mask_group, protect, recover, sign_layer, signature,
                    storage_overhead)
from .qnn import QuantizedModel, QuantizedTensor, accuracy, flip_bit, forward, loss_and_grad, quantize, train_tiny

__version__ = "0.1.0"

__all__ = [
    "AttackProfile", "BitFlip", "paired_attack", "pbfa", "profile_stats", "random_attack", "restricted_pbfa",
    "DetectionReport", "GoldenSignatureStore", "LayerConfig", "ProtectionConfig", "checksum", "detect",
    "interleave_indices", "make_config", "mask_group", "protect", "recover", "sign_layer", "signature",
    "storage_overhead",
    "QuantizedModel", "QuantizedTensor", "accuracy", "flip_bit", "forward", "loss_and_grad", "quantize",
    "train_tiny",
]
