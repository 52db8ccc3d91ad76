"""Fine-tune large models through a small low-rank emulator, then transfer the adapters."""

from .correction import correct_lora, correct_network, transfer_lora, verify_correction
from .emulator import FactorizedWeight, activation_aware_factorize, build_emulator, rank_for_ratio
from .lora import LoraModule, init_lora, merge_lora
from .model import Layer, Network, attach_lora, forward, merge_network
from .train import TrainConfig, account_memory, evaluate, finetune

__version__ = "0.1.0"

__all__ = [
    "FactorizedWeight",
    "Layer",
    "LoraModule",
    "Network",
    "TrainConfig",
    "account_memory",
    "activation_aware_factorize",
    "attach_lora",
    "build_emulator",
    "correct_lora",
    "correct_network",
    "evaluate",
    "finetune",
    "forward",
    "init_lora",
    "merge_lora",
    "merge_network",
    "rank_for_ratio",
    "transfer_lora",
    "verify_correction",
]
