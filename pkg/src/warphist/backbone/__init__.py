"""Toy history-conditioned video transformer."""
from .lora import LoraAdapter, lora_forward, lora_mount, lora_unmount, merge_into, merged_weight
from .model import LoraLinear, ModelConfig, ToyModel, parameter_checksum, rope_rotate
from .train import (DivergenceError, FinetuneConfig, TrainConfig, build_condition, flow_loss, lora_finetune,
                    oneshot_windows, sample_chunk, train)
