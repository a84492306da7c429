from .config import GranularityConfig, ModelConfig, reference_config, tiny_config
from .flops import FlopsReport, LayerSpec, flops_grc, flops_swin, reference_sweep
from .layers import cyclic_shift, shift_attention_mask, transformer_block, window_mhsa, window_partition, window_reverse
from .network import GrcViT, forward_fine, init_params, patchify, route_and_forward
from .train import (
    AdaptiveRouting,
    FineTrainConfig,
    FixedRouting,
    RandomRouting,
    ToyDataset,
    evaluate,
    textured_dataset,
    train_fine_toy,
)
