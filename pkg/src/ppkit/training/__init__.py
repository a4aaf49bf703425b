from .dataset import (BlockPairDataset, DatasetError, SequencePair, build_dataset, crop_block, from_samples,
                      to_samples)
from .trainer import (LOG_HEADER, CheckpointError, TrainConfig, TrainResult, TrainState, checkpoint_from_bytes,
                      checkpoint_to_bytes, discriminator_step, initial_state, load_checkpoint, lr_at_epoch, run,
                      save_checkpoint, train_generator_only, train_l1, train_perceptual)

__all__ = [
    "LOG_HEADER",
    "BlockPairDataset",
    "CheckpointError",
    "DatasetError",
    "SequencePair",
    "TrainConfig",
    "TrainResult",
    "TrainState",
    "build_dataset",
    "checkpoint_from_bytes",
    "checkpoint_to_bytes",
    "crop_block",
    "discriminator_step",
    "from_samples",
    "initial_state",
    "load_checkpoint",
    "lr_at_epoch",
    "run",
    "save_checkpoint",
    "to_samples",
    "train_generator_only",
    "train_l1",
    "train_perceptual",
]
