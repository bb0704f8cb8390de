"""Battery cycle-life prediction with a knowledge-routed mixture-of-experts transformer."""

from .aging import AgingCondition, EmbeddingCache, HashEmbedder, RemoteEmbedder, render_prompt
from .battmoe import ExpertRegistry, RoutingTag, build_registry, hard_mask
from .checkpoint import load_checkpoint, save_checkpoint, save_delta_checkpoint
from .model import ModelState, PBTConfig, init_model, predict
from .train import TrainConfig, evaluate, mape, train_loop
from .transfer import TransferConfig, adapter_tune, fine_tune, insert_adapters

__version__ = "0.1.0"
