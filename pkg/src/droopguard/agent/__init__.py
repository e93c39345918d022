from .nets import Adam, MLP, PolicyNetwork, ValueNetwork  # noqa: F401
from .ppo import RolloutBatch, compute_gae, finalize_batch, ppo_update  # noqa: F401
from .train import Trainer, write_metrics  # noqa: F401
