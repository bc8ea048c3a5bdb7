"""Training stages: segmenter pretraining, HCG pretraining, TransPro training, ablations."""

from .ablation import run_ablation, sweep_weights
from .hcg_trainer import pretrain_hcg
from .transpro_trainer import train_transpro
from .vseg_trainer import pretrain_vseg

__all__ = ["pretrain_vseg", "pretrain_hcg", "train_transpro", "run_ablation", "sweep_weights"]
