"""ViTs on small low-resolution datasets: self-distillation pre-training as weight
initialization, then supervised fine-tuning, on a small numpy autodiff core."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DATASETS, ImageDataset, Splits, load_cifar10, load_cifar100, synthetic_dataset
from .distill import DistillConfig, ProjectionHead, distill_loss, pretrain
from .finetune import FinetuneConfig, finetune, load_backbone
from .tensor import Tensor, backward, no_grad
from .views import ViewConfig, generate_views
from .vit import ViT, ViTConfig, init_weights

__version__ = "0.1.0"
