"""Layer-to-layer contrastive learning on a LightGCN backbone."""

__version__ = "0.1.0"
