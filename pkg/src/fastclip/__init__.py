"""Global contrastive loss optimizers on a simulated data-parallel fabric."""

__version__ = "0.1.0"
