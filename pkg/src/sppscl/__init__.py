"""Semi-push-pull supervised contrastive training for image-text sentiment alignment."""

__version__ = "0.1.0"
