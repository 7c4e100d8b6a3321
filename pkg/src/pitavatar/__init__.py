"""Feed-forward point-image transformer for animatable Gaussian human avatars."""

__version__ = "0.1.0"
