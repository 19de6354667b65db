"""Cross-modal deepfake detection with audio-visual correlation distillation."""

__version__ = "0.1.0"
