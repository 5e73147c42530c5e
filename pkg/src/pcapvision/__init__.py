"""Binary classification of packet captures from raw bytes rendered as grayscale images."""

from .byte_image import ByteImage, RawCapture, encode_image, load_capture, read_pgm, write_pgm
from .errors import PcapVisionError
from .metrics import MetricsReport, calibrate_threshold, evaluate_scores, fbeta
from .model_zoo import ArchitectureSpec, ModelState, build_pcapvision, build_variant, load_model, save_model

__version__ = "0.1.0"
