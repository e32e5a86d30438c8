"""Sibling-trained recurrent estimators for refining block-DCT decodes."""

from sne.codec import QuantTable, QuantizedRepresentation, baseline_decode, encode_image
from sne.estimator import SkipMode, SneConfig, decode_image
from sne.metrics import evaluate, ms_ssim, psnr, ssim
from sne.patching import ContextSpec
from sne.trainer import TrainSchedule, train

__version__ = "0.1.0"
