"""Mitosis detection with a patch classifier, sliding-window inference and
GradCAM++ hotspot localization, trained with active hard-example mining."""

from .cam import Cam, Detection, detect, gradcampp, hotspot_centroid
from .dataset import Annotation, DatasetSplit, Patch, PatchSet, RoiImage, load_dataset, split_dataset
from .evaluation import match_detections, per_domain_report, prf1
from .inference import InferenceConfig, ScoredWindow, WindowBox, nms, tile_image
from .model import Classifier, build_tiny_cnn, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
