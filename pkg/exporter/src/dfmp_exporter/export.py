"""Dense inference + "DFMP" v1 serialization.

The file layout matches the consuming pipeline's interchange contract:
magic "DFMP", version u8 = 1, six little-endian u32 header fields
(source_w, source_h, stride, grid_w, grid_h, descriptor_dim), then float32
detector logits (cell-major, vessel/background interleaved) and float32
descriptors (cell-major, dim-minor).  No padding, no compression.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ShapeMismatchError
from .model import ToyDenseModel, load_model

DFMP_MAGIC = b"DFMP"
DFMP_VERSION = 1
_HEADER = struct.Struct("<4sB6I")


@dataclass
class ExporterConfig:
    model_path: str
    channel_order: str = "rgb"          # input channel order fed to the model
    stride: Optional[int] = None        # declared; validated against the model
    descriptor_dim: Optional[int] = None
    device: str = "cpu"

    def __post_init__(self):
        if self.channel_order not in ("rgb", "bgr"):
            raise ValueError(f"unsupported channel order {self.channel_order!r}")
        if self.device != "cpu":
            raise ValueError(f"unsupported device {self.device!r}")


def load_image_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), np.float64) / 255.0
    return arr


def write_dfmp(path, source_w: int, source_h: int, stride: int,
               detector: np.ndarray, descriptors: np.ndarray) -> None:
    gh, gw, two = detector.shape
    if two != 2:
        raise ShapeMismatchError(f"detector grid must have 2 channels, got {two}")
    if descriptors.shape[:2] != (gh, gw):
        raise ShapeMismatchError(
            f"descriptor grid {descriptors.shape[:2]} does not match detector grid {(gh, gw)}")
    dim = descriptors.shape[2]
    header = _HEADER.pack(DFMP_MAGIC, DFMP_VERSION, source_w, source_h,
                          stride, gw, gh, dim)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(detector, "<f4").tobytes())
        fh.write(np.ascontiguousarray(descriptors, "<f4").tobytes())


def export_feature_map(image_path, cfg: ExporterConfig, out_path,
                       model: Optional[ToyDenseModel] = None) -> tuple:
    """Run the model densely over the image and write the DFMP file.

    Header fields come from the actual output shapes; declared stride and
    descriptor_dim, when given, are validated against them.  Returns the
    (detector, descriptors) float32 grids as computed.
    """
    if model is None:
        model = load_model(cfg.model_path)
    if cfg.stride is not None and cfg.stride != model.stride:
        raise ShapeMismatchError(
            f"declared stride {cfg.stride} but the model runs at {model.stride}")

    img = load_image_rgb(image_path)
    if cfg.channel_order == "bgr":
        img = img[:, :, ::-1]
    detector, descriptors = model.infer(img)

    if cfg.descriptor_dim is not None and cfg.descriptor_dim != descriptors.shape[2]:
        raise ShapeMismatchError(
            f"declared descriptor dim {cfg.descriptor_dim} but the model emits {descriptors.shape[2]}")

    h, w = img.shape[:2]
    expected = (-(-h // model.stride), -(-w // model.stride))
    if detector.shape[:2] != expected:
        raise ShapeMismatchError(
            f"model produced grid {detector.shape[:2]}, expected {expected} for {w}x{h}")
    write_dfmp(out_path, w, h, model.stride, detector, descriptors)
    return detector, descriptors
