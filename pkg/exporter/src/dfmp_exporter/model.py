"""Toy dense detector/descriptor model: one 3x3 conv bank, ReLU, 4x4 average
pooling, and two 1x1 heads.  Stored as an .npz with a version field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ModelLoadError

MODEL_VERSION = 1


@dataclass
class ToyDenseModel:
    stride: int
    conv_w: np.ndarray   # (C, 3, 3, 3) filters: out-channel, in-channel, ky, kx
    conv_b: np.ndarray   # (C,)
    det_w: np.ndarray    # (2, C)
    det_b: np.ndarray    # (2,)
    desc_w: np.ndarray   # (D, C)
    desc_b: np.ndarray   # (D,)

    @property
    def descriptor_dim(self) -> int:
        return self.desc_w.shape[0]

    def infer(self, img: np.ndarray):
        """Dense forward pass: (detector (gh, gw, 2), descriptors (gh, gw, D)).

        img is HxWx3 float in [0, 1].  Replicate-padded 3x3 conv, ReLU, then
        ceil-mode average pooling by the stride, then the linear heads.
        """
        h, w, _ = img.shape
        padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
        c_out = self.conv_w.shape[0]
        feat = np.empty((h, w, c_out))
        for k in range(c_out):
            acc = np.zeros((h, w))
            for cin in range(3):
                for ky in range(3):
                    for kx in range(3):
                        wgt = self.conv_w[k, cin, ky, kx]
                        if wgt != 0.0:
                            acc += wgt * padded[ky:ky + h, kx:kx + w, cin]
            feat[:, :, k] = acc + self.conv_b[k]
        np.maximum(feat, 0.0, out=feat)

        s = self.stride
        gh = -(-h // s)
        gw = -(-w // s)
        pooled = np.empty((gh, gw, c_out))
        for gy in range(gh):
            for gx in range(gw):
                block = feat[gy * s:min((gy + 1) * s, h), gx * s:min((gx + 1) * s, w)]
                pooled[gy, gx] = block.mean(axis=(0, 1))

        detector = pooled @ self.det_w.T + self.det_b
        descriptors = pooled @ self.desc_w.T + self.desc_b
        return detector.astype(np.float32), descriptors.astype(np.float32)


def make_toy_model(seed: int = 0, stride: int = 4, n_orient: int = 8,
                   vessel_bias: float = -0.15, jitter: float = 0.02) -> ToyDenseModel:
    """Oriented-edge filter bank with an energy detector head.

    The k-th filter is a rotated derivative kernel; after ReLU each channel
    carries one oriented edge energy, the vessel logit is their sum plus a
    negative bias (flat regions score below zero), and the descriptor head
    passes the energies through with a seeded jitter so channels stay
    distinguishable.
    """
    rng = np.random.default_rng(seed)
    gx = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0
    gy = gx.T
    conv_w = np.zeros((n_orient, 3, 3, 3))
    for k in range(n_orient):
        theta = np.pi * k / n_orient
        kernel = np.cos(theta) * gx + np.sin(theta) * gy
        for cin in range(3):
            conv_w[k, cin] = kernel / 3.0
    conv_b = np.zeros(n_orient)

    det_w = np.vstack([np.ones(n_orient), -np.ones(n_orient)])
    det_b = np.array([vessel_bias, -vessel_bias])
    desc_w = np.eye(n_orient) + jitter * rng.standard_normal((n_orient, n_orient))
    desc_b = np.zeros(n_orient)
    return ToyDenseModel(stride=stride, conv_w=conv_w, conv_b=conv_b,
                         det_w=det_w, det_b=det_b, desc_w=desc_w, desc_b=desc_b)


def save_model(model: ToyDenseModel, path) -> None:
    np.savez(path, version=np.int64(MODEL_VERSION), stride=np.int64(model.stride),
             conv_w=model.conv_w, conv_b=model.conv_b,
             det_w=model.det_w, det_b=model.det_b,
             desc_w=model.desc_w, desc_b=model.desc_b)


_REQUIRED = ("version", "stride", "conv_w", "conv_b", "det_w", "det_b", "desc_w", "desc_b")


def load_model(path) -> ToyDenseModel:
    try:
        with np.load(path) as data:
            missing = [k for k in _REQUIRED if k not in data]
            if missing:
                raise ModelLoadError(f"model file lacks field(s) {missing}")
            if int(data["version"]) != MODEL_VERSION:
                raise ModelLoadError(f"unsupported model version {int(data['version'])}")
            model = ToyDenseModel(
                stride=int(data["stride"]),
                conv_w=np.asarray(data["conv_w"], np.float64),
                conv_b=np.asarray(data["conv_b"], np.float64),
                det_w=np.asarray(data["det_w"], np.float64),
                det_b=np.asarray(data["det_b"], np.float64),
                desc_w=np.asarray(data["desc_w"], np.float64),
                desc_b=np.asarray(data["desc_b"], np.float64),
            )
    except OSError:
        raise
    except (ValueError, KeyError) as exc:
        raise ModelLoadError(f"cannot read model {path}: {exc}") from exc
    if model.conv_w.ndim != 4 or model.conv_w.shape[1:] != (3, 3, 3):
        raise ModelLoadError(f"conv bank must be (C, 3, 3, 3), got {model.conv_w.shape}")
    if model.det_w.shape[0] != 2:
        raise ModelLoadError("detector head must emit 2 channels")
    if model.stride < 1:
        raise ModelLoadError("stride must be positive")
    return model
