"""PNG image loading and saving via Pillow, normalized to [0, 1] floats."""

import numpy as np
from PIL import Image


def load_image(path) -> np.ndarray:
    """Load an 8- or 16-bit gray/RGB PNG as HxW or HxWx3 float64 in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I", "I;16", "I;16B", "I;16L"):
            arr = np.asarray(im.convert("I"), np.float64) / 65535.0
        elif im.mode == "L":
            arr = np.asarray(im, np.float64) / 255.0
        elif im.mode in ("RGB", "RGBA", "P", "LA"):
            arr = np.asarray(im.convert("RGB"), np.float64) / 255.0
        else:
            arr = np.asarray(im.convert("RGB"), np.float64) / 255.0
    return np.clip(arr, 0.0, 1.0)


def save_image(arr, path) -> None:
    """Save an HxW or HxWx3 float array in [0, 1] as an 8-bit PNG."""
    arr = np.asarray(arr, np.float64)
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if q.ndim == 3 and q.shape[2] == 1:
        q = q[:, :, 0]
    mode = "L" if q.ndim == 2 else "RGB"
    Image.fromarray(q, mode=mode).save(path, format="PNG")
