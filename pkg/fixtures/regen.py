"""Regenerate the shared DFMP fixture corpus.

The fixtures are written by the exporter and read by both test suites; they
pin the interchange format across the two components.  Rerun after any
deliberate format change:

    python3 fixtures/regen.py
"""

from pathlib import Path

import numpy as np
from PIL import Image

from dfmp_exporter import ExporterConfig, export_feature_map, make_toy_model, save_model

ROOT = Path(__file__).resolve().parent
OUT = ROOT / "dfmp"


def synthetic_image(seed: int, size: int = 96) -> np.ndarray:
    rng = np.random.default_rng(seed)
    img = np.full((size, size), 0.9)
    for _ in range(4):
        x0, y0 = rng.uniform(10, size - 10, 2)
        ang = rng.uniform(0, np.pi)
        for t in np.linspace(0, size, 4 * size):
            x = int(round(x0 + t * np.cos(ang)))
            y = int(round(y0 + t * np.sin(ang)))
            if 0 <= x < size and 0 <= y < size:
                img[max(y - 1, 0):y + 2, max(x - 1, 0):x + 2] = 0.2
    return img


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    model_path = OUT / "toy_model.npz"
    save_model(make_toy_model(seed=0), model_path)
    for name, seed in (("toy_a", 1), ("toy_b", 2)):
        img = synthetic_image(seed)
        png = OUT / f"{name}.png"
        Image.fromarray((img * 255).round().astype(np.uint8), "L").save(png)
        export_feature_map(png, ExporterConfig(model_path=str(model_path)),
                           OUT / f"{name}.dfmp")
        print(f"wrote {OUT / f'{name}.dfmp'}")


if __name__ == "__main__":
    main()
