"""dfmp-export: one image in, one DFMP feature-map file out."""

import argparse
import sys

from .errors import ModelLoadError, ShapeMismatchError
from .export import ExporterConfig, export_feature_map


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfmp-export",
        description="Run dense model inference on an image and write a DFMP feature map")
    parser.add_argument("--model", required=True, help="model .npz path")
    parser.add_argument("--image", required=True, help="input image (PNG)")
    parser.add_argument("--out", required=True, help="output .dfmp path")
    parser.add_argument("--stride", type=int, default=None,
                        help="declared stride, validated against the model")
    parser.add_argument("--dim", type=int, default=None,
                        help="declared descriptor dim, validated against the model")
    parser.add_argument("--channel-order", choices=["rgb", "bgr"], default="rgb")
    parser.add_argument("--device", default="cpu")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExporterConfig(model_path=args.model, channel_order=args.channel_order,
                             stride=args.stride, descriptor_dim=args.dim,
                             device=args.device)
        export_feature_map(args.image, cfg, args.out)
    except OSError as exc:
        print(f"dfmp-export: i/o error: {exc}", file=sys.stderr)
        return 2
    except (ModelLoadError, ShapeMismatchError, ValueError) as exc:
        print(f"dfmp-export: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
