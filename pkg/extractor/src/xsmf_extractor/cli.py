"""Command-line entry point for batch feature extraction."""

import argparse
import sys

from .extract import extract


def build_parser():
    ap = argparse.ArgumentParser(
        prog="xsmf-extract",
        description="pool per-layer encoder outputs into XSMF feature caches",
    )
    ap.add_argument("manifest", help="CSV with header item_id,text,image_path")
    ap.add_argument("--text-encoder", default="bert-base-uncased",
                    help="model id or local path for the text backbone")
    ap.add_argument("--image-encoder", default="google/vit-base-patch16-224",
                    help="model id or local path for the vision backbone")
    ap.add_argument("--group-factor", type=int, default=6,
                    help="cache every g-th transformer layer (must divide depth)")
    ap.add_argument("--out-textual", required=True)
    ap.add_argument("--out-visual", required=True)
    ap.add_argument("--rejects", default="", help="file listing skipped items")
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--device", default="cpu")
    ap.add_argument("--dim", type=int, default=None,
                    help="fail before writing if encoder width differs")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = extract(
            args.manifest, args.text_encoder, args.image_encoder,
            args.group_factor, args.out_textual, args.out_visual,
            batch_size=args.batch_size, device=args.device,
            expected_dim=args.dim, rejects_path=args.rejects or None,
        )
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"extracted {len(result.item_ids)} items "
          f"({len(result.rejects)} rejected) -> "
          f"{args.out_visual}, {args.out_textual}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
