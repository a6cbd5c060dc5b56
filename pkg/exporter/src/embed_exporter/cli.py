"""Command line: `embed-exporter export --annotations ... --images ... --out ...`"""

from __future__ import annotations

import argparse
import logging
import sys

from .encoders import DEFAULT_CLIP_MODEL, make_encoder
from .export import ExportJob, export_embeddings


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-exporter",
        description="Export caption-word and target-region embeddings")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="encode annotations into an embedding file")
    p.add_argument("--annotations", required=True)
    p.add_argument("--images", required=True, help="image root directory")
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=DEFAULT_CLIP_MODEL,
                   help="model id or path, or 'toy' for the rule-based encoder")
    p.add_argument("--batch-size", type=int, default=16)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        encoder = make_encoder(args.model)
        job = ExportJob(annotations_path=args.annotations, image_root=args.images,
                        output_path=args.out, encoder=encoder,
                        batch_size=args.batch_size)
        records = export_embeddings(job)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"wrote {len(records)} records (dim {encoder.dim}) -> {args.out}")
    if job.failures:
        print(f"skipped {len(job.failures)} annotations with unreadable images: "
              f"{', '.join(job.failures[:10])}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
