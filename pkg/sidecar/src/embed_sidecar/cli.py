"""Sidecar command line: serve the HTTP endpoint or precompute a gallery."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional

from .encoders import EncoderError, get_encoder
from .precompute import DecodeFailures, ManifestError, batch_precompute


def cmd_serve(args) -> int:
    import uvicorn

    from .app import create_app

    app = create_app(get_encoder(args.model))
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def cmd_precompute(args) -> int:
    encoder = get_encoder(args.model)
    ids = batch_precompute(args.manifest, encoder, args.out, skip_bad=args.skip_bad)
    print(f"wrote {len(ids)} embeddings (dim {encoder.dim}) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embed-sidecar")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the embedding HTTP service")
    serve.add_argument("--model", default="toy-64", help="model tag (toy-<dim> or clip-*)")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8600)
    serve.set_defaults(func=cmd_serve)

    pre = sub.add_parser("precompute", help="encode a gallery manifest into an EMBV1 file")
    pre.add_argument("--manifest", required=True, help="JSONL of {image_id, path}")
    pre.add_argument("--model", required=True)
    pre.add_argument("--out", required=True)
    pre.add_argument("--skip-bad", action="store_true", help="skip undecodable images")
    pre.set_defaults(func=cmd_precompute)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ManifestError, EncoderError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DecodeFailures as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
