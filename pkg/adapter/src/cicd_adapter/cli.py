"""cicd-adapter command line: serve a model endpoint, export embeddings.

Exit codes: 0 success, 1 usage error, 2 model/backend failure.
"""

from __future__ import annotations

import argparse
import sys

from .embed import DuplicateIdError, export_embeddings
from .server import serve_socket, serve_stdio
from .stub import StubModel


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cicd-adapter", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="answer cicd/1 requests on stdio or a socket")
    p.add_argument("--stub", action="store_true",
                   help="deterministic tabular-logits model (no weights)")
    p.add_argument("--stub-seed", type=int, default=0)
    p.add_argument("--model", default=None,
                   help="hf:<model-id> for a transformers vision-language model")
    p.add_argument("--image-dir", default=".",
                   help="directory session image ids resolve against (real mode)")
    p.add_argument("--device", default="cpu")
    p.add_argument("--prompt-template", default=None)
    p.add_argument("--socket", default=None, help="host:port or /unix/path (default stdio)")
    p.add_argument("--once", action="store_true", help="exit after one socket connection")
    p.add_argument("--logits-b64", action="store_true")
    p.add_argument("--max-sessions", type=int, default=64,
                   help="per-connection session cap")

    p = sub.add_parser("export-embeddings", help="write a CICD-EMB v1 file for an image dir")
    p.add_argument("image_dir")
    p.add_argument("out_file")
    p.add_argument("--encoder", default="stats", help="stats | clip:<model-id>")

    return parser


def _load_model(args):
    if args.stub:
        return StubModel(table_seed=args.stub_seed)
    if args.model:
        if not args.model.startswith("hf:"):
            raise ValueError(f"model spec must be hf:<model-id>, got {args.model!r}")
        from .hf import DEFAULT_TEMPLATE, HFVisionLanguageModel

        return HFVisionLanguageModel(
            args.model[3:], image_dir=args.image_dir, device=args.device,
            prompt_template=args.prompt_template or DEFAULT_TEMPLATE)
    raise ValueError("serve needs --stub or --model hf:<model-id>")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        try:
            model = _load_model(args)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        except Exception as exc:
            print(f"model load failed: {exc}", file=sys.stderr)
            return 2
        if args.socket:
            serve_socket(model, args.socket, once=args.once,
                         logits_b64=args.logits_b64, max_sessions=args.max_sessions)
        else:
            serve_stdio(model, logits_b64=args.logits_b64,
                        max_sessions=args.max_sessions)
        return 0
    if args.command == "export-embeddings":
        try:
            summary = export_embeddings(args.image_dir, args.out_file,
                                        encoder=args.encoder)
        except (DuplicateIdError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        except Exception as exc:
            print(f"export failed: {exc}", file=sys.stderr)
            return 2
        print(f"{summary['written']} embeddings (dim {summary['dim']}) "
              f"-> {summary['out_file']}"
              + (f"; skipped {summary['skipped']}" if summary["skipped"] else ""))
        return 0
    return 1


if __name__ == "__main__":
    sys.exit(main())
