"""gcot-trainer-bridge: train <manifest> | serve <model_ref> | init-tiny <dir>."""

import argparse
import logging
import sys

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcot-trainer-bridge")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fine-tune per a training manifest")
    p_train.add_argument("manifest", help="path to the manifest JSON")

    p_serve = sub.add_parser("serve", help="serve a checkpoint or adapter dir")
    p_serve.add_argument("model_ref", help="checkpoint dir or adapter dir")
    p_serve.add_argument("--port", type=int, default=8080)
    p_serve.add_argument("--host", default="127.0.0.1")

    p_tiny = sub.add_parser("init-tiny", help="write a tiny random base checkpoint")
    p_tiny.add_argument("out_dir")
    p_tiny.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level="INFO", format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            from .train import train

            model_ref = train(args.manifest)
            print(model_ref)
            return 0
        if args.command == "serve":
            from .serve import serve

            serve(args.model_ref, port=args.port, host=args.host)
            return 0
        if args.command == "init-tiny":
            from .tinybase import init_tiny

            print(init_tiny(args.out_dir, seed=args.seed))
            return 0
    except Exception as exc:  # contract: nonzero exit + stderr diagnostics
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
