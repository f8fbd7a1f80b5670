"""Command-line harness.

Subcommands: make-world, decode, experiment, sweep-gamma, analyze, serve,
export-embeddings, rerun. Every run writes a manifest with the fully
resolved parameters and input-file digests, sufficient to reproduce the
outputs byte for byte (``cicd rerun manifest.json``).

Exit codes: 0 success, 1 usage/config error, 2 backend/protocol error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import shlex
import socket
import subprocess
import sys
import traceback
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .engine import EngineConfig, SessionPair, generate
from .errors import CicdError, ConfigError, NotFound, ParseError, SessionError
from .experiments import (
    analyze_consistency,
    calibrate_weights,
    choose_contrast,
    derive_seed,
    run_experiment,
    sweep_gamma,
)
from .protocol import WireBackendClient, serve_stream
from .selector import build_store, load_store, save_store, select_retrieved
from .simworld import (
    SimBackend,
    WorldConfig,
    build_world,
    image_indicator_embeddings,
    load_world,
    save_world,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_BACKEND = 2
EXIT_INTERNAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _default_seed() -> int:
    env = os.environ.get("CICD_SEED")
    return int(env) if env else 0


def _parse_gamma(text: str) -> float:
    try:
        return float(text)  # accepts -inf/inf spellings
    except ValueError:
        raise ConfigError(f"bad gamma value {text!r}")


def _parse_alpha_mode(text: str) -> tuple[str, float | None]:
    if text in ("dynamic", "off"):
        return text, None
    if text.startswith("fixed:"):
        try:
            return "fixed", float(text.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad fixed alpha in {text!r}")
    raise ConfigError(f"alpha mode must be dynamic, off, or fixed:<value>, got {text!r}")


def _engine_config(args) -> EngineConfig:
    mode, fixed = _parse_alpha_mode(args.alpha_mode)
    return EngineConfig(
        gamma=_parse_gamma(args.gamma), beta=args.beta,
        alpha_mode=mode, fixed_alpha=fixed,
        temperature=args.temperature, greedy=args.greedy,
        max_len=args.max_len, seed=args.seed,
    )


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma", default="-4", help="gating threshold on log10 JSD; -inf allowed")
    p.add_argument("--beta", type=float, default=0.1, help="plausibility cutoff in (0,1)")
    p.add_argument("--alpha-mode", default="dynamic", help="dynamic | off | fixed:<value>")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--greedy", action="store_true", help="argmax instead of sampling")
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--seed", type=int, default=_default_seed())


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, params: dict, inputs: dict,
                    argv: list[str] | None = None, path: Path | None = None) -> None:
    """Record everything needed to reproduce a run byte-for-byte.

    ``argv`` is the resolved argument vector minus the output location;
    ``cicd rerun`` replays it against a fresh output path.
    """
    manifest = {
        "tool": "cicd",
        "version": __version__,
        "command": command,
        "argv": argv or [],
        "params": params,
        "input_digests": {str(k): _file_digest(k) for k in inputs.values() if k},
        "inputs": {k: str(v) for k, v in inputs.items() if v},
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    target = path if path is not None else out_dir / "manifest.json"
    target.write_text(json.dumps(_json_safe(manifest), indent=1, sort_keys=True,
                                 allow_nan=False))


def _engine_argv(args) -> list[str]:
    return ["--gamma", repr(_parse_gamma(args.gamma)), "--beta", repr(args.beta),
            "--alpha-mode", args.alpha_mode, "--temperature", repr(args.temperature),
            "--max-len", str(args.max_len), "--seed", str(args.seed)] + (
                ["--greedy"] if args.greedy else [])


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _json_safe(obj):
    """Strict-JSON view: non-finite floats become their repr strings."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else repr(obj)
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_json_safe(obj), indent=1, sort_keys=True,
                               allow_nan=False))


def _write_histogram_csv(path: Path, histogram_rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "count"])
        for low, high, count in histogram_rows:
            writer.writerow([repr(float(low)), repr(float(high)), count])


# ---------------------------------------------------------------------------
# Backends for decode
# ---------------------------------------------------------------------------

class _SubprocessBackend(WireBackendClient):
    def __init__(self, argv: list[str]):
        self._proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        super().__init__(self._proc.stdout, self._proc.stdin)

    def close(self) -> None:
        super().close()
        try:
            self._proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()


class _SocketBackend(WireBackendClient):
    def __init__(self, address: str):
        if ":" in address and not address.startswith("/"):
            host, port = address.rsplit(":", 1)
            self._sock = socket.create_connection((host, int(port)))
        else:
            self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            self._sock.connect(address)
        super().__init__(self._sock.makefile("rb"), self._sock.makefile("wb"))

    def close(self) -> None:
        super().close()
        self._sock.close()


def _resolve_backend(spec: str):
    """Backend spec: sim:<world.json> | cmd:<command line> | socket:<addr>."""
    if spec.startswith("sim:"):
        world = load_world(spec[4:])
        return SimBackend(world), world
    if spec.startswith("cmd:"):
        client = _SubprocessBackend(shlex.split(spec[4:]))
        client.handshake()
        return client, None
    if spec.startswith("socket:"):
        client = _SocketBackend(spec[7:])
        client.handshake()
        return client, None
    raise ConfigError(f"backend spec must start with sim:/cmd:/socket:, got {spec!r}")


def _resolve_contrast(args, backend, world) -> str:
    spec = args.contrast
    if spec == "random":
        if world is None:
            raise ConfigError("--contrast random needs a sim: backend (image pool unknown)")
        return choose_contrast(world, args.image, "random",
                               derive_seed("cli-contrast", args.seed, args.image))
    if spec.startswith("retrieve:"):
        store = load_store(spec.split(":", 1)[1])
        return select_retrieved(store, args.image, store.vector(args.image)).chosen_id
    if spec == args.image:
        raise ConfigError("contrast image must differ from --image")
    return spec


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

OUT_SLOT = "{OUT}"


def cmd_make_world(args) -> int:
    cfg = WorldConfig(
        n_function_words=args.function_words, n_objects=args.objects,
        n_images=args.images, objects_per_image=args.objects_per_image,
        caption_len=args.caption_len, template=args.template,
        w_lang=args.w_lang, w_vis=args.w_vis,
        prior_jitter=args.prior_jitter, seed=args.seed,
    )
    if args.calibrate:
        cfg, _report = calibrate_weights(cfg)
    world = build_world(cfg)
    save_world(world, args.out_file)
    argv = ["make-world", OUT_SLOT,
            "--seed", str(cfg.seed), "--images", str(cfg.n_images),
            "--objects", str(cfg.n_objects),
            "--objects-per-image", str(cfg.objects_per_image),
            "--function-words", str(cfg.n_function_words),
            "--caption-len", str(cfg.caption_len), "--template", cfg.template,
            "--w-lang", repr(cfg.w_lang), "--w-vis", repr(cfg.w_vis),
            "--prior-jitter", repr(cfg.prior_jitter)]
    _write_manifest(Path("."), "make-world",
                    {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
                    {}, argv=argv,
                    path=Path(str(args.out_file) + ".manifest.json"))
    print(f"world: {len(world.images)} images, vocab {world.vocab_size} -> {args.out_file}")
    return EXIT_OK


def cmd_decode(args) -> int:
    backend, world = _resolve_backend(args.backend)
    cfg = _engine_config(args)
    contrast_id = _resolve_contrast(args, backend, world)
    prompt = [int(t) for t in args.prompt_tokens.split(",") if t] if args.prompt_tokens else []
    pair = SessionPair(backend, backend, args.image, contrast_id)
    result = generate(pair, prompt, cfg, full_trace=args.full_trace)
    out = _out_dir(args)
    result.write_trace_jsonl(out / "trace.jsonl", full=args.full_trace)
    _dump_json(out / "result.json", {
        "image": args.image, "contrast": contrast_id,
        "tokens": result.tokens, "text": result.text,
        "config": cfg.to_dict(),
    })
    argv = ["decode", "--backend", args.backend, "--image", args.image,
            "--contrast", args.contrast, "--prompt-tokens", args.prompt_tokens,
            *_engine_argv(args), *(["--full-trace"] if args.full_trace else []),
            "--out", OUT_SLOT]
    _write_manifest(out, "decode", {
        "backend": args.backend, "image": args.image, "contrast": args.contrast,
        "resolved_contrast": contrast_id, "prompt_tokens": args.prompt_tokens,
        "full_trace": args.full_trace, **cfg.to_dict(),
    }, {"world": args.backend[4:] if args.backend.startswith("sim:") else None},
        argv=argv)
    backend.close()
    print(result.text)
    return EXIT_OK


def _seed_list(args) -> list[int]:
    if args.seeds:
        return [int(s) for s in args.seeds.split(",") if s]
    return [args.seed + i for i in range(args.n_seeds)]


def cmd_experiment(args) -> int:
    world = load_world(args.world)
    if args.n_images is not None:
        if args.n_images <= 0:
            raise ConfigError("--n-images must be positive")
        images = sorted(world.images)[: args.n_images]
    else:
        images = None
    cfg = _engine_config(args)
    report = run_experiment(world, cfg, _seed_list(args), images=images,
                            contrast_mode=args.contrast)
    out = _out_dir(args)
    _dump_json(out / "report.json", report)
    _write_histogram_csv(out / "histogram.csv",
                         report["arms"]["cicd"]["jsd"]["histogram"])
    argv = ["experiment", str(args.world),
            "--seeds", ",".join(str(s) for s in _seed_list(args)),
            "--contrast", args.contrast, *_engine_argv(args),
            *(["--n-images", str(args.n_images)] if args.n_images else []),
            "--out", OUT_SLOT]
    _write_manifest(out, "experiment", {
        "world": str(args.world), "n_images": args.n_images,
        "seeds": _seed_list(args), "contrast": args.contrast, **cfg.to_dict(),
    }, {"world": args.world}, argv=argv)
    comp = report["comparison"]
    print(f"chair_s: regular {report['arms']['regular']['chair_s']:.4f} "
          f"cicd {report['arms']['cicd']['chair_s']:.4f} "
          f"(rel. reduction {comp['chair_s_relative_reduction']:.1%})")
    print(f"chair_i: regular {report['arms']['regular']['chair_i']:.4f} "
          f"cicd {report['arms']['cicd']['chair_i']:.4f} "
          f"(rel. reduction {comp['chair_i_relative_reduction']:.1%})")
    print(f"recall delta: {comp['recall_delta']:+.4f}")
    return EXIT_OK


def cmd_sweep_gamma(args) -> int:
    world = load_world(args.world)
    gammas = [_parse_gamma(g) for g in args.gammas.split(",") if g]
    if not gammas:
        raise ConfigError("empty gamma list")
    images = sorted(world.images)[: args.n_images] if args.n_images else None
    cfg = _engine_config(args)
    rows = sweep_gamma(world, cfg, gammas, _seed_list(args), images=images,
                       contrast_mode=args.contrast)
    out = _out_dir(args)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gamma", "chair_s", "chair_i"])
        for row in rows:
            writer.writerow([repr(row["gamma"]), repr(row["chair_s"]), repr(row["chair_i"])])
    _dump_json(out / "sweep.json", rows)
    argv = ["sweep-gamma", str(args.world), "--gammas", args.gammas,
            "--seeds", ",".join(str(s) for s in _seed_list(args)),
            "--contrast", args.contrast, *_engine_argv(args),
            *(["--n-images", str(args.n_images)] if args.n_images else []),
            "--out", OUT_SLOT]
    _write_manifest(out, "sweep-gamma", {
        "world": str(args.world), "gammas": args.gammas, "n_images": args.n_images,
        "seeds": _seed_list(args), "contrast": args.contrast, **cfg.to_dict(),
    }, {"world": args.world}, argv=argv)
    for row in rows:
        print(f"gamma={row['gamma']}: chair_s {row['chair_s']:.4f} chair_i {row['chair_i']:.4f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if not args.world and not args.trace:
        raise ConfigError("analyze needs --world and/or --trace")
    out = _out_dir(args)
    inputs = {}
    if args.world:
        world = load_world(args.world)
        report = analyze_consistency(world, n_pairs=args.n_pairs, seed=args.seed)
        _dump_json(out / "consistency.json", report)
        inputs["world"] = args.world
        print(json.dumps(report, indent=1, sort_keys=True))
    if args.trace:
        rows = []
        with open(args.trace, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rows.append(json.loads(line))
        with open(out / "trace.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "log10_jsd", "gated", "token_text"])
            for row in rows:
                log10 = row["log10_jsd"]
                writer.writerow([row["step"],
                                 "-inf" if log10 is None else repr(log10),
                                 row["gated"], row["token_text"]])
        inputs["trace"] = args.trace
    argv = ["analyze",
            *(["--world", args.world] if args.world else []),
            *(["--trace", args.trace] if args.trace else []),
            "--n-pairs", str(args.n_pairs), "--seed", str(args.seed),
            "--out", OUT_SLOT]
    _write_manifest(out, "analyze", {
        "world": args.world, "trace": args.trace,
        "n_pairs": args.n_pairs, "seed": args.seed,
    }, inputs, argv=argv)
    return EXIT_OK


def cmd_serve(args) -> int:
    world = load_world(args.world)
    backend = SimBackend(world)
    if args.socket:
        if args.socket.startswith("/"):
            server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            server.bind(args.socket)
        else:
            host, port = args.socket.rsplit(":", 1)
            server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            server.bind((host, int(port)))
        server.listen(1)
        while True:
            conn, _addr = server.accept()
            with conn:
                serve_stream(backend, conn.makefile("rb"), conn.makefile("wb"),
                             logits_b64=args.logits_b64)
            if args.once:
                break
        server.close()
    else:
        serve_stream(backend, sys.stdin.buffer, sys.stdout.buffer,
                     logits_b64=args.logits_b64)
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    world = load_world(args.world)
    store = build_store(image_indicator_embeddings(world))
    save_store(store, args.out_file)
    _write_manifest(Path("."), "export-embeddings",
                    {"world": str(args.world)}, {"world": args.world},
                    argv=["export-embeddings", str(args.world), OUT_SLOT],
                    path=Path(str(args.out_file) + ".manifest.json"))
    print(f"{len(store)} embeddings (dim {store.dim}) -> {args.out_file}")
    return EXIT_OK


def cmd_conformance(args) -> int:
    """Drive a live backend endpoint through the protocol conformance suite."""
    from .conformance import ConformanceFailure, run_conformance

    proc = None
    sock = None
    if args.backend.startswith("sim:"):
        argv = [sys.executable, "-m", "cicd", "serve", "--world", args.backend[4:]]
        proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        rfile, wfile = proc.stdout, proc.stdin
    elif args.backend.startswith("cmd:"):
        proc = subprocess.Popen(shlex.split(args.backend[4:]),
                                stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        rfile, wfile = proc.stdout, proc.stdin
    elif args.backend.startswith("socket:"):
        address = args.backend[7:]
        if ":" in address and not address.startswith("/"):
            host, port = address.rsplit(":", 1)
            sock = socket.create_connection((host, int(port)))
        else:
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            sock.connect(address)
        rfile, wfile = sock.makefile("rb"), sock.makefile("wb")
    else:
        raise ConfigError(f"backend spec must start with sim:/cmd:/socket:, got {args.backend!r}")
    try:
        report = run_conformance(rfile, wfile, args.image_a, args.image_b)
    except ConformanceFailure as exc:
        print(f"conformance FAILED: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    finally:
        if proc is not None:
            proc.terminate()
            proc.wait(timeout=10)
        if sock is not None:
            sock.close()
    for check in report["checks"]:
        print(f"ok {check}")
    print(f"conformance passed ({len(report['checks'])} checks, "
          f"vocab {report['vocab_size']})")
    return EXIT_OK


def cmd_rerun(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    argv = manifest.get("argv")
    if not argv:
        raise ConfigError(f"manifest {args.manifest} carries no argv to replay")
    if OUT_SLOT in argv:
        argv = [args.out if a == OUT_SLOT else a for a in argv]
    return main(argv)


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="cicd", description=__doc__)
    parser.add_argument("--version", action="version", version=f"cicd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-world", help="build and save a synthetic world")
    p.add_argument("out_file")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--objects", type=int, default=36)
    p.add_argument("--objects-per-image", type=int, default=5)
    p.add_argument("--function-words", type=int, default=24)
    p.add_argument("--caption-len", type=int, default=12)
    p.add_argument("--template", default="ffo")
    p.add_argument("--w-lang", type=float, default=2.0)
    p.add_argument("--w-vis", type=float, default=1.3)
    p.add_argument("--prior-jitter", type=float, default=0.0)
    p.add_argument("--calibrate", action="store_true",
                   help="sweep channel weights until divergence regimes separate")
    p.set_defaults(func=cmd_make_world)

    p = sub.add_parser("decode", help="decode one caption against a backend")
    p.add_argument("--backend", required=True, help="sim:<world.json> | cmd:<argv> | socket:<addr>")
    p.add_argument("--image", required=True)
    p.add_argument("--contrast", default="random",
                   help="random | retrieve:<emb-file> | <image-id>")
    p.add_argument("--prompt-tokens", default="", help="comma-separated token ids")
    p.add_argument("--full-trace", action="store_true")
    p.add_argument("--out", default="out")
    _add_engine_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("experiment", help="regular-vs-contrastive corpus run")
    p.add_argument("world")
    p.add_argument("--n-images", type=int, default=None)
    p.add_argument("--seeds", default="", help="comma-separated seed list")
    p.add_argument("--n-seeds", type=int, default=1)
    p.add_argument("--contrast", default="random", help="random | retrieved | <image-id>")
    p.add_argument("--out", default="out")
    _add_engine_flags(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("sweep-gamma", help="one experiment per gating threshold")
    p.add_argument("world")
    p.add_argument("--gammas", required=True, help="comma-separated, -inf allowed")
    p.add_argument("--n-images", type=int, default=None)
    p.add_argument("--seeds", default="")
    p.add_argument("--n-seeds", type=int, default=1)
    p.add_argument("--contrast", default="random")
    p.add_argument("--out", default="out")
    _add_engine_flags(p)
    p.set_defaults(func=cmd_sweep_gamma)

    p = sub.add_parser("analyze", help="cross-image consistency and trace export")
    p.add_argument("--world", default=None)
    p.add_argument("--trace", default=None)
    p.add_argument("--n-pairs", type=int, default=50)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("serve", help="serve a synthetic world over the wire protocol")
    p.add_argument("--world", required=True)
    p.add_argument("--socket", default=None, help="host:port or /unix/path (default: stdio)")
    p.add_argument("--once", action="store_true", help="exit after one socket connection")
    p.add_argument("--logits-b64", action="store_true",
                   help="send logits as base64 float32")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("export-embeddings", help="object-indicator embeddings for a world")
    p.add_argument("world")
    p.add_argument("out_file")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("conformance",
                       help="run the wire-protocol conformance suite against a backend")
    p.add_argument("--backend", required=True,
                   help="sim:<world.json> | cmd:<argv> | socket:<addr>")
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.set_defaults(func=cmd_conformance)

    p = sub.add_parser("rerun", help="re-execute a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default="out-rerun")
    p.set_defaults(func=cmd_rerun)

    return parser


_NEGATIVE_VALUE_FLAGS = {"--gamma", "--gammas"}


def _merge_negative_values(argv: list[str]) -> list[str]:
    """Join `--gamma -inf` into `--gamma=-inf` so argparse keeps the value."""
    merged = []
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg in _NEGATIVE_VALUE_FLAGS and i + 1 < len(argv):
            merged.append(f"{arg}={argv[i + 1]}")
            i += 2
        else:
            merged.append(arg)
            i += 1
    return merged


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(_merge_negative_values(
            list(sys.argv[1:] if argv is None else argv)))
        return args.func(args)
    except (ConfigError, NotFound, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SessionError, ParseError, BrokenPipeError, ConnectionError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (CicdError, Exception) as exc:  # noqa: B014 - split for exit codes
        if not isinstance(exc, CicdError):
            traceback.print_exc()
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
