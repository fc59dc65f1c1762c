"""Command-line interface: ``splitlora {train,generate,merge,eval,inspect,replay}``.

Exit codes: 0 success, 2 usage or validation error, 3 IO error or corrupt
input. Every command that writes files first writes ``manifest.json`` into
its output directory; ``splitlora replay manifest.json`` re-runs it.
Relative output paths are resolved under ``$UZLR_OUT`` when it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .base_model import load_base
from .checkpoint import Checkpoint, CheckpointError, load
from .denoiser import prompt_words, to_ppm
from .evaluate import disentanglement_report, report_csv, sample_mode
from .lora import MODES, ConfigMismatch
from .synthworld import render
from .train import ConfigError, TrainConfig, loss_log_csv, parameter_table, run_training, training_pair

log = logging.getLogger("splitlora")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3

MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class IOFailure(Exception):
    pass


# --------------------------------------------------------------------------- helpers


def resolve_out(path: str | None, default: str) -> Path:
    p = Path(path if path else default)
    root = os.environ.get("UZLR_OUT")
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _prepare_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create output directory {path}: {exc}") from None
    return path


def _write(path: Path, data: bytes | str) -> None:
    try:
        if isinstance(data, str):
            path.write_text(data, encoding="utf-8")
        else:
            path.write_bytes(data)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from None


def write_manifest(out: Path, command: str, argv: list[str], config: dict, seed: int, config_hash: int) -> dict:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "out_dir": str(out),
        "version": __version__,
        "config_hash": f"{config_hash:016x}",
    }
    _write(out / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _read_checkpoint(path: str) -> Checkpoint:
    try:
        return load(path)
    except (OSError, CheckpointError) as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from None


def _base_for(ckpt: Checkpoint):
    base = load_base()
    if ckpt.config_hash != base.config_hash:
        raise ConfigMismatch(
            f"checkpoint base {ckpt.config_hash:016x} does not match the available base {base.config_hash:016x}"
        )
    return base


# --------------------------------------------------------------------------- commands


def cmd_train(args, argv) -> int:
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    except OSError as exc:
        raise UsageError(f"cannot read config file {args.config}: {exc}") from None
    config = TrainConfig.loads(text, args.set or [])
    return _train(config, resolve_out(args.out, "train-out"), argv, args.verbose)


def _train(config: TrainConfig, out: Path, argv: list[str], verbose: bool = False) -> int:
    base = load_base()
    subject, style = training_pair(config, base.spec)
    _prepare_dir(out)
    resolved = asdict(config)
    resolved.update(subject_resolved=subject, style_resolved=style)
    write_manifest(out, "train", argv, resolved, config.seed, base.config_hash)

    progress = None
    if verbose:
        def progress(row):
            if row["step"] % 100 == 0:
                log.info("step %d L_DB %.4f", row["step"], row["L_DB"])

    result = run_training(base, config, progress=progress)
    _write(out / "checkpoint.uzlr", result.checkpoint.to_bytes())
    _write(out / "loss.csv", loss_log_csv(result.history))
    image = render(base.spec.subject(subject), base.spec.style(style))
    _write(out / "train.ppm", to_ppm(image))
    if result.auditor.violations:
        log.warning("%d invariant violations; first: %s", len(result.auditor.violations), result.auditor.violations[0])
    print(f"trained {config.variant} on {subject}/{style}: {out / 'checkpoint.uzlr'}")
    return EXIT_OK


def cmd_generate(args, argv) -> int:
    ckpt = _read_checkpoint(args.checkpoint)
    base = _base_for(ckpt)
    words = {}
    if args.subject is not None:
        words["subject_word"] = args.subject
    if args.style is not None:
        words["style_word"] = args.style
    known = set(base.vocab.index)
    for w in words.values():
        if w not in known:
            raise UsageError(f"unknown prompt word {w!r}")
    out = _prepare_dir(resolve_out(args.out, "generate-out"))
    config = {"checkpoint": args.checkpoint, "mode": args.mode, "n": args.n, "steps": args.steps, **words}
    write_manifest(out, "generate", argv, config, args.seed, base.config_hash)

    images = sample_mode(ckpt, base, args.mode, n_samples=args.n, seed=args.seed, steps=args.steps, **words)
    prompt = prompt_words(words.get("subject_word", "<c>"), words.get("style_word", "<s>"))
    records = []
    for i, img in enumerate(images):
        name = f"sample_{i:03d}.ppm"
        _write(out / name, to_ppm(img))
        records.append(json.dumps({
            "file": name,
            "index": i,
            "mode": args.mode,
            "seed": args.seed,
            "noise_stream": [args.seed, 3, i],
            "sampler": "ddim",
            "eta": 0.0,
            "steps": args.steps,
            "clip": 2.0,
            "prompt": " ".join(prompt),
        }, sort_keys=True))
    _write(out / "samples.jsonl", "".join(r + "\n" for r in records))
    print(f"wrote {len(images)} samples to {out}")
    return EXIT_OK


def merge_checkpoints(content: Checkpoint, style: Checkpoint) -> Checkpoint:
    """Content set of the first checkpoint with the style set of the second.

    Blocks whose policies disagree keep the content checkpoint's mode.
    """
    if content.config_hash != style.config_hash:
        raise ConfigMismatch(f"config hash {content.config_hash:016x} != {style.config_hash:016x}")
    return Checkpoint(content.config_hash, content.vocab_seed, content.content, style.style, dict(content.policy))


def cmd_merge(args, argv) -> int:
    a = _read_checkpoint(args.content)
    b = _read_checkpoint(args.style)
    merged = merge_checkpoints(a, b)
    out = _prepare_dir(resolve_out(args.out, "merge-out"))
    config = {"content": args.content, "style": args.style}
    write_manifest(out, "merge", argv, config, 0, merged.config_hash)
    _write(out / "checkpoint.uzlr", merged.to_bytes())
    print(f"merged checkpoint: {out / 'checkpoint.uzlr'}")
    return EXIT_OK


def _training_factors(args) -> tuple[str, str]:
    subject, style = args.subject, args.style
    sibling = Path(args.checkpoint).with_name(MANIFEST)
    if (subject is None or style is None) and sibling.exists():
        try:
            cfg = json.loads(sibling.read_text(encoding="utf-8")).get("config", {})
        except (OSError, ValueError):
            cfg = {}
        subject = subject or cfg.get("subject_resolved")
        style = style or cfg.get("style_resolved")
    if subject is None or style is None:
        raise UsageError("cannot tell which subject/style the checkpoint was trained on; pass --subject and --style")
    return subject, style


def cmd_eval(args, argv) -> int:
    ckpt = _read_checkpoint(args.checkpoint)
    base = _base_for(ckpt)
    subject, style = _training_factors(args)
    try:
        base.spec.subject(subject)
        base.spec.style(style)
    except KeyError as exc:
        raise UsageError(f"unknown factor {exc}") from None
    out = _prepare_dir(resolve_out(args.out, "eval-out"))
    config = {"checkpoint": args.checkpoint, "subject": subject, "style": style, "n": args.n, "steps": args.steps}
    write_manifest(out, "eval", argv, config, args.seed, base.config_hash)
    rows = disentanglement_report(ckpt, base, subject, style, n_samples=args.n, seed=args.seed, steps=args.steps)
    text = report_csv(rows)
    _write(out / "report.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def format_inspect(ckpt: Checkpoint) -> str:
    rows = parameter_table(ckpt)
    header = f"{'layer':<10}{'d_in':>6}{'d_out':>7}{'r':>4}{'|S_c|':>7}{'|S_s|':>7}{'overlap':>9}  {'mode':<14}{'trainable':>10}"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r.layer_id:<10}{r.d_in:>6}{r.d_out:>7}{r.rank:>4}{r.support_c:>7}{r.support_s:>7}"
            f"{r.overlap:>9}  {r.mode:<14}{r.trainable:>10}"
        )
    trainable = sum(r.trainable for r in rows)
    full = sum(r.full_pair for r in rows)
    frac = trainable / full if full else 0.0
    lines.append(
        f"TOTAL trainable={trainable} full_pair={full} fraction={frac:.4f} reduction={100 * (1 - frac):.2f}%"
    )
    return "\n".join(lines) + "\n"


def cmd_inspect(args, argv) -> int:
    sys.stdout.write(format_inspect(_read_checkpoint(args.checkpoint)))
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"manifest not found: {args.manifest}") from None
    except (OSError, ValueError) as exc:
        raise IOFailure(f"cannot read manifest {args.manifest}: {exc}") from None
    if manifest.get("version") != __version__:
        log.warning("manifest written by version %s, replaying with %s", manifest.get("version"), __version__)
    if manifest.get("command") == "train":
        # the recorded config is complete, so the original file is not needed
        values = {k: str(v).lower() if isinstance(v, bool) else str(v)
                  for k, v in manifest["config"].items() if not k.endswith("_resolved")}
        config = TrainConfig.from_mapping(values)
        out = Path(args.out) if args.out else Path(manifest["out_dir"])
        argv = ["train", "<replayed>", "--out", str(out)] + [f"--set={k}={v}" for k, v in values.items()]
        return _train(config, out, argv, args.verbose)
    replay_argv = list(manifest["argv"])
    if args.out:
        replay_argv = _with_out(replay_argv, args.out)
    return main(replay_argv)


def _with_out(argv: list[str], out: str) -> list[str]:
    res, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        res.append(a)
    return res + ["--out", out]


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitlora", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a content/style LoRA pair on one synthetic image")
    t.add_argument("config", help="flat key=value config file")
    t.add_argument("--out", help="output directory")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample images in one inference mode")
    g.add_argument("checkpoint")
    g.add_argument("--mode", required=True, choices=MODES)
    g.add_argument("--subject", help="word for the subject slot (default <c>)")
    g.add_argument("--style", help="word for the style slot (default <s>)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=4)
    g.add_argument("--steps", type=int, default=50)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    m = sub.add_parser("merge", help="content set of one checkpoint with the style set of another")
    m.add_argument("content")
    m.add_argument("style")
    m.add_argument("--out")
    m.set_defaults(func=cmd_merge)

    e = sub.add_parser("eval", help="probe-based disentanglement report")
    e.add_argument("checkpoint")
    e.add_argument("--subject")
    e.add_argument("--style")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--n", type=int, default=16)
    e.add_argument("--steps", type=int, default=50)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="per-layer mask and parameter table")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)

    r = sub.add_parser("replay", help="re-run a command from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="write to this directory instead of the recorded one")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    for n in ("n", "steps"):
        if getattr(args, n, 1) is not None and getattr(args, n, 1) < 1:
            print(f"error: --{n} must be at least 1", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError, ConfigMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IOFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
