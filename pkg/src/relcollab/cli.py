"""Command-line entry point: ``relcollab {synth,train,eval,inspect-relations}``.

Every command writes a ``manifest.json`` into its output directory. Failures
print one line on stderr, ``relcollab-error:<kind>: <message>``, and exit
with the code listed in ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Optional, Sequence

from .config import cache_dir, load_config, resolve_dataset
from .data import ConfigError, DomainTag, PhantomConfig, generate_phantom_dataset, make_folds
from .dataio import MANIFEST, load_dataset, save_dataset
from .inspect import inspect_relations
from .metrics import MissingSpacingError
from .trainer import MODES, NonFiniteLossError, TrainConfig, evaluate, load_checkpoint, train

log = logging.getLogger("relcollab")

EXIT_CODES = {"config": 1, "missing-dataset": 2, "missing-spacing": 2, "non-finite-loss": 3,
              "no-relations": 4, "io": 5, "invalid-input": 6}


class CommandError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind
        self.code = EXIT_CODES[kind]


def version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Provenance record stored as ``manifest.json`` in each run directory."""

    command: list[str]
    config: dict
    seeds: dict
    version: str = field(default_factory=version)
    input_hashes: dict = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: Optional[str] = None

    def write(self, out_dir) -> Path:
        self.finished = _now()
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path


# ---------------------------------------------------------------------------
# helpers


def _overrides(args) -> dict:
    over: dict = {"data": {}, "train": {}, "phantom": {}}
    if getattr(args, "mode", None):
        over["train"]["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        over["train"]["seed"] = args.seed
        over["phantom"]["seed"] = args.seed
    if getattr(args, "fold", None) is not None:
        over["data"]["fold"] = args.fold
    if getattr(args, "deterministic", False):
        over["train"]["deterministic"] = True
    if getattr(args, "dataset", None):
        over["data"]["dataset"] = args.dataset
    return over


def _config(args) -> dict:
    return load_config(args.config, _overrides(args))


def _phantom(cfg: dict) -> PhantomConfig:
    return PhantomConfig.from_dict(cfg["phantom"])


def _synthesize(pc: PhantomConfig, out: Path) -> dict:
    samples = generate_phantom_dataset(pc)
    return save_dataset(samples, out, seed=pc.seed, config=pc.to_dict(), config_hash=pc.digest())


def _dataset_dir(cfg: dict, config_path: Optional[str]) -> Path:
    """Configured dataset directory, or a phantom cached under ``RELCOLLAB_CACHE``."""
    ds = cfg["data"].get("dataset")
    if ds:
        base = Path(config_path).parent if config_path else None
        root = resolve_dataset(ds, base)
        if not (root / MANIFEST).exists():
            raise CommandError("missing-dataset", f"dataset not found: {ds}")
        return root
    pc = _phantom(cfg)
    root = cache_dir() / f"phantom-{pc.digest()[:16]}"
    if not (root / MANIFEST).exists():
        log.info("synthesizing phantom dataset into %s", root)
        _synthesize(pc, root)
    return root


def _split(cfg: dict, labeled_ids: Sequence[str]) -> tuple[list[str], list[str]]:
    d = cfg["data"]
    if not d.get("k"):
        return list(labeled_ids), list(labeled_ids)
    folds = make_folds(labeled_ids, int(d["k"]), int(d["split_seed"]), bool(d["few_shot"]))
    fold = int(d["fold"])
    if not 0 <= fold < len(folds):
        raise ConfigError(f"fold {fold} out of range for k={len(folds)}")
    return list(folds[fold].train_ids), list(folds[fold].test_ids)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _config(args)
    pc = _phantom(cfg)
    out = Path(args.out)
    manifest = _synthesize(pc, out)
    log.info("wrote %d samples to %s", len(manifest["ids"]), out)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    tcfg = TrainConfig.from_dict(cfg["train"])
    cfg["train"] = tcfg.to_dict()
    root = _dataset_dir(cfg, args.config)
    samples = load_dataset(root)
    by_tag = {t: [s for s in samples if s.domain_tag is t] for t in DomainTag}
    labeled = by_tag[DomainTag.TARGET_LABELED]
    train_ids, test_ids = _split(cfg, [s.id for s in labeled])
    keep = set(train_ids)
    target = [s for s in labeled if s.id in keep] + by_tag[DomainTag.TARGET_UNLABELED]
    held = set(test_ids)
    eval_set = [s for s in labeled if s.id in held]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "split.json").write_text(json.dumps({"train": train_ids, "test": test_ids}, indent=2))
    manifest = RunManifest(
        command=["train", *args.argv],
        config=cfg, seeds={"train": tcfg.seed, "split": cfg["data"]["split_seed"]},
        input_hashes={"dataset_manifest": file_sha256(root / MANIFEST)},
    )
    manifest.config["data"]["resolved_dataset"] = str(root)
    try:
        res = train(tcfg, target, by_tag[DomainTag.AUXILIARY], eval_set=eval_set, run_dir=out)
    except NonFiniteLossError as exc:
        raise CommandError("non-finite-loss", f"step {exc.step}: {exc}") from exc
    except ValueError as exc:
        raise CommandError("config", str(exc)) from exc
    manifest.write(out)
    if res.report is not None:
        s = res.report.summary()
        log.info("held-out dsc %.4f±%.4f over %d cases", s["dsc"]["mean"], s["dsc"]["std"], s["n"])
    return 0


def _checkpoint_path(path: Path) -> Path:
    """Accept a checkpoint file, a ``step_N`` directory or a run directory (latest step)."""
    if path.is_file():
        return path
    if (path / "checkpoint.pt").exists():
        return path / "checkpoint.pt"
    steps = sorted((path / "checkpoints").glob("step_*/checkpoint.pt"),
                   key=lambda p: int(p.parent.name[5:]))
    if not steps:
        raise CommandError("io", f"no checkpoint under {path}")
    return steps[-1]


def cmd_eval(args) -> int:
    ck = _checkpoint_path(Path(args.checkpoint))
    root = resolve_dataset(args.dataset)
    if not (root / MANIFEST).exists():
        raise CommandError("missing-dataset", f"dataset not found: {args.dataset}")
    samples = [s for s in load_dataset(root) if s.domain_tag is DomainTag.TARGET_LABELED]
    if args.split_file:
        ids = set(json.loads(Path(args.split_file).read_text())[args.subset])
        samples = [s for s in samples if s.id in ids]
    if not samples:
        raise CommandError("missing-dataset", "no labeled target samples to evaluate")
    state = load_checkpoint(ck)
    cfg = state.config
    tau = args.tau if args.tau is not None else cfg.tau
    try:
        report = evaluate(state.net, samples, cfg.preprocess_config(), None, tau,
                          with_nsd=not args.no_nsd, overlap=cfg.overlap)
    except MissingSpacingError as exc:
        raise CommandError("missing-spacing", str(exc)) from exc
    out = Path(args.out)
    report.write(out)
    RunManifest(
        command=["eval", *args.argv], config={"train": cfg.to_dict(), "tau": tau, "nsd": not args.no_nsd},
        seeds={"train": cfg.seed},
        input_hashes={"checkpoint": file_sha256(ck), "dataset_manifest": file_sha256(root / MANIFEST)},
    ).write(out)
    s = report.summary()
    log.info("dsc %.4f±%.4f over %d cases", s["dsc"]["mean"], s["dsc"]["std"], s["n"])
    return 0


def cmd_inspect(args) -> int:
    run = Path(args.run_dir)
    out = Path(args.out) if args.out else run / "inspect"
    rows = inspect_relations(run, args.steps or None, out)
    if not rows:
        raise CommandError("no-relations", f"no relation matrices found under {run}")
    RunManifest(command=["inspect-relations", *args.argv],
                config={"steps": [r["step"] for r in rows]}, seeds={}).write(out)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relcollab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config layered over the defaults")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action="store_true")
        sp.add_argument("--out", required=out_required)

    sp = sub.add_parser("synth", help="write a phantom dataset")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train one configuration into a run directory")
    common(sp)
    sp.add_argument("--mode", choices=sorted(MODES))
    sp.add_argument("--fold", type=int)
    sp.add_argument("--dataset", help="dataset directory (overrides data.dataset)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    sp.add_argument("--checkpoint", required=True, help="checkpoint file, step dir or run dir")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split-file", help="split.json from a training run")
    sp.add_argument("--subset", choices=["train", "test"], default="test")
    sp.add_argument("--tau", type=float)
    sp.add_argument("--no-nsd", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect-relations", help="plot relation matrices saved by a run")
    sp.add_argument("run_dir")
    sp.add_argument("--steps", type=int, nargs="*")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv[1:]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        kind, code, msg = exc.kind, exc.code, str(exc)
    except ConfigError as exc:
        kind, code, msg = "config", EXIT_CODES["config"], str(exc)
    except OSError as exc:
        kind, code, msg = "io", EXIT_CODES["io"], str(exc)
    except ValueError as exc:
        kind, code, msg = "invalid-input", EXIT_CODES["invalid-input"], str(exc)
    print(f"relcollab-error:{kind}: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
