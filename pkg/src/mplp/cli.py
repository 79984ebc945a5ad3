"""Command-line entry point: gen-data, train, eval, retrieve, gradcheck, sweep.

Exit codes: 0 success, 1 failed check, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import subprocess
import sys
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

from .configs import ConfigError, apply_overrides, config_hash, read_flat_config
from .corpus import CorpusError, GlossTable, load_corpus
from .model import ModelConfig
from .numerics import ContractError
from .prompts import RepresentationCache
from .retrieval import BM25Index, top_k_similar
from .synthetic import GeneratorConfig, generate_synthetic_corpus
from .training import RUN_FILES, TrainConfig, evaluate, load_stage2, prepare_stage1, run_pipeline, train_stage2

MANIFEST = "manifest.json"
MODEL_ALIASES = {"m": "context_window"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# manifests and config resolution


def _version() -> str:
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0+unknown"
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent, check=False,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{base}+{desc}" if desc else base


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclasses.dataclass
class RunManifest:
    command: str
    config_path: str | None
    config_hash: str
    version: str
    started: str
    finished: str = ""

    def write(self, out_dir: Path) -> None:
        self.finished = _now()
        (out_dir / MANIFEST).write_text(json.dumps(dataclasses.asdict(self), indent=1) + "\n", encoding="utf-8")


def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_run_config(values: dict[str, str], base_dir: Path | None = None) -> tuple[ModelConfig, TrainConfig, Path]:
    """Split a flat mapping into model and training configs plus the corpus directory."""
    values = dict(values)
    data = values.pop("data", None)
    if not data:
        raise ConfigError("config needs data = <corpus directory>")
    data_dir = Path(data)
    if not data_dir.is_absolute() and base_dir is not None:
        data_dir = base_dir / data_dir
    mcfg, rest = apply_overrides(ModelConfig(), values, MODEL_ALIASES)
    tcfg, rest = apply_overrides(TrainConfig(), rest)
    if rest:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(rest))}")
    ModelConfig(**dataclasses.asdict(mcfg))  # re-run validation
    tcfg.validate()
    return mcfg, tcfg, data_dir.resolve()


def _load_splits(data_dir: Path, tcfg: TrainConfig):
    splits = {}
    for name in ("train", "dev", "test"):
        path = data_dir / f"{name}.jsonl"
        if not path.is_file():
            raise FileNotFoundError(f"missing corpus file {path}")
        splits[name] = load_corpus(path, tcfg.label_set)
    return splits


def _read_run(run_dir: Path):
    for key in ("config", "stage2", "cache", "index"):
        if not (run_dir / RUN_FILES[key]).is_file():
            raise FileNotFoundError(f"run directory {run_dir} lacks {RUN_FILES[key]}")
    values = read_flat_config(run_dir / RUN_FILES["config"])
    mcfg, tcfg, data_dir = resolve_run_config(values)
    return values, mcfg, tcfg, data_dir


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    values = read_flat_config(args.spec) if args.spec else {}
    values.update(_overrides(args.set))
    gen = GeneratorConfig.from_mapping(values)
    out = Path(args.out)
    corpus = generate_synthetic_corpus(gen, args.seed)
    corpus.save(out)
    (out / "generator.txt").write_text(
        "".join(f"{f.name} = {getattr(gen, f.name)}\n" for f in dataclasses.fields(gen)) + f"seed = {args.seed}\n",
        encoding="utf-8",
    )
    manifest = RunManifest("gen-data", args.spec, config_hash(gen), _version(), _now())
    manifest.write(out)
    print(f"wrote {sum(len(c) for c in corpus.train)} / {sum(len(c) for c in corpus.dev)} / "
          f"{sum(len(c) for c in corpus.test)} train/dev/test utterances to {out}")
    return 0


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    values = read_flat_config(cfg_path)
    values.update(_overrides(args.set))
    mcfg, tcfg, data_dir = resolve_run_config(values, cfg_path.parent)
    splits = _load_splits(data_dir, tcfg)
    out = Path(args.out)
    started = _now()
    reports = run_pipeline(splits["train"], splits["dev"], splits["test"], mcfg, tcfg, out,
                           extra_config=f"data = {data_dir}\n")
    RunManifest("train", str(cfg_path), config_hash(mcfg, tcfg), _version(), started).write(out)
    for split, rep in reports.items():
        print(f"{split}: weighted-F1 {rep.weighted_f1:.4f}  micro-F1 (no neutral) {rep.micro_f1_excluding_neutral:.4f}")
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run)
    _, mcfg, tcfg, data_dir = _read_run(run)
    splits = _load_splits(data_dir, tcfg)
    if args.split not in splits:
        raise UsageError(f"unknown split {args.split!r}")
    state, vocab, saved_cfg = load_stage2(run / RUN_FILES["stage2"])
    cache = RepresentationCache.load(run / RUN_FILES["cache"])
    index = BM25Index.load(run / RUN_FILES["index"])
    glosses = GlossTable.from_tsv().restricted(saved_cfg.label_set)
    report = evaluate(state, splits[args.split], args.split, vocab, cache, index, glosses, saved_cfg)
    (run / RUN_FILES["reports"]).mkdir(exist_ok=True)
    text = report.to_json()
    (run / RUN_FILES["reports"] / f"{args.split}.json").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_retrieve(args) -> int:
    run = Path(args.run)
    index_path = run / RUN_FILES["index"]
    if not index_path.is_file():
        raise FileNotFoundError(f"run directory {run} lacks {RUN_FILES['index']}")
    index = BM25Index.load(index_path)
    query_id = None
    if args.utterance:
        _, _, tcfg, data_dir = _read_run(run)
        found = None
        for convs in _load_splits(data_dir, tcfg).values():
            for c in convs:
                for u in c.utterances:
                    if u.utterance_id == args.utterance:
                        found = u
        if found is None:
            raise UsageError(f"no utterance with id {args.utterance!r}")
        text, query_id = found.text, found.utterance_id
    elif args.text is not None:
        text = args.text
    else:
        raise UsageError("retrieve needs --text or --utterance")
    hits = top_k_similar(index, text, args.k, exclusions=args.exclude or (), query_id=query_id)
    for rank, hit in enumerate(hits, 1):
        print(f"{rank}\t{hit.utterance_id}\t{hit.score:.6f}\t{hit.label}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(args.scale)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: max rel error {r.max_rel_error:.3e} (tol {TOLERANCE:g})")
    return 0 if all(r.passed for r in results) else 1


def cmd_sweep(args) -> int:
    cfg_path = Path(args.config)
    values = read_flat_config(cfg_path)
    values.update(_overrides(args.set))
    mcfg, tcfg, data_dir = resolve_run_config(values, cfg_path.parent)
    try:
        grid = [float(x) for x in args.grid.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad --grid {args.grid!r}") from None
    if not grid:
        raise UsageError("empty --grid")
    splits = _load_splits(data_dir, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    art = prepare_stage1(splits["train"], splits["dev"], splits["test"], mcfg, tcfg)
    rows = []
    for value in grid:
        v = int(value) if args.param == "k" else value
        if args.param == "k" and v != value:
            raise UsageError("k grid values must be integers")
        cfg = dataclasses.replace(tcfg, **{args.param: v})
        cfg.validate()
        run = train_stage2(art, splits["train"], splits["dev"], cfg)
        dev = evaluate(run.state, splits["dev"], "dev", art.vocab, run.cache, art.index, art.glosses, cfg)
        test = evaluate(run.state, splits["test"], "test", art.vocab, run.cache, art.index, art.glosses, cfg)
        rows.append({"param": args.param, "value": v, "dev_weighted_f1": dev.weighted_f1,
                     "test_weighted_f1": test.weighted_f1, "test_micro_f1": test.micro_f1_excluding_neutral})
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    RunManifest("sweep", str(cfg_path), config_hash(mcfg, tcfg), _version(), _now()).write(out)
    for row in rows:
        print(f"{row['param']}={row['value']}: test weighted-F1 {row['test_weighted_f1']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mplp", description="Two-stage prompt learning for emotion recognition in conversation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic train/dev/test corpus")
    p.add_argument("--spec", help="flat key = value generator config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a generator option")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run both training stages and write a run directory")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on one split")
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="print the top-k BM25 neighbours of a query")
    p.add_argument("--run", required=True)
    p.add_argument("--text")
    p.add_argument("--utterance", help="query with a corpus utterance; it is excluded from its own results")
    p.add_argument("--exclude", action="append", metavar="UTTERANCE_ID")
    p.add_argument("--k", type=int, default=3)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scale", default="small", choices=("tiny", "small"))
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="stage-2 sweep over k or alpha; writes metrics.csv")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--param", required=True, choices=("k", "alpha"))
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def _thread_limit():
    raw = os.environ.get("MPLP_NUM_THREADS")
    if not raw:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(raw)))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigError, CorpusError, ContractError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"mplp {args.command}: error: {exc}", file=sys.stderr)
        return 2


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
