"""Command-line frontend: ``phishkd {gen-corpus,train,distill,eval,bench,replay}``.

Every command writes a ``manifest.json`` next to its outputs holding the
resolved arguments, profile, seed, input hashes and output hashes. Run
``phishkd replay <manifest>`` to execute the same command again and compare
the output hashes.

Exit codes: 0 success, 1 replay mismatch, 2 usage, 3 missing or unreadable
input, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from phishkd import __version__
from phishkd.corpus import dedup, generate_synthetic_corpus, load_corpus, save_corpus, similarity_analysis
from phishkd.evalbench import (
    SCENARIOS,
    FoldResult,
    ScenarioReport,
    benchmark,
    confusion,
    export_bench_csv,
    export_metrics_csv,
    metrics,
    run_scenario,
    scenario_split,
    stratified_kfold,
)
from phishkd.exceptions import CorpusError, NumericError, PhishKDError
from phishkd.experiments import KINDS, CorpusResources, Profile, encode_text, fit_model_with_history, make_recipe
from phishkd.models import (
    TEACHER_KIND,
    ModelGraph,
    build_model,
    default_config,
    load_model,
    load_teacher_logits,
    transfer_embeddings,
)
from phishkd.text import Vocab
from phishkd.training import (
    DistillConfig,
    EncodedData,
    TrainConfig,
    distill_train,
    predict_proba,
)

logger = logging.getLogger("phishkd")

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3, 4
MODES = {"f64": "float64", "f32": "float32"}


class UsageError(PhishKDError):
    pass


class InputError(PhishKDError):
    pass


# ---------------------------------------------------------------------------
# Config file and profile resolution
# ---------------------------------------------------------------------------

def _coerce(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {text!r}")
    try:
        return type(like)(text)
    except ValueError:
        raise UsageError(f"expected {type(like).__name__}, got {text!r}") from None


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc.strerror}") from None
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{n}: expected key=value, got {raw!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


_PROFILE_SCALARS = {f.name: f for f in dataclasses.fields(Profile) if f.name not in ("baseline", "teacher", "distill")}


def resolve_profile(settings: dict[str, str], mode: str) -> tuple[Profile, dict[str, str]]:
    """Split config settings into a :class:`Profile` and the leftover command keys.

    ``teacher_lr``/``teacher_epochs`` set the teacher budget; ``baseline_lr``
    and ``baseline_epochs`` the word-level student budget.
    """
    base = Profile(dtype=MODES[mode])
    values, rest = {}, {}
    budgets = {"baseline": dataclasses.asdict(base.baseline), "teacher": dataclasses.asdict(base.teacher)}
    for key, raw in settings.items():
        if key in _PROFILE_SCALARS and key != "dtype":
            values[key] = _coerce(raw, getattr(base, key))
            continue
        prefix, _, field_name = key.partition("_")
        if prefix in budgets and field_name in budgets[prefix]:
            budgets[prefix][field_name] = _coerce(raw, budgets[prefix][field_name])
            continue
        rest[key] = raw
    try:
        profile = dataclasses.replace(base, **values, baseline=TrainConfig(**budgets["baseline"]),
                                      teacher=TrainConfig(**budgets["teacher"]))
    except PhishKDError as exc:
        raise UsageError(str(exc)) from None
    return profile, rest


def _profile_dict(profile: Profile) -> dict:
    return dataclasses.asdict(profile)


def _profile_from_dict(d: dict) -> Profile:
    d = dict(d)
    d["baseline"] = TrainConfig(**d["baseline"])
    d["teacher"] = TrainConfig(**d["teacher"])
    d["distill"] = DistillConfig(**d["distill"])
    return Profile(**d)


# ---------------------------------------------------------------------------
# Hashing and manifests
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, args: dict, profile: Profile, inputs: dict, outputs: list[str]) -> dict:
    manifest = {
        "version": __version__,
        "command": command,
        "args": args,
        "profile": _profile_dict(profile),
        "inputs": {name: {"path": str(Path(p).resolve()), "sha256": sha256_file(p)} for name, p in inputs.items()},
        "outputs": {name: sha256_file(out / name) for name in outputs},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _load_corpus(path):
    p = _require(path, "corpus")
    try:
        return load_corpus(p)
    except CorpusError as exc:
        raise InputError(f"{p}: {exc}") from None


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args: dict, profile: Profile, out: Path) -> tuple[dict, list[str]]:
    records = generate_synthetic_corpus(n_per_cell=args["n"], seed=args["seed"])
    generated = len(records)
    removed = 0
    if args["dedup_threshold"] is not None:
        result = dedup(records, threshold=args["dedup_threshold"])
        records, removed = result.kept, len(result.removed_pairs)
    save_corpus(records, out / "corpus.jsonl")

    def cell(label, source):
        return [r for r in records if r.label == label and r.source == source]

    legit = [r for r in records if r.label == "legitimate"]
    summary = similarity_analysis(legit, cell("phishing", "human"), cell("phishing", "llm"))
    summary.export_csv(out / "similarity.csv")
    with open(out / "stats.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("pair_class,mean,median,q1,q3\n")
        for name, st in sorted(summary.stats.items()):
            fh.write(f"{name},{st['mean']!r},{st['median']!r},{st['q1']!r},{st['q3']!r}\n")
    print(f"generated {generated} records, removed {removed} near-duplicates, wrote {len(records)}")
    for name, st in sorted(summary.stats.items()):
        print(f"  cos(legitimate, {name}): mean {st['mean']:.4f} median {st['median']:.4f}")
    return {"corpus": out / "corpus.jsonl"}, ["corpus.jsonl", "similarity.csv", "stats.csv"]


def _fold_records(corpus, scenario: str, fold: int, seed: int):
    pools = scenario_split(corpus, scenario, seed)
    plan = stratified_kfold([r.y for r in pools.train_pool], k=5, seed=seed)
    if not 0 <= fold < 5:
        raise UsageError(f"--fold must be in 0..4, got {fold}")
    f = plan.folds[fold]
    pool = pools.train_pool
    return [pool[i] for i in f.train], [pool[i] for i in f.val]


def _save_model_dir(out: Path, model, vocab: Vocab, history) -> list[str]:
    model.save(out / "model.ckpt")
    vocab.save(out / "vocab.txt")
    history.export_csv(out / "history.csv")
    return ["model.ckpt", "vocab.txt", "history.csv"]


def cmd_train(args: dict, profile: Profile, out: Path) -> tuple[dict, list[str]]:
    corpus = _load_corpus(args["corpus"])
    kind = args["model"]
    if kind == "kd_student":
        raise UsageError("kd_student is trained with the distill command")
    budget = TrainConfig(lr=args["lr"], epochs=args["epochs"], batch_size=args["batch_size"], seed=args["seed"])
    profile = dataclasses.replace(profile, **{"teacher" if kind == TEACHER_KIND else "baseline": budget})
    tr, va = _fold_records(corpus, args["scenario"], args["fold"], args["seed"])
    res = CorpusResources(corpus, profile, args["seed"])
    model, history = fit_model_with_history(kind, res, tr, va, args["seed"])
    written = _save_model_dir(out, model, res.vocab(model.cfg.tokenizer), history)
    print(f"trained {kind} on {len(tr)} records ({len(va)} validation)")
    return {"corpus": args["corpus"]}, written


def cmd_distill(args: dict, profile: Profile, out: Path) -> tuple[dict, list[str]]:
    corpus = _load_corpus(args["corpus"])
    cfg = DistillConfig(alpha=args["alpha"], tau=args["tau"], lr=args["lr"], epochs=args["epochs"],
                        batch_size=args["batch_size"], seed=args["seed"])
    inputs = {"corpus": args["corpus"]}
    if args["teacher"]:
        tdir = _require(args["teacher"], "teacher directory")
        ckpt = _require(tdir / "model.ckpt", "teacher checkpoint")
        vocab_path = _require(tdir / "vocab.txt", "teacher vocabulary")
        teacher = load_model(ckpt)
        if teacher.cfg.kind != TEACHER_KIND:
            raise UsageError(f"{ckpt} holds a {teacher.cfg.kind} model, not a {TEACHER_KIND}")
        vocab = Vocab.load(vocab_path)
        source, embed_dim = teacher, teacher.cfg.embed_dim
        inputs.update(teacher=ckpt, teacher_vocab=vocab_path)
    else:
        logits_path = _require(args["teacher_logits"], "teacher logits file")
        source, vocab, embed_dim = load_teacher_logits(logits_path), None, profile.teacher_dim
        inputs["teacher_logits"] = logits_path
    profile = dataclasses.replace(profile, distill=cfg, teacher_dim=embed_dim)
    res = CorpusResources(corpus, profile, args["seed"], piece_vocab=vocab)
    tr, va = _fold_records(corpus, args["scenario"], args["fold"], args["seed"])
    student = build_model(profile.model_config("kd_student", len(res.piece_vocab)), args["seed"]).astype(profile.dtype)
    if isinstance(source, ModelGraph):
        transfer_embeddings(student, source, freeze=profile.freeze_transferred)
    history = distill_train(student, source, res.data(tr, "wordpiece"), cfg, res.data(va, "wordpiece"))
    written = _save_model_dir(out, student, res.piece_vocab, history)
    last = history.steps[-1] if history.steps else None
    if last is not None:
        print(f"distilled kd_student for {cfg.epochs} epochs; last step l_hard {last.l_hard:.4f} "
              f"l_soft {last.l_soft:.4f} l_distill {last.l_distill:.4f}")
    return inputs, written


def _scenario_names(name: str) -> list[str]:
    if name == "all":
        return list(SCENARIOS)
    if name not in SCENARIOS:
        raise UsageError(f"unknown scenario {name!r}; valid names: all, {', '.join(SCENARIOS)}")
    return [name]


def _eval_one(job):
    corpus_path, profile_dict, kinds, scenario, k, seed = job
    corpus = load_corpus(corpus_path)
    profile = _profile_from_dict(profile_dict)
    res = CorpusResources(corpus, profile, seed)
    return [run_scenario(make_recipe(kind, res), scenario, corpus, k=k, seed=seed, model_name=kind)
            for kind in kinds]


def _print_block(scenario: str, reports: list[ScenarioReport]) -> None:
    print(f"== {scenario} ==")
    print(f"{'model':<14}{'acc':>8}{'prec':>8}{'rec':>8}{'f1':>8}{'wf1':>8}")
    for rep in reports:
        print(f"{rep.model:<14}" + "".join(f"{rep.mean(key):8.4f}" for key in
                                           ("acc", "precision", "recall", "f1", "weighted_f1")))
    if reports:
        print(f"samples: {reports[0].corpus_size} unique, {reports[0].per_fold_total} per fold (train+val+test)")


def _checkpoint_reports(args: dict, corpus, scenarios: list[str]) -> tuple[list[ScenarioReport], dict]:
    cdir = _require(args["checkpoint"], "checkpoint directory")
    ckpt = _require(cdir / "model.ckpt", "checkpoint")
    vocab_path = _require(cdir / "vocab.txt", "checkpoint vocabulary")
    model, vocab = load_model(ckpt), Vocab.load(vocab_path)
    cfg = model.cfg
    reports = []
    for name in scenarios:
        pools = scenario_split(corpus, name, args["seed"])
        test = pools.test_pool
        data = EncodedData([encode_text(r.text, vocab, cfg.tokenizer, cfg.max_len) for r in test],
                           [r.y for r in test], [r.id for r in test])
        preds = (predict_proba(model, data) >= 0.5).astype(int)
        rep = metrics(confusion(preds, data.y))
        fold = FoldResult(0, rep, 0.0, 0.0, {"test": len(test)})
        reports.append(ScenarioReport(cfg.kind, name, [fold], len(corpus), len(test)))
    return reports, {"checkpoint": ckpt, "checkpoint_vocab": vocab_path}


def cmd_eval(args: dict, profile: Profile, out: Path) -> tuple[dict, list[str]]:
    scenarios = _scenario_names(args["scenario"])
    kinds = _kinds(args["models"])
    corpus = _load_corpus(args["corpus"])
    inputs = {"corpus": args["corpus"]}
    if args["checkpoint"]:
        reports, extra = _checkpoint_reports(args, corpus, scenarios)
        inputs.update(extra)
        by_scenario = {name: [rep] for name, rep in zip(scenarios, reports)}
    else:
        jobs = [(str(args["corpus"]), _profile_dict(profile), kinds, name, args["folds"], args["seed"])
                for name in scenarios]
        if args["jobs"] > 1:
            with ProcessPoolExecutor(max_workers=args["jobs"]) as pool:
                results = list(pool.map(_eval_one, jobs))
        else:
            results = [_eval_one(job) for job in jobs]
        by_scenario = dict(zip(scenarios, results))
    reports = []
    for name in scenarios:
        _print_block(name, by_scenario[name])
        reports.extend(by_scenario[name])
    export_metrics_csv(reports, out / "metrics.csv")
    return inputs, ["metrics.csv"]


def _kinds(text: str) -> list[str]:
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    unknown = [k for k in kinds if k not in KINDS]
    if unknown or not kinds:
        raise UsageError(f"unknown model kinds {unknown}; valid kinds: {', '.join(KINDS)}")
    return kinds


def cmd_bench(args: dict, profile: Profile, out: Path) -> tuple[dict, list[str]]:
    dtype = profile.dtype
    models = [(kind, build_model(default_config(kind), args["seed"]).astype(dtype)) for kind in _kinds(args["models"])]
    reports = benchmark(models, batch_size=args["batch_size"], seq_len=args["seq_len"], repeats=args["repeats"],
                        warmup=args["warmup"], train_batches=args["train_batches"], seed=args["seed"])
    export_bench_csv(reports, out / "bench.csv")
    for rep in reports:
        print(f"{rep.model:<14} params {rep.params:>10,d}  p50 {rep.p50_ms:9.2f} ms/batch  p95 {rep.p95_ms:9.2f}")
    return {}, ["bench.csv"]


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _probability(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {v}")
    return v


def _threshold(text: str) -> float:
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {v}")
    return v


def _positive(kind):
    def parse(text: str):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
        return v

    return parse


def _non_negative_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


# (flag, type, default) per command; defaults can come from the config file.
OPTIONS = {
    "gen-corpus": [("n", _positive(int), 500), ("dedup-threshold", _threshold, None)],
    "train": [("corpus", str, None), ("model", str, "bilstm_mh"), ("scenario", str, "mixture"),
              ("fold", _non_negative_int, 0), ("lr", _positive(float), 1e-3), ("epochs", _non_negative_int, 5),
              ("batch-size", _positive(int), 32)],
    "distill": [("corpus", str, None), ("teacher", str, None), ("teacher-logits", str, None),
                ("alpha", _probability, 0.5), ("tau", _positive(float), 2.0), ("lr", _positive(float), 1e-4),
                ("epochs", _non_negative_int, 3), ("batch-size", _positive(int), 32), ("scenario", str, "mixture"),
                ("fold", _non_negative_int, 0)],
    "eval": [("corpus", str, None), ("models", str, "bilstm_mh"), ("scenario", str, "all"),
             ("folds", _positive(int), 5), ("jobs", _positive(int), 1), ("checkpoint", str, None)],
    "bench": [("models", str, "kd_student,tiny_teacher"), ("batch-size", _positive(int), 32),
              ("seq-len", _positive(int), 64), ("repeats", _positive(int), 30), ("warmup", _non_negative_int, 3),
              ("train-batches", _non_negative_int, 0)],
}
REQUIRED = {"train": ("corpus",), "distill": ("corpus",), "eval": ("corpus",)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    def add_globals(p, default):
        p.add_argument("--seed", type=int, default=default, help="global seed (default 0)")
        p.add_argument("--out", default=default, help="output directory (default ./run)")
        p.add_argument("--mode", choices=sorted(MODES), default=default, help="float64 (f64) or float32 (f32)")
        p.add_argument("--config", default=default, help="key=value file; flags override it")
        p.add_argument("-v", "--verbose", action="store_true", default=False if default is None else default)

    parser = _Parser(prog="phishkd", description="Phishing detection students, distillation and benchmarks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    add_globals(parser, None)
    # global flags are also accepted after the subcommand
    common = _Parser(add_help=False)
    add_globals(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name, parents=[common])
        for flag, kind, _ in opts:
            p.add_argument(f"--{flag}", type=kind, default=None)
    rp = sub.add_parser("replay", parents=[common], help="rerun a manifest and compare output hashes")
    rp.add_argument("manifest")
    return parser


def resolve_args(ns: argparse.Namespace, settings: dict[str, str]) -> dict:
    """Merge flags over config settings over built-in defaults."""
    args = {}
    for flag, kind, default in OPTIONS[ns.command]:
        key = flag.replace("-", "_")
        value = getattr(ns, key)
        if value is None and key in settings:
            try:
                value = kind(settings.pop(key))
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config {key}: {exc}") from None
        args[key] = default if value is None else value
    for key in REQUIRED.get(ns.command, ()):
        if args[key] is None:
            raise UsageError(f"{ns.command}: --{key} is required")
    if ns.command == "distill" and bool(args["teacher"]) == bool(args["teacher_logits"]):
        raise UsageError("distill: give exactly one of --teacher or --teacher-logits")
    if ns.command == "eval":
        _scenario_names(args["scenario"])
        _kinds(args["models"])
    if ns.command == "train" and args["model"] not in KINDS:
        raise UsageError(f"unknown model kind {args['model']!r}; valid kinds: {', '.join(KINDS)}")
    return args


def execute(command: str, args: dict, profile: Profile, out: Path) -> dict:
    np.seterr(all="ignore")
    out = _out_dir(out)
    inputs, outputs = COMMANDS[command](args, profile, out)
    stored = {k: (str(v) if isinstance(v, Path) else v) for k, v in args.items()}
    return write_manifest(out, command, stored, profile, inputs if command != "gen-corpus" else {}, outputs)


def replay(manifest_path, out=None) -> int:
    path = _require(manifest_path, "manifest")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        command, args, profile = manifest["command"], manifest["args"], _profile_from_dict(manifest["profile"])
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: not a valid manifest ({exc})") from None
    for name, info in manifest.get("inputs", {}).items():
        if sha256_file(_require(info["path"], f"input {name}")) != info["sha256"]:
            print(f"input {name} changed since the manifest was written: {info['path']}")
            return EXIT_MISMATCH
    target = Path(out) if out else path.parent / "replay"
    fresh = execute(command, args, profile, target)
    bad = [n for n, h in manifest["outputs"].items() if fresh["outputs"].get(n) != h]
    for name in manifest["outputs"]:
        print(f"{'MISMATCH' if name in bad else 'identical'}  {name}")
    return EXIT_MISMATCH if bad else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
        if ns.command == "replay":
            return replay(ns.manifest, ns.out)
        settings = read_config(ns.config) if ns.config else {}
        mode = ns.mode or settings.pop("mode", "f64")
        settings.pop("mode", None)
        if mode not in MODES:
            raise UsageError(f"mode must be one of {sorted(MODES)}, got {mode!r}")
        seed = ns.seed if ns.seed is not None else _coerce(settings.get("seed", "0"), 0)
        settings.pop("seed", None)
        out = ns.out or settings.get("out", "run")
        settings.pop("out", None)
        profile, settings = resolve_profile(settings, mode)
        args = resolve_args(ns, settings)
        if settings:
            raise UsageError(f"unknown config keys for {ns.command}: {', '.join(sorted(settings))}")
        args["seed"] = seed
        execute(ns.command, args, profile, Path(out))
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PhishKDError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
