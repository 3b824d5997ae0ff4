"""Command-line entry point: ``ccat {features,split,train,predict,eval,search}``.

Exit codes: 0 success, 2 training divergence, 64 usage error, 65 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as datamod
from . import metrics
from .errors import CCATError, ConfigError, DivergenceError, EmptyInput
from .frontend import FeatureConfig, extract_features, load_feature_cache, load_wav, save_feature_cache
from .model import ModelConfig, build, load_checkpoint, save_checkpoint
from .training import Example, TrainConfig, fit
from .tuning import SearchSpace, ensemble_members, member_mean, run_search

log = logging.getLogger("ccat")

EXIT_OK, EXIT_DIVERGED, EXIT_USAGE, EXIT_DATA = 0, 2, 64, 65
SECTIONS = ("feature", "model", "train", "search")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------- config

def load_config(path: str | None, overrides: list[str] | None = None) -> dict:
    """Read the JSON command config and apply ``section.key=value`` overrides."""
    cfg: dict = {s: {} for s in SECTIONS}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        raw = json.loads(p.read_text(encoding="utf-8"))
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for s in SECTIONS:
            cfg[s].update(raw.get(s, {}))
    for item in overrides or []:
        key, sep, value = item.partition("=")
        section, dot, field = key.partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        try:
            cfg[section][field] = json.loads(value)
        except json.JSONDecodeError:
            cfg[section][field] = value
    return cfg


def resolve_configs(cfg: dict) -> tuple[FeatureConfig, ModelConfig, TrainConfig]:
    model = ModelConfig.from_dict(cfg["model"])
    feat = dict(cfg["feature"])
    feat.setdefault("kind", model.feature_kind)
    feat.setdefault("context_half_width", model.context_size // 2)
    fcfg = FeatureConfig.from_dict(feat)
    if fcfg.kind != model.feature_kind:
        raise ConfigError(f"feature kind {fcfg.kind} disagrees with model feature_kind {model.feature_kind}")
    if fcfg.context_size != model.context_size:
        raise ConfigError("feature context_half_width does not match model context_size")
    return fcfg, model, TrainConfig.from_dict(cfg["train"])


def _manifest(path: str | None, flag: str) -> tuple[list[datamod.UtteranceRecord], Path]:
    if not path:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: manifest not found: {path}")
    return datamod.load_manifest(p), p.parent


def _cache_path(cache_dir: Path, uid: str) -> Path:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in uid)
    return cache_dir / f"{safe}.feat"


def load_examples(records, base: Path, fcfg: FeatureConfig, cache_dir: Path | None = None) -> list[Example]:
    out = []
    for r in records:
        cached = _cache_path(cache_dir, r.id) if cache_dir else None
        if cached is not None and cached.is_file():
            ct, meta = load_feature_cache(cached)
            if meta.get("config_hash") == fcfg.digest():
                out.append(Example(ct.data, r.mos, r.id))
                continue
        ct = extract_features(load_wav(datamod.resolve(r, base)), fcfg)
        out.append(Example(ct.data.astype(np.float32), r.mos, r.id))
    return out


# ------------------------------------------------------------------ commands

def _feature_job(args) -> bool:
    wav, dest, fdict = args
    fcfg = FeatureConfig.from_dict(fdict)
    if dest.is_file() and dest.stat().st_mtime >= wav.stat().st_mtime:
        try:
            _, meta = load_feature_cache(dest)
            if meta.get("config_hash") == fcfg.digest():
                return False
        except CCATError:
            pass
    save_feature_cache(dest, extract_features(load_wav(wav), fcfg), fcfg)
    return True


def cmd_features(a) -> int:
    cfg = load_config(a.config, a.set)
    fcfg, _, _ = resolve_configs(cfg)
    records, base = _manifest(a.manifest, "--manifest")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(datamod.resolve(r, base), _cache_path(out, r.id), fcfg.to_dict()) for r in records]
    for wav, _, _ in jobs:
        if not wav.is_file():
            raise FileNotFoundError(f"audio file not found: {wav}")
    workers = a.workers or os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            written = list(pool.map(_feature_job, jobs))
    else:
        written = [_feature_job(j) for j in jobs]
    print(f"wrote {sum(written)} skipped {len(written) - sum(written)}")
    return EXIT_OK


def cmd_split(a) -> int:
    records, base = _manifest(a.manifest, "--manifest")
    if not 0.0 < a.fraction < 1.0:
        raise UsageError("--fraction must lie strictly between 0 and 1")
    train, dev = datamod.split_corpus(records, a.fraction, base=base)
    header = datamod.split_header(a.fraction)
    for recs, dest in ((train, a.out_train), (dev, a.out_dev)):
        dest = Path(dest)
        dest.parent.mkdir(parents=True, exist_ok=True)
        moved = [replace(r, path=_rebase(r, base, dest.parent)) for r in recs]
        dest.write_text(datamod.format_manifest(moved, header), encoding="utf-8")
    print(f"train {len(train)} dev {len(dev)}")
    return EXIT_OK


def _rebase(r: datamod.UtteranceRecord, base: Path, new_base: Path) -> str:
    if Path(r.path).is_absolute():
        return r.path
    return os.path.relpath(datamod.resolve(r, base), new_base)


def cmd_train(a) -> int:
    cfg = load_config(a.config, a.set)
    if a.seed is not None:
        cfg["train"]["seed"] = a.seed
    fcfg, mcfg, tcfg = resolve_configs(cfg)
    train_recs, train_base = _manifest(a.train, "--train")
    dev_recs, dev_base = _manifest(a.dev, "--dev")
    if not train_recs or not dev_recs:
        raise EmptyInput("train and dev manifests must each list at least one utterance")
    cache = Path(a.cache) if a.cache else None
    train = load_examples(train_recs, train_base, fcfg, cache)
    dev = load_examples(dev_recs, dev_base, fcfg, cache)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    resolved = {"feature": fcfg.to_dict(), "model": mcfg.to_dict(), "train": tcfg.to_dict(),
                "search": cfg["search"]}
    Path(str(out) + ".config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    net = build(mcfg, fcfg.num_bins, seed=tcfg.seed, feature=fcfg.to_dict())
    try:
        best, history = fit(net, train, dev, tcfg, log_path=str(out) + ".log.jsonl")
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(best, out)
    if history:
        top = max(history, key=lambda h: h.dev_pcc)
        print(f"best epoch {top.epoch} dev_pcc {top.dev_pcc:.4f} dev_rmse {top.dev_rmse:.4f}")
    else:
        print("no epochs run; saved initial network")
    return EXIT_OK


def _load_models(spec: str) -> list:
    paths: list[str] = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if part.endswith(".json"):
            listing = json.loads(Path(part).read_text())
            root = Path(part).parent
            paths.extend(str(root / m) if not Path(m).is_absolute() else m for m in listing["models"])
        else:
            paths.append(part)
    if not paths:
        raise UsageError("--model needs at least one checkpoint")
    for p in paths:
        if not Path(p).is_file():
            raise UsageError(f"checkpoint not found: {p}")
    return [load_checkpoint(p) for p in paths]


def cmd_predict(a) -> int:
    models = _load_models(a.model)
    if not Path(a.wav).is_file():
        raise UsageError(f"wav not found: {a.wav}")
    members = ensemble_members(models, load_wav(a.wav))
    print(f"{member_mean([s for s, _ in members]):.4f}")
    if a.frames:
        frames = np.mean(np.stack([f for _, f in members]), axis=0)
        for v in frames:
            print(f"{v:.4f}")
    return EXIT_OK


CONVENTIONS = {"rmse_3rd_dof": "n-4", "rmse_3rd_epsilon": "ci95 when present else 0",
               "average": "unweighted mean over datasets"}


def cmd_eval(a) -> int:
    models = _load_models(a.model)
    records, base = _manifest(a.manifest, "--manifest")
    pairs = []
    for r in records:
        members = ensemble_members(models, load_wav(datamod.resolve(r, base)))
        pairs.append(metrics.EvalPair(member_mean([s for s, _ in members]), r.mos, r.ci95))
    name = Path(a.manifest).stem
    if a.per_tag:
        groups: dict[str, list] = {}
        for r, p in zip(records, pairs):
            groups.setdefault(r.corpus, []).append(p)
        reports = [metrics.evaluate_pairs(groups[t], f"{name}:{t}") for t in sorted(groups)]
        reports.append(metrics.average_reports(reports))
    else:
        reports = [metrics.evaluate_pairs(pairs, name)]
    doc = {"conventions": CONVENTIONS, "reports": [r.to_dict() for r in reports]}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if a.out:
        Path(a.out).write_text(text)
    else:
        sys.stdout.write(text)
    if a.csv:
        Path(a.csv).write_text(metrics.reports_to_csv(reports))
    return EXIT_OK


def cmd_search(a) -> int:
    cfg = load_config(a.config, a.set)
    space = SearchSpace.load(a.space) if a.space else SearchSpace.from_dict(cfg["search"])
    if not a.space and not cfg["search"]:
        space = SearchSpace()
    base_cfg = dict(cfg)
    base_cfg["model"] = {"feature_kind": space.feature_kind, "context_size": max(space.context_size)}
    fcfg, _, tcfg = resolve_configs(base_cfg)
    train_recs, train_base = _manifest(a.train, "--train")
    dev_recs, dev_base = _manifest(a.dev, "--dev")
    train = load_examples(train_recs, train_base, fcfg)
    dev = load_examples(dev_recs, dev_base, fcfg)
    trials = run_search(space, train, dev, n_trials=a.trials, epochs_per_trial=a.epochs,
                        seed=a.seed, out_dir=a.out, base_train=tcfg, feature=fcfg)
    ranking = [t.to_dict() for t in trials]
    Path(a.out, "ranking.json").write_text(json.dumps(ranking, indent=2, sort_keys=True) + "\n")
    for t in trials:
        print(f"trial {t.trial_id:3d} {t.status:8s} dev_pcc {t.dev_pcc:.4f} dev_rmse {t.dev_rmse:.4f}")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ccat", description="CCAT speech quality (MOS) model tools")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("features", help="extract per-utterance feature caches")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=0, help="processes (default: CPU count)")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("split", help="per-corpus Kennard-Stone train/dev split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--fraction", type=float, default=0.9)
    s.add_argument("--out-train", required=True)
    s.add_argument("--out-dev", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train one network")
    s.add_argument("--config")
    s.add_argument("--train")
    s.add_argument("--dev")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--cache", help="feature cache directory written by 'ccat features'")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="predict the MOS of one wav")
    s.add_argument("--model", required=True, help="comma-separated checkpoints or an ensemble .json")
    s.add_argument("--wav", required=True)
    s.add_argument("--frames", action="store_true", help="also print per-frame scores")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="PCC / RMSE / RMSE*3rd on a manifest")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")
    s.add_argument("--csv")
    s.add_argument("--per-tag", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("search", help="seeded hyper-parameter search")
    s.add_argument("--space")
    s.add_argument("--config")
    s.add_argument("--train")
    s.add_argument("--dev")
    s.add_argument("--trials", type=int, default=24)
    s.add_argument("--epochs", type=int, default=30, help="epochs per trial")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.set_defaults(func=cmd_search)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ccat {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"ccat {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CCATError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"ccat {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
