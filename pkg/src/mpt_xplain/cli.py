"""``mpt-xplain`` command line: corpus, model, attack, explain, evaluate, fidelity."""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .adversarial import AttackError, GAConfig, build_candidate_pool, generate, stratify_by_score
from .attribution import ExplainConfig, SolverError, explain_with_responses
from .baselines import BaselineConfig, BaselineError, explain_with
from .corpus import (
    MALWARE,
    CorpusError,
    FeatureToken,
    SyntheticConfig,
    Vocabulary,
    corpus_stats,
    embed,
    embed_binary,
    embed_many,
    fit_vocabulary,
    generate_synthetic,
    labels_of,
    load_corpus,
    save_corpus,
    split,
)
from .evaluation import (
    EvaluationError,
    augmentation_test,
    deduction_test,
    functional_analysis,
    make_explainer,
    model_metrics,
    sweep_good_explanation,
)
from .models import DimensionError, ModelError, TrainConfig, load_model, save_model, train, train_surrogate
from .perturbation import PerturbationError, dump_perturbations
from . import plotting

log = logging.getLogger("mpt_xplain")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_NOT_FOUND = 3
EXIT_SCHEMA = 4
EXIT_DIMENSION = 5
EXIT_INVALID = 6


class CLIError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(EXIT_USAGE, "usage", message)


# ---------------------------------------------------------------- helpers

class Outputs:
    """Collects output files and commits them together, so a failure leaves nothing behind."""

    def __init__(self):
        self.pending: list[tuple[str, Path]] = []

    def path(self, target) -> str:
        target = Path(target)
        fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent or ".")
        os.close(fd)
        self.pending.append((tmp, target))
        return tmp

    def text(self, target, content: str):
        with open(self.path(target), "w", encoding="utf-8") as fh:
            fh.write(content)

    def commit(self):
        umask = os.umask(0)
        os.umask(umask)
        for tmp, target in self.pending:
            os.chmod(tmp, 0o666 & ~umask)
            os.replace(tmp, target)
        self.pending.clear()

    def discard(self):
        for tmp, _ in self.pending:
            if os.path.exists(tmp):
                os.remove(tmp)
        self.pending.clear()


def run_config(args) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    cfg["version"] = __version__
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    cfg["fingerprint"] = hashlib.sha256(blob).hexdigest()[:16]
    return cfg


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, default=_default) + "\n"


def _default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _sidecar(out: Outputs, target, args):
    out.text(str(target) + ".run.json", _json({"run_config": run_config(args)}))


def _pmap(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _require(path):
    if not Path(path).exists():
        raise CLIError(EXIT_NOT_FOUND, "not_found", f"file not found: {path}")
    return path


class Bundle:
    """A loaded model with its vocabulary, encoding and train/test split recipe."""

    def __init__(self, path):
        self.path = str(path)
        self.model = load_model(_require(path))
        if self.model.vocabulary is None:
            raise ModelError(f"{path} carries no vocabulary")
        self.vocab = Vocabulary.from_json(self.model.vocabulary)
        meta = self.model.metadata
        self.binary = meta.get("encoding") == "binary"
        self.test_fraction = meta.get("test_fraction", 0.3)
        self.split_seed = meta.get("split_seed", 0)

    def embed(self, sample):
        return (embed_binary if self.binary else embed)(sample, self.vocab).values

    def embed_many(self, samples):
        return embed_many(samples, self.vocab, binary=self.binary)

    def split(self, samples):
        return split(samples, self.test_fraction, self.split_seed)


def _load_corpus(path):
    return load_corpus(_require(path))


# ---------------------------------------------------------------- corpus

def cmd_corpus_gen(args, out: Outputs):
    cfg = SyntheticConfig(malware=args.malware, benign=args.benign, vocab=args.vocab,
                          signal=args.signal, noise=args.noise, seed=args.seed)
    samples = generate_synthetic(cfg)
    save_corpus(samples, out.path(args.out))
    _sidecar(out, args.out, args)
    return {"samples": len(samples)}


def cmd_corpus_stats(args, out: Outputs):
    stats = corpus_stats(_load_corpus(args.path))
    sys.stdout.write(_json(stats))
    return None


# ---------------------------------------------------------------- models

def _train_config(args, kind):
    kind = {"linear": "linear_svm", "rbf": "rbf_svm"}.get(kind, kind)
    return TrainConfig(kind=kind, gamma=args.gamma, seed=args.seed, C=args.C, lam=args.lam)


def cmd_model_train(args, out: Outputs):
    samples = _load_corpus(args.corpus)
    train_set, test_set = split(samples, args.test_fraction, args.seed)
    vocab = fit_vocabulary(train_set)
    X = embed_many(train_set, vocab, binary=args.binary)
    model = train(X, labels_of(train_set), _train_config(args, args.kind), vocabulary_ref=vocab.fingerprint)
    model.vocabulary = vocab.to_json()
    model.metadata.update(encoding="binary" if args.binary else "tfidf", test_fraction=args.test_fraction,
                          split_seed=args.seed, corpus=str(args.corpus))
    if test_set:
        model.metadata["test_metrics"] = model_metrics(model, embed_many(test_set, vocab, binary=args.binary),
                                                       labels_of(test_set))
    save_model(model, out.path(args.out))
    return {"kind": model.kind, "fingerprint": model.fingerprint, **model.metadata.get("test_metrics", {})}


def cmd_model_distill(args, out: Outputs):
    teacher = Bundle(args.teacher)
    samples = _load_corpus(args.corpus)
    train_set, _ = teacher.split(samples)
    X = teacher.embed_many(train_set)
    cfg = _train_config(args, args.kind)
    model = train_surrogate(teacher.model, X, cfg, holdout=args.holdout, seed=args.seed,
                            vocabulary_ref=teacher.vocab.fingerprint)
    model.vocabulary = teacher.model.vocabulary
    model.metadata.update(encoding="binary" if teacher.binary else "tfidf", test_fraction=teacher.test_fraction,
                          split_seed=teacher.split_seed, teacher=teacher.model.fingerprint)
    save_model(model, out.path(args.out))
    return {"kind": model.kind, "agreement": model.metadata["agreement"]}


def cmd_model_eval(args, out: Outputs):
    b = Bundle(args.model)
    samples = _load_corpus(args.corpus)
    if args.split == "test":
        samples = b.split(samples)[1]
    metrics = model_metrics(b.model, b.embed_many(samples), labels_of(samples))
    sys.stdout.write(_json({"model": b.model.fingerprint, "split": args.split, "n": len(samples), **metrics}))
    return None


# ---------------------------------------------------------------- attack

def _bundles(paths):
    bundles = [Bundle(p) for p in paths.split(",") if p]
    refs = {b.vocab.fingerprint for b in bundles}
    if len(refs) != 1:
        raise CLIError(EXIT_DIMENSION, "dimension", "models were trained on different vocabularies")
    return bundles


def cmd_attack(args, out: Outputs):
    bundles = _bundles(args.model)
    primary = bundles[0]
    samples = _load_corpus(args.corpus)
    train_set, test_set = primary.split(samples)
    scorers = [b.model for b in bundles]
    detected = []
    for s in test_set:
        if s.label != MALWARE:
            continue
        x = primary.embed(s)[None, :]
        if all(m.predict_proba(x)[0] >= 0.5 for m in scorers):
            detected.append(s)
    if not detected:
        raise CLIError(EXIT_INVALID, "invalid", "no correctly detected malware in the test split")
    rng = np.random.default_rng(args.seed)
    pick = np.sort(rng.choice(len(detected), size=min(args.bases, len(detected)), replace=False))
    bases = [detected[i] for i in pick]
    source = None if args.source == "all" else args.source

    def run(item):
        j, base = item
        pool = build_candidate_pool(train_set, base, args.category, source)
        cfg = GAConfig(seed=int(np.random.SeedSequence([args.seed, j]).generate_state(1)[0]),
                       max_loop=args.max_loop, population=args.population)
        return base, generate(base, scorers, primary.vocab, pool, cfg)

    results = _pmap(run, list(enumerate(bases)), args.workers)
    records, cands = [], []
    for base, res in results:
        for j, c in enumerate(res.candidates):
            cands.append(c)
            records.append({"id": f"{base.id}#{j}", **c.to_json(), "stop_reason": res.stop_reason})
    warnings = []
    if args.per_bin:
        keep, warnings = stratify_by_score(cands, args.per_bin, args.seed)
        keep_ids = {id(c) for c in keep}
        records = [r for r, c in zip(records, cands) if id(c) in keep_ids]
    out.text(args.out, "".join(json.dumps(r) + "\n" for r in records))
    summary = {
        "bases": len(bases),
        "bases_evaded": sum(bool(r.candidates) for _, r in results),
        "candidates": len(records),
        "models": [b.model.fingerprint for b in bundles],
        "bin_warnings": warnings,
    }
    out.text(str(args.out) + ".run.json", _json({"run_config": run_config(args), "summary": summary}))
    return summary


# ---------------------------------------------------------------- explain

def _explain_vector(x, scorer, args):
    if args.method == "mpt":
        cfg = ExplainConfig(k=args.k, lam=args.lam)
        res, pset, resp = explain_with_responses(x, scorer, cfg)
        return res, pset, resp
    cfg = BaselineConfig(method=args.method, seed=args.seed, num_samples=args.num_samples)
    return explain_with(args.method, x, scorer, cfg), None, None


def _load_adv(path):
    recs = []
    with open(_require(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                r["activated_tokens"] = [FeatureToken.parse(t) for t in r["activated"]]
                recs.append(r)
            except (json.JSONDecodeError, KeyError, CorpusError) as e:
                raise CorpusError(f"{path}:{lineno}: {e}") from e
    return recs


def _adv_vector(b: Bundle, base, rec):
    from .corpus import Sample
    s = Sample(id=rec["id"], label=base.label, tokens=base.tokens + tuple(rec["activated_tokens"]))
    return b.embed(s)


def cmd_explain(args, out: Outputs):
    b = Bundle(args.model)
    samples = _load_corpus(args.corpus)
    by_id = {s.id: s for s in samples}
    cfg = run_config(args)

    if args.adv:
        recs = _load_adv(args.adv)
        missing = [r["base_id"] for r in recs if r["base_id"] not in by_id]
        if missing:
            raise CLIError(EXIT_NOT_FOUND, "not_found", f"base sample {missing[0]!r} not in corpus")

        def run(rec):
            x = _adv_vector(b, by_id[rec["base_id"]], rec)
            res = _explain_vector(x, b.model, args)[0]
            return {
                "id": rec["id"],
                "method": args.method,
                "activated_index": [b.vocab.index[t] for t in rec["activated_tokens"]],
                "benign_score": rec["benign_scores"][0],
                "attribution": res.a.tolist(),
            }

        lines = _pmap(run, recs, args.workers)
        out.text(args.out, "".join(json.dumps(r) + "\n" for r in lines))
        out.text(str(args.out) + ".run.json", _json({"run_config": cfg}))
        return {"explained": len(lines), "method": args.method}

    if args.sample_id not in by_id:
        raise CLIError(EXIT_NOT_FOUND, "not_found", f"sample {args.sample_id!r} not in corpus")
    if args.dump_perturbations and args.method != "mpt":
        raise CLIError(EXIT_USAGE, "usage", "--dump-perturbations requires --method mpt")
    x = b.embed(by_id[args.sample_id])
    res, pset, resp = _explain_vector(x, b.model, args)
    order = res.ranked(args.top)
    report = {
        "sample_id": args.sample_id,
        "method": res.method,
        "target_class": res.target_class,
        "base_score": res.base_score,
        "objective": None if np.isnan(res.objective) else res.objective,
        "solver_stats": res.solver_stats,
        "attributions": [[str(b.vocab.tokens[i]), float(res.a[i])] for i in order],
        "attribution": res.a.tolist(),
        "run_config": cfg,
    }
    out.text(args.out, _json(report))
    if args.plot:
        plotting.attribution_bars([str(b.vocab.tokens[i]) for i in order], [res.a[i] for i in order],
                                  out.path(args.plot), title=f"{res.method} attribution: {args.sample_id}")
    if args.dump_perturbations:
        dump_perturbations(pset, resp, out.path(args.dump_perturbations))
    return {"sample_id": args.sample_id, "top": report["attributions"][:5]}


# ---------------------------------------------------------------- evaluate

def _load_explanations(path):
    with open(_require(path), encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_evaluate_good(args, out: Outputs):
    exps = _load_explanations(args.explanations)
    res = sweep_good_explanation([e["activated_index"] for e in exps], [np.array(e["attribution"]) for e in exps])
    out.text(args.out, _csv(["threshold", "fraction"], res.rows()))
    _sidecar(out, args.out, args)
    if args.plot:
        method = exps[0]["method"] if exps else ""
        plotting.line_chart({method: (res.thresholds, res.fractions)}, out.path(args.plot),
                            xlabel="good-explanation threshold", ylabel="fraction of samples")
    return {"fractions": res.fractions}


def cmd_evaluate_bins(args, out: Outputs):
    exps = _load_explanations(args.explanations)
    bins = functional_analysis([e["benign_score"] for e in exps], [e["activated_index"] for e in exps],
                               [np.array(e["attribution"]) for e in exps], args.good_threshold)
    out.text(args.out, _csv(["score_bin", "count_bin", "fraction"], bins.rows()))
    _sidecar(out, args.out, args)
    return {"cells": int((bins.total > 0).sum())}


def cmd_fidelity(args, out: Outputs):
    b = Bundle(args.model)
    samples = _load_corpus(args.corpus)
    test = b.split(samples)[1]
    X = b.embed_many(test)
    y = labels_of(test)
    correct = (b.model.predict_proba(X) >= 0.5).astype(int) == y
    rng = np.random.default_rng(args.seed)
    explainer = make_explainer(args.method, seed=args.seed, k=args.k)

    def take(mask):
        idx = np.flatnonzero(mask)
        if len(idx) > args.samples:
            idx = np.sort(rng.choice(idx, size=args.samples, replace=False))
        return X[idx]

    if args.mode == "deduction":
        Xs = take(correct)
        attrs = _pmap(lambda x: explainer(x, b.model), list(Xs), args.workers)
        curve = deduction_test(Xs, b.model, explainer, args.max_n, args.method, attributions=attrs)
    else:
        Xm, Xb = take(correct & (y == 1)), take(correct & (y == 0))
        attrs = _pmap(lambda x: explainer(x, b.model), list(Xm), args.workers)
        curve = augmentation_test(Xm, Xb, b.model, explainer, args.max_n, args.method, attributions=attrs)
    out.text(args.out, _csv(["n", "pcr", "method"], curve.rows()))
    _sidecar(out, args.out, args)
    if args.plot:
        plotting.line_chart({args.method: (curve.n, curve.pcr)}, out.path(args.plot),
                            xlabel="number of top features", ylabel="PCR", title=f"{args.mode} test")
    return {"mode": args.mode, "pcr": curve.pcr[: min(6, len(curve.pcr))]}


# ---------------------------------------------------------------- parser

def _globals(suppress: bool) -> argparse.ArgumentParser:
    q = _Parser(add_help=False)
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    q.add_argument("--seed", type=int, **(kw or {"default": 0}))
    q.add_argument("--workers", type=int, **(kw or {"default": 1}))
    q.add_argument("--log-level", **(kw or {"default": "WARNING"}))
    return q


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = _globals(suppress=True)
    p = _Parser(prog="mpt-xplain", description=__doc__, parents=[_globals(suppress=False)])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    corpus = sub.add_parser("corpus").add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = corpus.add_parser("gen", parents=[common])
    g.add_argument("--out", required=True)
    g.add_argument("--malware", type=int, default=1000)
    g.add_argument("--benign", type=int, default=1000)
    g.add_argument("--vocab", type=int, default=200)
    g.add_argument("--signal", type=int, default=10)
    g.add_argument("--noise", type=float, default=0.05)
    g.set_defaults(func=cmd_corpus_gen)
    s = corpus.add_parser("stats", parents=[common])
    s.add_argument("path")
    s.set_defaults(func=cmd_corpus_stats)

    model = sub.add_parser("model").add_subparsers(dest="action", required=True, parser_class=_Parser)

    def model_flags(q):
        q.add_argument("--gamma", type=float, default=1.0)
        q.add_argument("--C", type=float, default=None)
        q.add_argument("--lam", type=float, default=None)

    t = model.add_parser("train", parents=[common])
    t.add_argument("--corpus", required=True)
    t.add_argument("--kind", choices=["linear", "rbf"], default="linear")
    t.add_argument("--out", required=True)
    t.add_argument("--test-fraction", type=float, default=0.3)
    t.add_argument("--binary", action="store_true", help="presence encoding instead of TF-IDF")
    model_flags(t)
    t.set_defaults(func=cmd_model_train)
    d = model.add_parser("distill", parents=[common])
    d.add_argument("--teacher", required=True)
    d.add_argument("--corpus", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--kind", choices=["linear", "rbf"], default="linear")
    d.add_argument("--holdout", type=float, default=0.3)
    model_flags(d)
    d.set_defaults(func=cmd_model_distill)
    e = model.add_parser("eval", parents=[common])
    e.add_argument("--model", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", choices=["test", "all"], default="test")
    e.set_defaults(func=cmd_model_eval)

    a = sub.add_parser("attack", parents=[common])
    a.add_argument("--model", required=True, help="one path or a comma-separated list")
    a.add_argument("--corpus", required=True)
    a.add_argument("--bases", type=int, default=50)
    a.add_argument("--category", default="permission")
    a.add_argument("--source", choices=["all", "malware", "benign"], default="all")
    a.add_argument("--max-loop", type=int, default=500)
    a.add_argument("--population", type=int, default=50)
    a.add_argument("--per-bin", type=int, default=0, help="stratify: keep up to N per benign-score bin")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack)

    x = sub.add_parser("explain", parents=[common])
    x.add_argument("--model", required=True)
    x.add_argument("--corpus", required=True)
    target = x.add_mutually_exclusive_group(required=True)
    target.add_argument("--sample-id")
    target.add_argument("--adv", help="explain every candidate of an attack output")
    x.add_argument("--method", choices=["mpt", "lime", "kshap"], default="mpt")
    x.add_argument("--k", type=int, default=50)
    x.add_argument("--lambda", dest="lam", type=float, default=None)
    x.add_argument("--num-samples", type=int, default=None)
    x.add_argument("--top", type=int, default=20)
    x.add_argument("--out", required=True)
    x.add_argument("--plot")
    x.add_argument("--dump-perturbations")
    x.set_defaults(func=cmd_explain)

    ev = sub.add_parser("evaluate").add_subparsers(dest="action", required=True, parser_class=_Parser)
    eg = ev.add_parser("good", parents=[common])
    eg.add_argument("--adv", required=True)
    eg.add_argument("--explanations", required=True)
    eg.add_argument("--out", required=True)
    eg.add_argument("--plot")
    eg.set_defaults(func=cmd_evaluate_good)
    eb = ev.add_parser("bins", parents=[common])
    eb.add_argument("--adv", required=True)
    eb.add_argument("--explanations", required=True)
    eb.add_argument("--good-threshold", type=float, default=0.4)
    eb.add_argument("--out", required=True)
    eb.set_defaults(func=cmd_evaluate_bins)

    f = sub.add_parser("fidelity", parents=[common])
    f.add_argument("--mode", choices=["deduction", "augmentation"], required=True)
    f.add_argument("--model", required=True)
    f.add_argument("--corpus", required=True)
    f.add_argument("--method", choices=["mpt", "lime", "kshap"], default="mpt")
    f.add_argument("--max-n", type=int, default=60)
    f.add_argument("--samples", type=int, default=50)
    f.add_argument("--k", type=int, default=50)
    f.add_argument("--out", required=True)
    f.add_argument("--plot")
    f.set_defaults(func=cmd_fidelity)
    return p


def _fail(code, kind, message):
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": str(message)}) + "\n")
    return code


def dispatch(argv=None) -> int:
    out = Outputs()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "adv", None) and args.command == "evaluate":
            _require(args.adv)
        summary = args.func(args, out)
        out.commit()
        if summary is not None:
            sys.stdout.write(json.dumps(summary, default=_default) + "\n")
        return EXIT_OK
    except CLIError as e:
        code, kind, msg = e.code, e.kind, e
    except FileNotFoundError as e:
        code, kind, msg = EXIT_NOT_FOUND, "not_found", e
    except DimensionError as e:
        code, kind, msg = EXIT_DIMENSION, "dimension", e
    except (CorpusError, ModelError, json.JSONDecodeError, KeyError) as e:
        code, kind, msg = EXIT_SCHEMA, "schema", e
    except (AttackError, SolverError, PerturbationError, BaselineError, EvaluationError, ValueError) as e:
        code, kind, msg = EXIT_INVALID, "invalid", e
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    out.discard()
    return _fail(code, kind, msg)


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
