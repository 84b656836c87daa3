"""``kgx`` command line.

Every command writes its outputs plus a ``manifest.json`` into ``--out``.
Exit status: 0 on success, 1 on invalid input, 2 on runtime failure.
Diagnostics go to stderr; results only ever go to files.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .classifiers import KINDS, TABLE_COLUMNS, evaluate, make_classifier, model_to_dict, stratified_split
from .config import PipelineConfig
from .dataset import RULE_LESION, DatasetDir, write_dataset
from .errors import InvalidParameter, KgxError, MissingGroundTruth, ValidationError
from .features import RuleFeatureExtractor, reference_plans
from .fusion import accuracy_summary, fuse_all, localization_accuracy, read_predictions_jsonl, write_fusion_csv
from .llm import Bridge, IdentityBackend, ReplayBackend, make_backend
from .manifest import MANIFEST_NAME, RunManifest, canonical_json, now_utc
from .plan import load_plan, save_plan, with_defaults
from .rl import (
    SupervisedEnv,
    SupervisedItem,
    UnsupervisedEnv,
    greedy_param,
    read_detections_jsonl,
    sweep,
    train_agent,
)
from .rng import SplitMix64, derive_seed
from .rulebase import (
    DEFAULT_QUERY,
    bundled_corpus_dir,
    bundled_rulebase,
    dump_rulebase,
    load_corpus,
    read_rulebase,
    retrieve_passages,
    write_feature_csv,
)
from .synth import generate_dataset, tuning_scenes
from .verify import select_validation, verify_and_refine

log = logging.getLogger("kgx")

COMMANDS = ("gen-data", "build-rules", "tune", "verify", "extract-train-eval", "fuse", "report")
N_GRADES = 5
TUNING_SCENE_COUNTS = (6, 4)
# options that only say where things go; they never enter the manifest
_NOT_RECORDED = {"command", "out", "config", "replay", "verbose"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _bundled(rel: str) -> Path:
    from importlib import resources
    return Path(str(resources.files("kgx").joinpath(rel)))


def _write_json(path: Path, obj) -> None:
    path.write_text(canonical_json(obj))


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise InvalidParameter(f"expected comma-separated numbers, got {text!r}") from None


def _path_option(args, cfg, name):
    value = getattr(args, name, None)
    return value if value is not None else cfg.paths.get(name)


def _require(value, flag):
    if value is None:
        raise InvalidParameter(f"{flag} is required (or set it under 'paths' in the config)")
    return value


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg, out, manifest):
    if args.fixture == "tuning":
        n_clip, n_disc = TUNING_SCENE_COUNTS
        samples = tuning_scenes(args.seed, n_clip, n_disc, width=args.size, height=args.size,
                                noise_sigma=args.noise_sigma)
        names = [f"clip_{i:02d}" for i in range(n_clip)] + [f"disc_{i:02d}" for i in range(n_disc)]
        named = list(zip(names, samples))
    else:
        if args.n < 1:
            raise InvalidParameter("--n must be >= 1")
        mix = _csv_floats(args.mix)
        if len(mix) != N_GRADES:
            raise InvalidParameter(f"--mix needs {N_GRADES} weights")
        named = generate_dataset(args.n, args.seed, mix, width=args.size, height=args.size,
                                 noise_sigma=args.noise_sigma)
    ids = write_dataset(out, named, args.seed)
    log.info("wrote %d images to %s", len(ids), out)


def cmd_build_rules(args, cfg, out, manifest):
    corpus_dir = _path_option(args, cfg, "corpus") or bundled_corpus_dir()
    manifest.add_input("corpus", corpus_dir)
    corpus = load_corpus(corpus_dir)
    passages = retrieve_passages(corpus, args.query, args.k)
    _write_json(out / "passages.json",
                [{"doc_id": d, "score": s, "start": 0, "end": len(t)} for d, t, s in passages])
    bridge = _bridge(args, cfg, out)
    try:
        rb = bridge.consolidate_rules(passages, args.disease)
    finally:
        bridge.save_transcript(out / "transcript.jsonl")
    (out / "rulebase.json").write_text(dump_rulebase(rb))


def _supervised_items(ds, det_path, rule):
    dets = read_detections_jsonl(det_path, rule_id=rule)
    lesion = RULE_LESION.get(rule) if rule else None
    return [SupervisedItem(iid, dets.get(iid, []), ds.truth_boxes(iid, lesion)) for iid in ds.ids]


def cmd_tune(args, cfg, out, manifest):
    dataset = _require(_path_option(args, cfg, "dataset"), "--dataset")
    ds = DatasetDir.open(dataset)
    manifest.add_input("dataset", dataset)
    qcfg = dataclasses.replace(cfg.rl, seed=args.seed)
    plan = None
    if args.regime == "supervised":
        det_path = _path_option(args, cfg, "detections") or ds.root / "detections.jsonl"
        manifest.add_input("detections", det_path)
        env = SupervisedEnv(_supervised_items(ds, det_path, args.rule))
    else:
        plan_path = args.plan or _bundled("data/plans/exudates.json")
        manifest.add_input("plan", plan_path)
        plan = load_plan(plan_path)
        lesion = RULE_LESION.get(plan.rule_id)
        if lesion is None:
            raise InvalidParameter(f"no expected-count field for rule {plan.rule_id!r}")
        targets = [ds.expected_count(iid, lesion) for iid in ds.ids]
        env = UnsupervisedEnv(plan, [ds.image(iid) for iid in ds.ids], targets)
    table, episodes = train_agent(env, qcfg)
    state = greedy_param(table)
    bindings = env.bindings(state)
    s_idx = env.states.index(state)
    every = range(env.n_images)
    _write_json(out / "bindings.json", {
        "regime": args.regime, "bindings": bindings,
        "state": list(state) if isinstance(state, tuple) else state,
        "max_q": float(table.values[s_idx].max()), "reward": env.reward(s_idx, every),
    })
    episodes.to_csv(out / "episodes.csv")
    _write_json(out / "qtable.json", table.to_dict())
    if plan is not None:
        save_plan(with_defaults(plan, **bindings), out / "tuned_plan.json")
    if args.sweep:
        r = sweep(env)
        best = env.states[int(np.argmax(r))]
        _write_json(out / "sweep.json", {
            "states": [list(s) if isinstance(s, tuple) else s for s in env.states],
            "rewards": r.tolist(), "optimum": list(best) if isinstance(best, tuple) else best})


def _bridge(args, cfg, out) -> Bridge:
    if args.replay_dir is not None and cfg.bridge.backend == "remote":
        transcript = args.replay_dir / "transcript.jsonl"
        if not transcript.is_file():
            raise InvalidParameter(f"cannot replay a remote run without {transcript}")
        return Bridge(cfg.bridge, ReplayBackend.from_file(transcript))
    return Bridge(cfg.bridge, make_backend(cfg.bridge))


def cmd_verify(args, cfg, out, manifest):
    plan_path = _require(args.plan, "--plan")
    dataset = _require(_path_option(args, cfg, "dataset"), "--dataset")
    manifest.add_input("plan", plan_path)
    manifest.add_input("dataset", dataset)
    plan = load_plan(plan_path)
    ds = DatasetDir.open(dataset)
    vcfg = cfg.verification
    changes = {k: v for k, v in (("mode", args.mode), ("tau", args.tau),
                                 ("max_iterations", args.max_iterations)) if v is not None}
    vcfg = dataclasses.replace(vcfg, **changes)
    lesion = RULE_LESION.get(plan.rule_id)
    if lesion is None:
        raise InvalidParameter(f"no ground-truth lesion type for rule {plan.rule_id!r}")
    # images without the target lesion score 1.0 whenever nothing is detected,
    # which says little about the plan, so validation draws from the others
    if vcfg.regime == "supervised":
        eligible = [i for i in ds.ids if ds.truth_boxes(i, lesion)]
    else:
        eligible = [i for i in ds.ids if ds.expected_count(i, lesion) > 0]
    ids = select_validation(eligible, args.k, args.seed)
    if vcfg.regime == "supervised":
        validation = [(ds.image(i), ds.truth_boxes(i, lesion)) for i in ids]
    else:
        validation = [(ds.image(i), ds.expected_count(i, lesion)) for i in ids]
    if args.refiner == "identity":
        bridge = Bridge(cfg.bridge, IdentityBackend())
    else:
        bridge = _bridge(args, cfg, out)
    try:
        report = verify_and_refine(plan, validation, bridge.refine_plan, vcfg)
    finally:
        bridge.save_transcript(out / "transcript.jsonl")
    doc = report.to_dict()
    doc["validation_ids"] = ids
    _write_json(out / "report.json", doc)
    save_plan(report.final_plan, out / "final_plan.json")
    log.info("verification %s after %d version(s): %s", "passed" if report.passed else "failed",
             len(report.plan_versions), report.stop_reason)


def _load_plans(plans_dir, rb):
    if plans_dir is None:
        return reference_plans(rb)
    d = Path(plans_dir)
    if not d.is_dir():
        raise InvalidParameter(f"plans directory {d} does not exist")
    plans = {}
    for p in sorted(d.glob("*.json")):
        plan = load_plan(p)
        if plan.rule_id in plans:
            raise InvalidParameter(f"two plans for rule {plan.rule_id!r} in {d}")
        plans[plan.rule_id] = plan
    return plans


def cmd_extract_train_eval(args, cfg, out, manifest):
    dataset = _require(_path_option(args, cfg, "dataset"), "--dataset")
    ds = DatasetDir.open(dataset)
    manifest.add_input("dataset", dataset)
    rb_path = _path_option(args, cfg, "rulebase")
    manifest.add_input("rulebase", rb_path)
    rb = read_rulebase(rb_path) if rb_path else bundled_rulebase()
    plans_dir = _path_option(args, cfg, "plans")
    manifest.add_input("plans", plans_dir)
    plans = _load_plans(plans_dir, rb)
    kind = args.kind or cfg.classifier

    labels, demos = ds.labels(), ds.demographics()
    missing = [i for i in ds.ids if i not in labels]
    if missing:
        raise MissingGroundTruth(f"no label for {len(missing)} image(s), e.g. {missing[0]}")
    ids = ds.ids
    y = np.array([labels[i] for i in ids], dtype=np.int64)
    if args.shuffle_labels:
        y = y[SplitMix64(derive_seed(args.seed, "shuffle-labels")).permutation(len(y))]

    ext = RuleFeatureExtractor(rb, plans, workers=args.workers)
    if ext.fit([]).missing_rules_:
        log.warning("no plan for visual rule(s) %s; their features are zero", ", ".join(ext.missing_rules_))
    results = ext.extract(ds.image(i) for i in ids)
    train_idx, val_idx, test_idx = stratified_split(y, (0.6, 0.2, 0.2), args.seed)
    ext.fit([(None, demos.get(ids[i])) for i in train_idx])
    X = ext.transform([(None, demos.get(i)) for i in ids], results=results)
    schema = ext.schema_

    params = dict(cfg.classifier_params)
    if "seed" in KINDS[kind]().get_params():
        params.setdefault("seed", args.seed)
    model = make_classifier(kind, schema_fingerprint=schema.fingerprint(), **params)
    model.fit(X[train_idx], y[train_idx])
    val_acc = float(np.mean(model.predict(X[val_idx]) == y[val_idx]))
    report = evaluate(model.predict(X[test_idx]), y[test_idx], N_GRADES, val_acc)

    split = np.empty(len(ids), dtype=object)
    split[train_idx], split[val_idx], split[test_idx] = "train", "val", "test"
    write_feature_csv(out / "features.csv", schema, X)
    with open(out / "samples.csv", "w") as fh:
        fh.write("image_id,label,split\n")
        for iid, lab, part in zip(ids, y, split):
            fh.write(f"{iid},{int(lab)},{part}\n")
    _write_json(out / "schema.json", {**schema.to_dict(), "fingerprint": schema.fingerprint(),
                                      "names": schema.names})
    _write_json(out / "model.json", model_to_dict(model))
    (out / "metrics.json").write_text(report.to_json(kind))
    report.write_confusion_csv(out / "confusion.csv")
    proba = model.predict_proba(X)
    with open(out / "kd_outputs.jsonl", "w") as fh:
        for iid, p, part in zip(ids, proba, split):
            full = np.zeros(N_GRADES)
            full[model.classes_] = p
            fh.write(json.dumps({"image_id": iid, "label": int(np.argmax(full)), "proba": full.tolist(),
                                 "split": part}, sort_keys=True) + "\n")

    covered = sorted(RULE_LESION[r] for r in plans if r in RULE_LESION)
    dets = [[tuple(b) for rid in sorted(res) for b in res[rid].boxes] for res in results]
    truths = [[tuple(l["box"]) for l in ds.truth(i)["lesions"] if l["type"] in covered] for i in ids]
    loc = {"iou_min": 0.5, "lesion_types": covered, "n_truth": sum(map(len, truths)),
           "n_detections": sum(map(len, dets))}
    loc["accuracy"] = localization_accuracy(dets, truths, 0.5) if loc["n_truth"] else None
    _write_json(out / "localization.json", loc)
    log.info("%s: test accuracy %.4f, localization %s", kind, report.test_accuracy, loc["accuracy"])


def _read_kd_outputs(path, split):
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if split != "all" and rec.get("split") != split:
                    continue
                out[str(rec["image_id"])] = (int(rec["label"]), [float(v) for v in rec["proba"]])
            except (ValueError, KeyError, TypeError) as exc:
                raise InvalidParameter(f"{path}:{ln}: bad knowledge-model record ({exc})") from None
    return out


def cmd_fuse(args, cfg, out, manifest):
    if not cfg.fusion:
        raise InvalidParameter("fusion is switched off in the config")
    pred_path = _require(_path_option(args, cfg, "predictions"), "--predictions")
    kd_path = _require(args.kd, "--kd")
    manifest.add_input("predictions", pred_path)
    manifest.add_input("kd_outputs", kd_path)
    kd = _read_kd_outputs(kd_path, args.split)
    preds = read_predictions_jsonl(pred_path)
    if args.split != "all":
        preds = [p for p in preds if p.image_id in kd]
    decisions = fuse_all(preds, kd)
    write_fusion_csv(out / "fusion.csv", decisions)
    if args.labels:
        manifest.add_input("labels", args.labels)
        lp = Path(args.labels)
        if not lp.is_dir():
            if lp.name != "labels.csv":
                raise InvalidParameter("--labels must be a dataset directory or a labels.csv file")
            lp = lp.parent
        labels = DatasetDir(lp, []).labels()
        _write_json(out / "fusion_summary.json", accuracy_summary(decisions, labels))


def cmd_report(args, cfg, out, manifest):
    rows, entries = [], []
    for run in args.runs:
        run = Path(run)
        m = RunManifest.read(run)
        manifest.add_input(f"run:{run.name}", run / MANIFEST_NAME)
        entry = {"run": run.name, "run_id": m.run_id, "command": m.command, "seed": m.seed}
        for name in ("metrics.json", "bindings.json", "report.json", "fusion_summary.json", "localization.json"):
            p = run / name
            if p.is_file():
                doc = json.loads(p.read_text())
                if name == "report.json":
                    doc = {k: doc[k] for k in ("passed", "stop_reason", "mode", "tau")} | {
                        "iterations": len(doc["plan_versions"])}
                entry[name.removesuffix(".json")] = doc
        if "metrics" in entry:
            rows.append((entry["metrics"].get("model", run.name), entry["metrics"]["row"]))
        entries.append(entry)
    _write_json(out / "report.json", entries)
    with open(out / "table.csv", "w") as fh:
        fh.write("Model," + ",".join(TABLE_COLUMNS) + "\n")
        for model, row in rows:
            cells = ["" if row[c] is None else f"{100 * row[c]:.2f}" for c in TABLE_COLUMNS]
            fh.write(model + "," + ",".join(cells) + "\n")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "build-rules": cmd_build_rules,
    "tune": cmd_tune,
    "verify": cmd_verify,
    "extract-train-eval": cmd_extract_train_eval,
    "fuse": cmd_fuse,
    "report": cmd_report,
}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline config (JSON); flags override it")
    common.add_argument("--seed", type=int, default=None, help="root seed (default 0)")
    common.add_argument("--out", help="run directory (default kgx-runs/<command>)")
    common.add_argument("--backend", choices=("mock", "remote"), help="language-model backend")
    common.add_argument("--replay", help="re-run from a manifest.json written by an earlier run")
    common.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")

    parser = _Parser(prog="kgx", description="Knowledge-guided retinal feature extraction pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--mix", default="0.2,0.2,0.2,0.2,0.2", help="grade proportions")
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--noise-sigma", type=float, default=3.0)
    p.add_argument("--fixture", choices=("grading", "tuning"), default="grading")

    p = sub.add_parser("build-rules", parents=[common], help="retrieve passages and consolidate a rule base")
    p.add_argument("--corpus")
    p.add_argument("--query", default=DEFAULT_QUERY)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--disease", default="diabetic retinopathy")

    p = sub.add_parser("tune", parents=[common], help="Q-learning parameter tuning")
    p.add_argument("--dataset")
    p.add_argument("--regime", choices=("supervised", "unsupervised"), default="supervised")
    p.add_argument("--plan", help="plan template (unsupervised; default: bundled exudate plan)")
    p.add_argument("--detections", help="scored detections (supervised; default: dataset detections.jsonl)")
    p.add_argument("--rule", help="only use detections and truth of this rule (supervised)")
    p.add_argument("--sweep", action="store_true", help="also write the exhaustive reward sweep")

    p = sub.add_parser("verify", parents=[common], help="self-verification and refinement of a plan")
    p.add_argument("--plan")
    p.add_argument("--dataset")
    p.add_argument("--k", type=int, default=8, help="number of validation images")
    p.add_argument("--refiner", choices=("bridge", "identity"), default="bridge")
    p.add_argument("--mode", choices=("mean_score", "entropy"))
    p.add_argument("--tau", type=float)
    p.add_argument("--max-iterations", type=int)

    p = sub.add_parser("extract-train-eval", parents=[common], help="features, classifier, metrics")
    p.add_argument("--dataset")
    p.add_argument("--plans", help="directory of plan files (default: bundled reference plans)")
    p.add_argument("--rulebase")
    p.add_argument("--kind", choices=sorted(KINDS))
    p.add_argument("--shuffle-labels", action="store_true", help="chance-level control")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("fuse", parents=[common], help="confidence-gated fusion with external predictions")
    p.add_argument("--predictions")
    p.add_argument("--kd", help="kd_outputs.jsonl from extract-train-eval")
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--labels", help="dataset directory or labels.csv, for accuracy summaries")

    p = sub.add_parser("report", parents=[common], help="collect results of earlier runs")
    p.add_argument("--runs", nargs="+", required=True)
    return parser


def _prepare(args):
    """Resolve config, seed and replay; returns (args, cfg, manifest)."""
    args.replay_dir = None
    if args.replay:
        old = RunManifest.read(args.replay)
        if old.command != args.command:
            raise InvalidParameter(f"manifest is for {old.command!r}, not {args.command!r}")
        replay = Path(args.replay)
        args.replay_dir = replay if replay.is_dir() else replay.parent
        for k, v in old.options.items():
            setattr(args, k, v)
        args.seed = old.seed
        cfg = PipelineConfig.from_dict(old.config)
    else:
        cfg = PipelineConfig.load(args.config)
        if args.seed is None:
            args.seed = 0
        if args.backend:
            cfg = cfg.replace(bridge=dataclasses.replace(cfg.bridge, backend=args.backend))
    options = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_RECORDED | {"seed", "replay_dir"}}
    manifest = RunManifest(args.command, options, cfg.to_dict(), args.seed)
    return args, cfg, manifest


def run(args) -> int:
    args, cfg, manifest = _prepare(args)
    out = Path(args.out or f"kgx-runs/{args.command}")
    out.mkdir(parents=True, exist_ok=True)
    manifest.timestamps["started"] = now_utc()
    HANDLERS[args.command](args, cfg, out, manifest)
    manifest.timestamps["finished"] = now_utc()
    manifest.record_artifacts(out)
    manifest.write(out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="kgx: %(levelname)s: %(message)s",
                        level=logging.INFO if args.verbose else logging.WARNING, force=True)
    try:
        return run(args)
    except (ValidationError, ValueError) as exc:
        print(f"kgx {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (KgxError, OSError) as exc:
        print(f"kgx {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
