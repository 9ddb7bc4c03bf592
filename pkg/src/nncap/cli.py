"""Command-line surface: dataset generation, training, datastore
construction, caption generation, evaluation, and the ablation run.

Exit codes: 0 on success, 2 for usage or I/O problems, 3 for artifact
format violations (bad magic/version/layout).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import baseline as B
from . import data as D
from . import metrics as ME
from . import model as M
from . import reports as R
from . import retrieval as RE
from . import training as T
from .config import BENCHMARK, BENCHMARK_SEEDS, RunConfig, build_run_config
from .params import FormatError
from .scenes import SceneConfig

CAPTIONS_MAGIC = "NNCAPCAPS"
CAPTIONS_VERSION = 1


def _parse_ratios(text: str) -> tuple[float, ...]:
    parts = tuple(float(x) for x in text.split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("need three comma-separated ratios")
    return parts


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    scfg = SceneConfig(min_obstacles=args.min_obstacles,
                       max_obstacles=args.max_obstacles)
    ratios = args.ratios or D.DEFAULT_SPLIT_RATIOS
    dataset = D.build_dataset(args.n, args.seed, split_ratios=ratios,
                              scene_config=scfg)
    D.save_dataset(dataset, args.out)
    sizes = {k: len(v) for k, v in dataset.splits.items()}
    print(f"wrote {args.out}: splits {sizes['train']}/{sizes['val']}/"
          f"{sizes['test']}, vocabulary {len(dataset.vocab)} tokens")
    return 0


def _config_from_args(args) -> RunConfig:
    overrides = {}
    for key in ("seed", "max_epochs", "batch_size", "lr", "d_model",
                "encoder_layers", "decoder_layers", "n_neighbors",
                "knn_weight", "gl_threshold", "cam_epochs"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    if getattr(args, "no_cam", False):
        overrides["no_cam"] = True
    if getattr(args, "no_nncm", False):
        overrides["no_nncm"] = True
    return build_run_config(getattr(args, "config", None), overrides)


def _train_config(cfg: RunConfig) -> T.TrainConfig:
    return T.TrainConfig(
        ce_weight=cfg.ce_weight, nce_weight=cfg.nce_weight, lr=cfg.lr,
        beta1=cfg.beta1, beta2=cfg.beta2, batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs, gl_threshold=cfg.gl_threshold,
        nce_temperature=cfg.nce_temperature, seed=cfg.seed,
        cam_epochs=cfg.cam_epochs, cam_lr=cfg.cam_lr)


def _model_config(cfg: RunConfig, vocab_size: int,
                  dtype=np.float32) -> M.ModelConfig:
    return M.ModelConfig(vocab_size=vocab_size, d_model=cfg.d_model,
                         encoder_layers=cfg.encoder_layers,
                         decoder_layers=cfg.decoder_layers, heads=cfg.heads,
                         dtype=dtype)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    dataset = D.load_dataset(args.data)
    dtype = np.float64 if args.precision == "f64" else np.float32
    result = T.train_captioner(dataset, _train_config(cfg),
                               model_config=_model_config(cfg, len(dataset.vocab), dtype),
                               no_cam=cfg.no_cam)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.model.store.save(out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.jsonl")
    T.save_log(result.records, log_path)
    R.write_training_curves(result.records, log_path.with_suffix(".png"))
    last = result.records[-1]
    print(f"trained {last.epoch} epochs (val loss {last.val_loss:.4f}, "
          f"gl {last.gl:.2f}); weights -> {out}")
    return 0


def _load_model(cfg: RunConfig, weights: str, vocab_size: int) -> M.CaptionModel:
    model = M.CaptionModel(_model_config(cfg, vocab_size),
                           np.random.default_rng(0))
    model.store.load(weights)
    return model


def cmd_build_datastore(args) -> int:
    cfg = _config_from_args(args)
    dataset = D.load_dataset(args.data)
    model = _load_model(cfg, args.weights, len(dataset.vocab))
    train = dataset["train"]
    att = model.attention_maps(train, disabled=cfg.no_cam)
    ds = model.build_datastore(train, att)
    ds.save(args.out)
    print(f"datastore: {ds.count} entries of width {ds.d_model} -> {args.out}")
    return 0


def cmd_generate(args) -> int:
    cfg = _config_from_args(args)
    dataset = D.load_dataset(args.data)
    samples = dataset[args.split]
    model = _load_model(cfg, args.weights, len(dataset.vocab))
    datastore = None
    if args.datastore and not cfg.no_nncm:
        datastore = RE.Datastore.load(args.datastore)
    att = model.attention_maps(samples, disabled=cfg.no_cam)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    lines = []
    for i, sample in enumerate(samples):
        ids = model.greedy_generate(sample, att[i:i + 1], datastore=datastore,
                                    n_neighbors=cfg.n_neighbors,
                                    knn_weight=cfg.knn_weight)
        lines.append(" ".join(dataset.vocab.decode(ids)))
    per_sample = (time.time() - t0) / max(1, len(samples))
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(f"# {CAPTIONS_MAGIC} v{CAPTIONS_VERSION} split={args.split} "
                 f"count={len(lines)}\n")
        fh.write("\n".join(lines) + "\n")
    print(f"generated {len(lines)} captions ({per_sample * 1000:.0f} ms/sample) "
          f"-> {out}")
    return 0


def read_captions(path: str | Path) -> list[list[str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(f"# {CAPTIONS_MAGIC} "):
        raise FormatError(f"{path}: missing caption-file header")
    return [line.split() for line in lines[1:]]


def _corpus(candidates: list[list[str]], samples, vocab,
            single_reference: bool) -> ME.EvalCorpus:
    cands = [c if c else ["<unk>"] for c in candidates]
    refs = []
    for s in samples:
        pool = [s.caption_train] if single_reference else s.captions_eval
        refs.append([vocab.decode(ids) for ids in pool])
    return ME.EvalCorpus(candidates=cands, references=refs)


def cmd_eval(args) -> int:
    dataset = D.load_dataset(args.data)
    samples = dataset[args.split]
    runs = []
    for path in args.captions:
        cands = read_captions(path)
        if len(cands) != len(samples):
            raise ValueError(f"{path}: {len(cands)} captions vs "
                             f"{len(samples)} samples in split {args.split!r}")
        corpus = _corpus(cands, samples, dataset.vocab, args.single_reference)
        runs.append(ME.score_corpus(corpus))
    table = R.write_eval_report(runs, args.out_prefix,
                                title=f"{args.split} evaluation")
    print(table.read_text(), end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.data:
        dataset = D.load_dataset(args.data)
    else:
        print(f"generating benchmark dataset (n={BENCHMARK['n']}, "
              f"seed={BENCHMARK['seed']})")
        dataset = D.build_dataset(BENCHMARK["n"], BENCHMARK["seed"],
                                  split_ratios=BENCHMARK["split_ratios"])
        D.save_dataset(dataset, out_dir / "dataset")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds \
        else list(BENCHMARK_SEEDS)

    results = run_ablation(dataset, cfg, seeds,
                           conditions=("baseline_freq", "full", "no_nncm",
                                       "no_cam"),
                           verbose=True)
    table = R.write_ablation_report(results, out_dir / "ablation",
                                    title=f"ablation over seeds {seeds}")
    print(table.read_text(), end="")
    return 0


def run_ablation(dataset: D.Dataset, cfg: RunConfig, seeds: list[int],
                 conditions=("baseline_freq", "full", "no_nncm"),
                 verbose: bool = False) -> dict[str, list[dict[str, float]]]:
    """Train/evaluate the requested conditions for each seed.

    ``full`` and ``no_nncm`` share one training run per seed (the retrieval
    memory only acts at decode time); ``no_cam`` retrains with the
    attention channel zeroed.
    """
    test = dataset["test"]
    vocab = dataset.vocab
    results: dict[str, list[dict[str, float]]] = {c: [] for c in conditions}

    def log(msg):
        if verbose:
            print(msg, flush=True)

    def evaluate(candidate_ids: list[list[int]]) -> dict[str, float]:
        cands = [vocab.decode(ids) if ids else ["<unk>"] for ids in candidate_ids]
        refs = [[vocab.decode(r) for r in s.captions_eval] for s in test]
        return ME.score_corpus(ME.EvalCorpus(candidates=cands, references=refs))

    if "baseline_freq" in conditions:
        freq = B.fit_frequency_baseline(dataset["train"])
        score = evaluate([freq.generate(s) for s in test])
        for _ in seeds:
            results["baseline_freq"].append(score)
        log(f"baseline_freq: {score}")

    for seed in seeds:
        tcfg = _train_config(cfg)
        tcfg.seed = seed
        mcfg = _model_config(cfg, len(vocab))
        if "full" in conditions or "no_nncm" in conditions:
            t0 = time.time()
            res = T.train_captioner(dataset, tcfg, model_config=mcfg)
            att_test = res.model.attention_maps(test)
            datastore = res.model.build_datastore(dataset["train"], res.att_train)
            log(f"seed {seed}: trained {len(res.records)} epochs in "
                f"{time.time() - t0:.0f}s; datastore {datastore.count} entries")
            if "no_nncm" in conditions:
                caps = [res.model.greedy_generate(s, att_test[i:i + 1])
                        for i, s in enumerate(test)]
                results["no_nncm"].append(evaluate(caps))
                log(f"seed {seed} no_nncm: {results['no_nncm'][-1]}")
            if "full" in conditions:
                caps = [res.model.greedy_generate(
                            s, att_test[i:i + 1], datastore=datastore,
                            n_neighbors=cfg.n_neighbors,
                            knn_weight=cfg.knn_weight)
                        for i, s in enumerate(test)]
                results["full"].append(evaluate(caps))
                log(f"seed {seed} full: {results['full'][-1]}")
        if "no_cam" in conditions:
            res = T.train_captioner(dataset, tcfg, model_config=mcfg, no_cam=True)
            att_test = np.zeros((len(test), 1, 16, 16), dtype=np.float32)
            datastore = res.model.build_datastore(dataset["train"], res.att_train)
            caps = [res.model.greedy_generate(
                        s, att_test[i:i + 1], datastore=datastore,
                        n_neighbors=cfg.n_neighbors, knn_weight=cfg.knn_weight)
                    for i, s in enumerate(test)]
            results["no_cam"].append(evaluate(caps))
            log(f"seed {seed} no_cam: {results['no_cam'][-1]}")
    return results


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="nncap",
        description="collision-outcome captioning: data, training, retrieval, "
                    "evaluation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--ratios", type=_parse_ratios, default=None,
                   help="train,val,test ratios (default: reference proportions)")
    g.add_argument("--min-obstacles", type=int, default=1)
    g.add_argument("--max-obstacles", type=int, default=5)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the captioning model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log", default=None)
    t.add_argument("--config", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    t.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--d-model", dest="d_model", type=int, default=None)
    t.add_argument("--gl-threshold", dest="gl_threshold", type=float, default=None)
    t.add_argument("--cam-epochs", dest="cam_epochs", type=int, default=None)
    t.add_argument("--no-cam", action="store_true")
    t.add_argument("--precision", choices=("f32", "f64"), default="f32")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("build-datastore", help="teacher-force the training "
                       "split into a retrieval datastore")
    b.add_argument("--weights", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--config", default=None)
    b.add_argument("--no-cam", action="store_true")
    b.set_defaults(func=cmd_build_datastore)

    ge = sub.add_parser("generate", help="generate captions for a split")
    ge.add_argument("--weights", required=True)
    ge.add_argument("--data", required=True)
    ge.add_argument("--split", default="test", choices=D.SPLIT_NAMES)
    ge.add_argument("--datastore", default=None)
    ge.add_argument("--out", required=True)
    ge.add_argument("--config", default=None)
    ge.add_argument("--knn-weight", dest="knn_weight", type=float, default=None)
    ge.add_argument("--n-neighbors", dest="n_neighbors", type=int, default=None)
    ge.add_argument("--no-cam", action="store_true")
    ge.add_argument("--no-nncm", action="store_true")
    ge.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="score caption files against a split")
    e.add_argument("--captions", nargs="+", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=D.SPLIT_NAMES)
    e.add_argument("--out-prefix", dest="out_prefix", default="eval_report")
    e.add_argument("--single-reference", action="store_true",
                   help="score against the training caption only")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the ablation table end to end")
    a.add_argument("--data", default=None,
                   help="existing dataset dir (default: generate the benchmark)")
    a.add_argument("--out-dir", dest="out_dir", required=True)
    a.add_argument("--seeds", default=None, help="comma-separated seeds")
    a.add_argument("--config", default=None)
    a.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    a.set_defaults(func=cmd_ablate)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
