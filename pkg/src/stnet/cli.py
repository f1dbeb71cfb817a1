"""``stnet`` command line: one pipeline stage per invocation.

Run directory layout (``--run-dir``, default ``$STNET_RUN_ROOT/default``)::

    corpus/{upper,lower}/*.png, corpus/pairs.json
    splits/{upper,lower}.json, splits/stats.json
    backbone/{upper,lower}.pt
    dst/dst.pt, dst/curve.csv, dst/efficacy.json
    train/<tag>/        config, loss log, checkpoints, samples, metrics
    synth/<tag>/        one output per input plus grid.png
    eval/<tag>.json     MetricReport
    manifests/<stage>.json
"""
import argparse
import dataclasses
import json
import logging
import os
import sys
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import BackboneConfig, DataConfig, DstConfig, format_flat_config, load_config
from .exceptions import ConfigError, MissingStageError, NumericalAbort, SplitError
from .translation import TrainConfig

logger = logging.getLogger("stnet")

RUN_ROOT_ENV = "STNET_RUN_ROOT"
EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 1, 2, 3, 4


@dataclass
class EvalConfig:
    direction: str = "upper->lower"
    ablate_L_ST: bool = False
    ablate_dual: bool = False
    embedder: str = "dst_features"
    n_grid: int = 8


class OverwriteRefused(Exception):
    pass


# run manifest ----------------------------------------------------------------

class RunManifest:
    """Record of one stage invocation, written to ``manifests/<stage>.json``."""

    def __init__(self, run_dir, stage, config_path, seed, argv):
        self.run_dir = Path(run_dir)
        self.name = stage
        self.data = {
            "run_id": f"{self.run_dir.name}-{uuid.uuid4().hex[:8]}",
            "stage": stage,
            "version": __version__,
            "config_path": str(config_path) if config_path else None,
            "config": None,
            "seed": seed,
            "argv": list(argv),
            "inputs": {},
            "outputs": [],
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished": None,
            "exit_status": None,
        }

    def input(self, name, path):
        self.data["inputs"][name] = str(path)

    def output(self, path):
        self.data["outputs"].append(str(path))
        return path

    def finish(self, status, error=None):
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.data["exit_status"] = status
        if error:
            self.data["error"] = error
        out = self.run_dir / "manifests" / f"{self.name}.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(self.data, indent=2) + "\n")
        return out


# helpers -----------------------------------------------------------------------

def default_run_dir():
    return Path(os.environ.get(RUN_ROOT_ENV, "runs")) / "default"


def _require(path, stage):
    path = Path(path)
    if not path.exists():
        raise MissingStageError(stage, path)
    return path


def _guard(path, force):
    """Refuse to overwrite an existing artifact unless ``--force``."""
    path = Path(path)
    if path.exists() and not force and (path.is_file() or any(path.iterdir())):
        raise OverwriteRefused(f"{path} already exists; pass --force to overwrite")
    return path


def _resolve_seed(args, config=None):
    if args.seed is not None:
        return args.seed
    return getattr(config, "seed", 0)


def _load_split(run_dir, domain, resolution):
    from .dataio import SplitManifest, load_dataset

    manifest = SplitManifest.load(_require(run_dir / "splits" / f"{domain}.json", "prepare-data"))
    records = {r.id: r for r in load_dataset(manifest.root, domain, resolution)}
    missing = [i for i in manifest.train_ids + manifest.test_ids if i not in records]
    if missing:
        raise MissingStageError("make-synthetic", f"{manifest.root}/{missing[0]}.png")
    pick = lambda ids: [records[i] for i in ids]  # noqa: E731
    return pick(manifest.train_ids), pick(manifest.test_ids)


def _pixels(records):
    from .dataio import stack_pixels

    return stack_pixels(records)


def train_tag(config):
    src, tgt = config.source_domain, config.target_domain
    suffix = {(False, False): "full", (True, False): "no_lst", (False, True): "no_dual",
              (True, True): "no_lst_no_dual"}[(bool(config.ablate_L_ST), bool(config.ablate_dual))]
    return f"{src}2{tgt}_{suffix}"


def _final_checkpoint(run_dir, config):
    return _require(run_dir / "train" / train_tag(config) / "final.pt", "train")


# stages ------------------------------------------------------------------------

def cmd_make_synthetic(args, run_dir, manifest):
    from .synthetic import write_corpus

    cfg = load_config(args.config, DataConfig)
    n = args.n if args.n is not None else cfg.n_per_domain
    res = args.resolution if args.resolution is not None else cfg.resolution
    seed = _resolve_seed(args)
    out = Path(args.out) if args.out else run_dir / "corpus"
    try:
        write_corpus(out, n, res, seed, force=args.force)
    except FileExistsError as exc:
        raise OverwriteRefused(str(exc)) from None
    manifest.data.update(config=dataclasses.asdict(cfg) | {"n_per_domain": n, "resolution": res}, seed=seed)
    for sub in ("upper", "lower", "pairs.json"):
        manifest.output(out / sub)
    print(f"wrote {n} upper and {n} lower images to {out}")


def cmd_prepare_data(args, run_dir, manifest):
    from .dataio import DuplicateSafeSplitter, LoadReport, load_dataset

    cfg = load_config(args.config, DataConfig)
    ratio = args.ratio if args.ratio is not None else cfg.ratio
    threshold = args.threshold if args.threshold is not None else cfg.threshold
    root = Path(args.root) if args.root else run_dir / "corpus"
    seed = _resolve_seed(args)
    out = run_dir / "splits"
    _guard(out, args.force)
    out.mkdir(parents=True, exist_ok=True)
    manifest.data.update(config=dataclasses.asdict(cfg) | {"ratio": ratio, "threshold": threshold}, seed=seed)
    stats = {}
    for domain in ("upper", "lower"):
        d = _require(root / domain, "make-synthetic")
        manifest.input(domain, d)
        report = LoadReport()
        records = load_dataset(d, domain, cfg.resolution, report)
        splitter = DuplicateSafeSplitter(ratio, threshold, random_state=seed).fit(records)
        split = splitter.manifest_
        split.domain, split.root = domain, str(d)
        split.save(manifest.output(out / f"{domain}.json"))
        report.save(manifest.output(out / f"load_report_{domain}.json"))
        comps = [len(c) for c in _components(splitter.graph_)]
        stats[domain] = {
            "n_records": len(records),
            "n_skipped": len(report.skipped),
            "n_train": len(split.train_ids),
            "n_test": len(split.test_ids),
            "realized_ratio": split.realized_ratio,
            "n_components": len(comps),
            "largest_component": max(comps),
            "n_duplicate_edges": splitter.graph_.number_of_edges(),
        }
    (out / "stats.json").write_text(json.dumps({"ratio": ratio, "threshold": threshold, "seed": seed,
                                                 "domains": stats}, indent=2) + "\n")
    manifest.output(out / "stats.json")
    for domain, s in stats.items():
        print(f"{domain}: {s['n_train']} train / {s['n_test']} test "
              f"(realized {s['realized_ratio']:.3f}, {s['n_duplicate_edges']} duplicate edges)")


def _components(graph):
    import networkx as nx

    return list(nx.connected_components(graph))


def cmd_pretrain_gan(args, run_dir, manifest):
    from .backbone import StyleGANBackbone

    cfg = load_config(args.config, BackboneConfig)
    seed = _resolve_seed(args)
    domains = ("upper", "lower") if args.domain == "both" else (args.domain,)
    manifest.data.update(config=dataclasses.asdict(cfg), seed=seed)
    for domain in domains:
        out = _guard(run_dir / "backbone" / f"{domain}.pt", args.force)
        train, _ = _load_split(run_dir, domain, cfg.resolution)
        manifest.input(f"split_{domain}", run_dir / "splits" / f"{domain}.json")
        params = dataclasses.asdict(cfg)
        est = StyleGANBackbone(**params, random_state=seed, verbose=args.verbose)
        logger.info("pretraining %s backbone on %d images for %d steps", domain, len(train), cfg.n_steps)
        est.fit(_pixels(train))
        est.domain_ = domain
        est.save(manifest.output(out))
        print(f"saved {domain} backbone to {out}")


def cmd_train_dst(args, run_dir, manifest):
    from .st_discriminator import StyleTextureDiscriminator

    cfg = load_config(args.config, DstConfig)
    seed = _resolve_seed(args)
    out_dir = run_dir / "dst"
    _guard(out_dir / "dst.pt", args.force)
    manifest.data.update(config=dataclasses.asdict(cfg), seed=seed)
    train, held_out = [], []
    for domain in ("upper", "lower"):
        tr, te = _load_split(run_dir, domain, cfg.resolution)
        manifest.input(f"split_{domain}", run_dir / "splits" / f"{domain}.json")
        train += tr
        held_out += te
    X, X_te = _pixels(train), _pixels(held_out)
    est = StyleTextureDiscriminator(**cfg.estimator_params(), random_state=seed, verbose=args.verbose)
    baseline = StyleTextureDiscriminator(**cfg.estimator_params(), random_state=seed).initialize()
    est.fit(X)
    # retrieval on 64 held-out images, KL on the whole held-out set
    probe = X_te[np.random.default_rng(seed).permutation(len(X_te))[:64]]
    efficacy = {
        "n_train": len(X),
        "n_held_out": len(X_te),
        "style_kl_init": baseline.style_kl(X_te),
        "style_kl_trained": est.style_kl(X_te),
        "retrieval_init": baseline.sibling_retrieval_accuracy(probe, seed),
        "retrieval_trained": est.sibling_retrieval_accuracy(probe, seed),
        "retrieval_chance": 1.0 / (2 * len(probe) - 1),
    }
    efficacy["style_kl_ratio"] = efficacy["style_kl_trained"] / efficacy["style_kl_init"]
    est.save(manifest.output(out_dir / "dst.pt"))
    est.save_curve(manifest.output(out_dir / "curve.csv"))
    (out_dir / "efficacy.json").write_text(json.dumps(efficacy, indent=2) + "\n")
    manifest.output(out_dir / "efficacy.json")
    print(f"D_ST: held-out style KL {efficacy['style_kl_init']:.4f} -> {efficacy['style_kl_trained']:.4f}, "
          f"sibling retrieval {efficacy['retrieval_trained']:.3f} (chance {efficacy['retrieval_chance']:.4f})")


def _load_frozen(run_dir, config, manifest):
    from .backbone import StyleGANBackbone
    from .st_discriminator import StyleTextureDiscriminator

    bb_path = _require(run_dir / "backbone" / f"{config.target_domain}.pt", "pretrain-gan")
    dst_path = _require(run_dir / "dst" / "dst.pt", "train-dst")
    manifest.input("backbone", bb_path)
    manifest.input("dst", dst_path)
    return StyleGANBackbone.load(bb_path), StyleTextureDiscriminator.load(dst_path), bb_path, dst_path


def cmd_train(args, run_dir, manifest):
    from .evaluation import summary_table
    from .translation import STNetTranslator

    cfg = load_config(args.config, TrainConfig)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.steps = args.steps
    if args.ablate_L_ST:
        cfg.ablate_L_ST = True
    if args.ablate_dual:
        cfg.ablate_dual = True
    manifest.data.update(config=dataclasses.asdict(cfg), seed=cfg.seed)
    manifest.name = f"train_{train_tag(cfg)}"
    out = run_dir / "train" / train_tag(cfg)
    backbone, dst, bb_path, dst_path = _load_frozen(run_dir, cfg, manifest)
    src_train, src_test = _load_split(run_dir, cfg.source_domain, backbone.resolution)
    _, tgt_test = _load_split(run_dir, cfg.target_domain, backbone.resolution)
    resume = None
    if args.resume:
        ckpts = sorted((out / "checkpoints").glob("step_*.pt"))
        if not ckpts:
            raise MissingStageError("train", out / "checkpoints")
        resume = ckpts[-1]
    else:
        _guard(out, args.force)
        if out.exists():
            import shutil

            shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_flat_config(cfg))
    X = _pixels(src_train)
    ids = [r.id for r in src_train]
    eval_sets = (_pixels(src_test), _pixels(tgt_test))
    if resume is not None:
        manifest.input("resume_from", resume)
        est = STNetTranslator.load_checkpoint(resume, backbone, dst, steps=cfg.steps, warm_start=True,
                                              verbose=args.verbose)
        est.reports_ = []
    else:
        est = STNetTranslator.from_config(cfg, backbone, dst, verbose=args.verbose)
    est.fit(X, ids=ids, run_dir=out, eval_sets=eval_sets, backbone_ref=bb_path, dst_ref=dst_path)
    est.save_checkpoint(manifest.output(out / "final.pt"))
    for p in ("config.txt", "loss_log.csv", "checkpoints", "samples", "metrics"):
        manifest.output(out / p)
    (out / "summary.txt").write_text(summary_table(est.reports_))
    manifest.output(out / "summary.txt")
    last = est.log_[-1]
    print(f"{est.variant_} {cfg.direction}: {cfg.steps} steps, final total={last['total']:.4f} "
          f"L_ST={last['L_ST']:.4f}; checkpoint {out / 'final.pt'}")
    if est.reports_:
        print(summary_table(est.reports_), end="")


def _load_translator(args, run_dir, cfg, manifest):
    from .translation import STNetTranslator

    ckpt = Path(args.checkpoint) if args.checkpoint else _final_checkpoint(run_dir, cfg)
    _require(ckpt, "train")
    manifest.input("checkpoint", ckpt)
    return STNetTranslator.load_checkpoint(ckpt), ckpt


def _read_inputs(paths, resolution):
    from .dataio import load_dataset, load_image

    records = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            records += [(r.id, r.pixels) for r in load_dataset(p, "", resolution)]
        elif p.is_file():
            records.append((p.stem, load_image(p, resolution)))
        else:
            raise FileNotFoundError(f"input image not found: {p}")
    return records


def _eval_config(args):
    cfg = load_config(args.config, EvalConfig)
    if args.ablate_L_ST:
        cfg.ablate_L_ST = True
    if args.ablate_dual:
        cfg.ablate_dual = True
    if getattr(args, "direction", None):
        cfg.direction = args.direction
    return cfg, TrainConfig(direction=cfg.direction, ablate_L_ST=cfg.ablate_L_ST, ablate_dual=cfg.ablate_dual)


def cmd_synthesize(args, run_dir, manifest):
    from .dataio import save_image, tile_pairs

    cfg, tcfg = _eval_config(args)
    manifest.data.update(config=dataclasses.asdict(cfg), seed=_resolve_seed(args))
    translator, ckpt = _load_translator(args, run_dir, tcfg, manifest)
    manifest.name = f"synthesize_{train_tag(translator.config)}"
    res = translator.backbone.resolution
    if args.inputs:
        items = _read_inputs(args.inputs, res)
    else:
        _, test = _load_split(run_dir, translator.config.source_domain, res)
        items = [(r.id, r.pixels) for r in test[:cfg.n_grid]]
    if not items:
        raise ValueError("no input images to synthesize from")
    out = Path(args.out) if args.out else run_dir / "synth" / train_tag(translator.config)
    _guard(out, args.force)
    out.mkdir(parents=True, exist_ok=True)
    X = np.stack([p for _, p in items])
    Y = translator.transform(X)
    for (name, _), y in zip(items, Y):
        save_image(manifest.output(out / f"{name}_out.png"), y)
    save_image(manifest.output(out / "grid.png"), tile_pairs(X, Y))
    print(f"wrote {len(Y)} outputs and grid.png to {out}")


def cmd_evaluate(args, run_dir, manifest):
    from .evaluation import DstEmbedder, MetricReport, PixelPCAEmbedder, evaluate, summary_table

    cfg, tcfg = _eval_config(args)
    manifest.data.update(config=dataclasses.asdict(cfg), seed=_resolve_seed(args))
    translator, ckpt = _load_translator(args, run_dir, tcfg, manifest)
    tcfg = translator.config
    manifest.name = f"evaluate_{train_tag(tcfg)}"
    res = translator.backbone.resolution
    if args.manifest:
        from .dataio import SplitManifest, load_dataset

        m = SplitManifest.load(_require(args.manifest, "prepare-data"))
        recs = {r.id: r for r in load_dataset(m.root, m.domain, res)}
        src_test = [recs[i] for i in m.test_ids]
    else:
        _, src_test = _load_split(run_dir, tcfg.source_domain, res)
    _, tgt_test = _load_split(run_dir, tcfg.target_domain, res)
    manifest.input("source_split", args.manifest or run_dir / "splits" / f"{tcfg.source_domain}.json")
    manifest.input("target_split", run_dir / "splits" / f"{tcfg.target_domain}.json")
    X_src, X_tgt = _pixels(src_test), _pixels(tgt_test)
    if cfg.embedder == "dst_features":
        embedder = DstEmbedder(translator.dst)
    elif cfg.embedder == "pixel_pca":
        embedder = PixelPCAEmbedder().fit(X_tgt)
    else:
        raise ConfigError(f"unknown embedder {cfg.embedder!r}; expected dst_features or pixel_pca")
    report = evaluate(translator, X_src, X_tgt, embedder=embedder, step=translator.step_,
                      config_ref=str(ckpt), direction=tcfg.direction, variant=translator.variant_)
    suffix = "" if cfg.embedder == "dst_features" else f"_{cfg.embedder}"
    out = run_dir / "eval" / f"{train_tag(tcfg)}{suffix}.json"
    _guard(out, args.force)
    report.save(manifest.output(out))
    reports = [MetricReport.load(p) for p in sorted((run_dir / "eval").glob("*.json"))]
    table = summary_table(reports)
    (run_dir / "eval" / "summary.txt").write_text(table)
    manifest.output(run_dir / "eval" / "summary.txt")
    print(f"{report.variant} {report.direction}: fid={report.fid:.4f} ({report.embedder}), "
          f"compat_proxy={report.compat_proxy_mean:.4f} over {report.n_eval} images")
    print(table, end="")


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "prepare-data": cmd_prepare_data,
    "pretrain-gan": cmd_pretrain_gan,
    "train-dst": cmd_train_dst,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
}


# argument parsing ----------------------------------------------------------------

def _global_options(parser, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=default(None), help="single seed for all randomness")
    parser.add_argument("--force", action="store_true", default=default(False), help="overwrite existing outputs")
    parser.add_argument("--run-dir", default=default(None),
                        help=f"run directory (default: ${RUN_ROOT_ENV}/default, or ./runs/default)")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))


def build_parser():
    parser = argparse.ArgumentParser(prog="stnet", description="Unpaired compatible-item synthesis pipeline.")
    parser.add_argument("--version", action="version", version=f"stnet {__version__}")
    _global_options(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    common.add_argument("--config", help="flat 'key = value' config file for this stage")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", parents=[common], help="write the synthetic two-domain corpus")
    p.add_argument("--out", help="output directory (default: <run-dir>/corpus)")
    p.add_argument("--n", type=int, help="items per domain (>= 16)")
    p.add_argument("--resolution", type=int)

    p = sub.add_parser("prepare-data", parents=[common], help="duplicate-safe train/test split")
    p.add_argument("--root", help="corpus root holding upper/ and lower/ (default: <run-dir>/corpus)")
    p.add_argument("--ratio", type=float)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("pretrain-gan", parents=[common], help="pretrain per-domain backbones")
    p.add_argument("--domain", choices=("upper", "lower", "both"), default="both")

    sub.add_parser("train-dst", parents=[common], help="train the style/texture discriminator")

    p = sub.add_parser("train", parents=[common], help="train the encoder for one direction")
    p.add_argument("--steps", type=int)
    p.add_argument("--ablate-L-ST", dest="ablate_L_ST", action="store_true")
    p.add_argument("--ablate-dual", dest="ablate_dual", action="store_true")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")

    for name, helptext in (("synthesize", "translate images with a trained encoder"),
                           ("evaluate", "FID and compatibility proxy on the test split")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", help="translator checkpoint (default: final.pt of the configured run)")
        p.add_argument("--direction")
        p.add_argument("--ablate-L-ST", dest="ablate_L_ST", action="store_true")
        p.add_argument("--ablate-dual", dest="ablate_dual", action="store_true")
        if name == "synthesize":
            p.add_argument("inputs", nargs="*", help="image files or directories (default: source test split)")
            p.add_argument("--out", help="output directory")
        else:
            p.add_argument("--manifest", help="source-domain split manifest (default: <run-dir>/splits)")
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run_dir = Path(args.run_dir) if args.run_dir else default_run_dir()
    manifest = RunManifest(run_dir, args.command, getattr(args, "config", None), args.seed, argv)
    try:
        COMMANDS[args.command](args, run_dir, manifest)
    except ConfigError as exc:
        return _fail(manifest, EXIT_CONFIG, f"config error: {exc}")
    except MissingStageError as exc:
        return _fail(manifest, EXIT_MISSING, f"missing dependency: {exc}")
    except ImportError as exc:
        return _fail(manifest, EXIT_MISSING, f"missing dependency: {exc}")
    except NumericalAbort as exc:
        dump = f" (dump: {exc.dump_path})" if exc.dump_path else ""
        return _fail(manifest, EXIT_NUMERICAL, f"numerical abort: {exc}{dump}")
    except OverwriteRefused as exc:
        return _fail(manifest, EXIT_CONFIG, str(exc))
    except (SplitError, ValueError, FileNotFoundError) as exc:
        return _fail(manifest, EXIT_FAILED, f"error: {exc}")
    missing = [p for p in manifest.data["outputs"] if not Path(p).exists()]
    if missing:
        return _fail(manifest, EXIT_FAILED, f"stage finished but outputs are missing: {missing}")
    manifest.finish(EXIT_OK)
    return EXIT_OK


def _fail(manifest, code, message):
    print(f"stnet {manifest.data['stage']}: {message}", file=sys.stderr)
    try:
        manifest.finish(code, message)
    except OSError:
        pass
    return code


def entry_point():
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
