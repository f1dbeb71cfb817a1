"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed
in the terminal summary.

Criteria 6, 7 and 9 share one end-to-end CLI run on the synthetic corpus (the
``pipeline`` fixture). Set ``STNET_ACCEPTANCE_DIR`` to keep that run directory
and reuse completed stages across invocations.
"""
import json
import math
import os
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
import torch

from stnet.cli import main
from stnet.dataio import (
    DuplicateSafeSplitter,
    ImageRecord,
    compute_color_histogram,
    load_dataset,
    stack_pixels,
)
from stnet.dual import critic_loss, encoder_adversarial_terms
from stnet.evaluation import FeatureCloud, PixelPCAEmbedder, frechet_distance, frechet_distance_features
from stnet.st_discriminator import StyleTextureDiscriminator, style_loss, texture_loss
from stnet.synthetic import make_corpus
from stnet.translation import total_loss
from test_dataio import oracle_histogram
from test_losses import (
    FeatureStub,
    fd_check,
    oracle_cosine_distance,
    oracle_critic,
    oracle_encoder_adv,
    oracle_style,
    oracle_texture,
    random_simplex,
    scores,
    unit_rows,
)

# pipeline settings: library defaults except for the translator step budget
N_PER_DOMAIN = 512
TRAIN_STEPS = int(os.environ.get("STNET_ACCEPTANCE_STEPS", 600))
TREND_SEEDS = (0, 1, 2)


def detail(record_property, text):
    record_property("detail", text)


# 1-5: self-contained -------------------------------------------------------

@pytest.mark.acceptance(1, "loss oracle suite")
def test_loss_oracles(record_property):
    t0 = time.time()
    r = np.random.default_rng(100)
    n = 0
    for _ in range(100):
        L = int(r.integers(2, 12))
        p, h = random_simplex(r, (3, L)), random_simplex(r, (3, L))
        assert abs(float(style_loss(p, h)) - oracle_style(p, h)) < 1e-8

        k, d = int(r.integers(1, 9)), int(r.integers(2, 10))
        u = unit_rows(r, 2 * k, d)
        assert abs(float(texture_loss(u)) - oracle_texture(u.tolist())) < 1e-8

        s = [scores(r, int(r.integers(1, 10))) for _ in range(4)]
        assert abs(float(critic_loss(*s)) - oracle_critic(*s)) < 1e-8

        a, b = scores(r, 6), scores(r, 6)
        assert abs(float(encoder_adversarial_terms(a, b)) - oracle_encoder_adv(a, b)) < 1e-8

        m = int(r.integers(1, 5))
        x, y = r.random((m, 4, 4, 3)), r.random((m, 4, 4, 3))
        s1, s2, lam = scores(r, m), scores(r, m), float(r.uniform(0, 3))
        fx, fy = x.mean(axis=(1, 2)) + [1, 0, 0], y.mean(axis=(1, 2)) + [1, 0, 0]
        expected = lam * sum(oracle_cosine_distance(*pair) for pair in zip(fx, fy)) / m + oracle_encoder_adv(s1, s2)
        assert abs(float(total_loss(FeatureStub(), x, y, s1, s2, lam)) - expected) < 1e-8
        n += 1

    two = np.tile(unit_rows(r, 1, 6), (2, 1))
    assert abs(float(texture_loss(two)) - math.log(2)) < 1e-6
    p = np.full((3, 2), 0.5)
    h = np.tile([0.25, 0.75], (3, 1))
    assert abs(float(style_loss(p, h)) - 0.43152) < 1e-5
    assert abs(float(style_loss(p, h)) - 3 * (0.5 * math.log(2) + 0.5 * math.log(2 / 3))) < 1e-6
    half = np.full(8, 0.5)
    assert abs(float(critic_loss(half, half, half, half)) - 4 * math.log(2)) < 1e-6
    elapsed = time.time() - t0
    detail(record_property, f"{n} random instances x 5 losses, closed forms ok, {elapsed:.1f}s")
    assert elapsed < 60


@pytest.mark.acceptance(2, "gradient checks")
def test_gradient_checks(record_property):
    t0 = time.time()
    r = np.random.default_rng(200)
    stub = FeatureStub()
    for _ in range(20):
        L = int(r.integers(2, 6))
        h = torch.as_tensor(random_simplex(r, (3, L)))
        fd_check(lambda q: style_loss(q, h), random_simplex(r, (3, L)))
        fd_check(texture_loss, unit_rows(r, 2 * int(r.integers(1, 4)), 4))
        s = [torch.as_tensor(scores(r, 3)) for _ in range(4)]
        for i in range(4):
            fd_check(lambda v, i=i: critic_loss(*(s[:i] + [v] + s[i + 1:])), s[i])
        fd_check(lambda v: encoder_adversarial_terms(v, s[1]), s[0])
        fd_check(lambda v: encoder_adversarial_terms(s[0], v), s[1])
        x = torch.as_tensor(r.random((2, 3, 4, 4)))
        fd_check(lambda y: total_loss(stub, x, y, s[0][:2], s[1][:2], 1.0), r.random((2, 3, 4, 4)))
    elapsed = time.time() - t0
    detail(record_property, f"20 instances per loss, rel. error < 1e-3, {elapsed:.1f}s")
    assert elapsed < 120


@pytest.mark.acceptance(3, "histogram correctness")
def test_histogram_oracle(record_property):
    t0 = time.time()
    r = np.random.default_rng(300)
    for t in range(100):
        img = r.random((8, 8, 3)).astype(np.float32)
        img[t % 8, (t // 3) % 8] = 1.0
        img[(t + 3) % 8, t % 8, t % 3] = np.float32((t % 11) / 10)
        np.testing.assert_array_equal(compute_color_histogram(img, 10), oracle_histogram(img, 10))
    ones = compute_color_histogram(np.ones((8, 8, 3)), 10)
    assert np.all(ones[:, -1] == 1.0)
    elapsed = time.time() - t0
    detail(record_property, f"100 images exact, 1.0 -> last bin, {elapsed:.2f}s")
    assert elapsed < 10


@pytest.mark.acceptance(4, "split leakage")
def test_split_leakage(record_property):
    t0 = time.time()
    upper, _, _, _ = make_corpus(200, 32, seed=400)
    r = np.random.default_rng(400)
    records = [ImageRecord(k, "upper", v) for k, v in upper.items()]
    planted = []
    for i, rec in enumerate(r.choice(len(records), 20, replace=False)):
        src = records[rec]
        dup = np.clip(src.pixels + r.normal(0, 0.005, src.pixels.shape), 0, 1)
        records.append(ImageRecord(f"dup_{i:02d}", "upper", dup))
        planted.append((src.id, f"dup_{i:02d}"))
    splitter = DuplicateSafeSplitter(ratio=0.8, threshold=0.02, random_state=0).fit(records)
    m = splitter.manifest_
    train = set(m.train_ids)
    crossing = sum((a in train) != (b in train) for a, b in planted)
    graph_crossing = sum((a in train) != (b in train) for a, b in splitter.graph_.edges)
    assert all(splitter.graph_.has_edge(a, b) for a, b in planted)
    elapsed = time.time() - t0
    detail(record_property, f"{crossing} planted / {graph_crossing} graph pairs cross, "
                            f"realized ratio {m.realized_ratio:.3f}, {elapsed:.1f}s")
    assert crossing == 0 and graph_crossing == 0
    assert abs(m.realized_ratio - 0.8) <= 0.05
    assert elapsed < 60


@pytest.mark.acceptance(5, "Frechet distance")
def test_frechet(record_property):
    t0 = time.time()
    r = np.random.default_rng(500)
    F = r.normal(size=(2000, 16))
    self_fd = frechet_distance_features(F, F)
    m = np.array([0.8, -0.6, 0.4, 1.0])
    A = r.normal(0, 1.0, (50_000, 4))
    B = r.normal(0, 1.0, (50_000, 4)) + m
    sampled = frechet_distance_features(A, B)
    exact = frechet_distance(FeatureCloud.from_moments([0.0], [[1.0]]), FeatureCloud.from_moments([1.0], [[4.0]]))
    elapsed = time.time() - t0
    detail(record_property, f"self {self_fd:.2e}, sampled {sampled:.4f} vs {m @ m:.4f}, "
                            f"scalar {exact!r}, {elapsed:.1f}s")
    assert self_fd < 1e-3
    assert abs(sampled - m @ m) / (m @ m) < 0.02
    assert abs(exact - 2.0) < 1e-9
    assert elapsed < 60


# 6-9: the end-to-end pipeline ----------------------------------------------

def _stage_ok(run_dir, name):
    p = Path(run_dir) / "manifests" / f"{name}.json"
    return p.exists() and json.loads(p.read_text())["exit_status"] == 0


def _stage_seconds(run_dir, name):
    from datetime import datetime

    d = json.loads((Path(run_dir) / "manifests" / f"{name}.json").read_text())
    fmt = "%Y-%m-%dT%H:%M:%S%z"
    return (datetime.strptime(d["finished"], fmt) - datetime.strptime(d["started"], fmt)).total_seconds()


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    keep = os.environ.get("STNET_ACCEPTANCE_DIR")
    run_dir = Path(keep) if keep else tmp_path_factory.mktemp("acceptance") / "run"
    cfg_dir = run_dir.parent / f"{run_dir.name}_configs"
    cfg_dir.mkdir(parents=True, exist_ok=True)
    (cfg_dir / "data.cfg").write_text(f"n_per_domain = {N_PER_DOMAIN}\nresolution = 32\n")
    (cfg_dir / "train.cfg").write_text(f"direction = upper->lower\nsteps = {TRAIN_STEPS}\n"
                                       f"checkpoint_every = {TRAIN_STEPS}\n")
    stages = [
        ("make-synthetic", ["make-synthetic", "--config", cfg_dir / "data.cfg"]),
        ("prepare-data", ["prepare-data", "--config", cfg_dir / "data.cfg"]),
        ("pretrain-gan", ["pretrain-gan", "--domain", "lower"]),
        ("train-dst", ["train-dst"]),
        ("train_upper2lower_full", ["train", "--config", cfg_dir / "train.cfg"]),
        ("synthesize_upper2lower_full", ["synthesize"]),
        ("evaluate_upper2lower_full", ["evaluate"]),
    ]
    codes, seconds = {}, {}
    for name, argv in stages:
        if keep and _stage_ok(run_dir, name):
            codes[name] = 0
        else:
            codes[name] = main(["--run-dir", str(run_dir), "--seed", "0", "--force", *map(str, argv)])
            if codes[name] != 0:
                break
        seconds[name] = _stage_seconds(run_dir, name)
    return {"run_dir": run_dir, "codes": codes, "seconds": seconds, "cfg_dir": cfg_dir}


def _held_out(run_dir):
    from stnet.dataio import SplitManifest

    out = []
    for domain in ("upper", "lower"):
        m = SplitManifest.load(run_dir / "splits" / f"{domain}.json")
        recs = {r.id: r for r in load_dataset(m.root, domain)}
        out += [recs[i] for i in m.test_ids]
    return stack_pixels(out)


@pytest.mark.acceptance(6, "D_ST self-supervision efficacy")
def test_dst_efficacy(pipeline, record_property):
    run_dir = pipeline["run_dir"]
    assert pipeline["codes"].get("train-dst") == 0, "train-dst stage did not complete"
    trained = StyleTextureDiscriminator.load(run_dir / "dst" / "dst.pt")
    init = StyleTextureDiscriminator(**trained.get_params()).initialize()
    X = _held_out(run_dir)
    probe = X[np.random.default_rng(600).permutation(len(X))[:64]]
    acc = trained.sibling_retrieval_accuracy(probe, 600)
    kl0, kl1 = init.style_kl(X), trained.style_kl(X)
    minutes = pipeline["seconds"]["train-dst"] / 60
    detail(record_property, f"retrieval {acc:.3f} (chance {1 / 127:.4f}), held-out style KL "
                            f"{kl0:.4f} -> {kl1:.4f} ({kl1 / kl0:.1%}), train-dst {minutes:.1f} min")
    assert len(probe) == 64
    assert acc >= 0.60
    assert kl1 <= 0.5 * kl0
    assert minutes <= 15


def _trend_runs(run_dir, seed):
    """Train the full model and both ablations for one seed and evaluate them."""
    from stnet.backbone import StyleGANBackbone
    from stnet.cli import _load_split, _pixels
    from stnet.evaluation import evaluate
    from stnet.translation import STNetTranslator

    backbone = StyleGANBackbone.load(run_dir / "backbone" / "lower.pt")
    dst = StyleTextureDiscriminator.load(run_dir / "dst" / "dst.pt")
    src_train, src_test = _load_split(run_dir, "upper", 32)
    _, tgt_test = _load_split(run_dir, "lower", 32)
    X, S, T = _pixels(src_train), _pixels(src_test), _pixels(tgt_test)
    pca = PixelPCAEmbedder().fit(T)
    reports, minutes = {}, {}
    for name, flags in (("full", {}), ("no_lst", {"ablate_L_ST": True}), ("no_dual", {"ablate_dual": True})):
        t0 = time.time()
        tr = STNetTranslator(backbone, dst, steps=TRAIN_STEPS, seed=seed, checkpoint_every=0, **flags).fit(X)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            reports[name] = evaluate(tr, S, T)
            reports[name].extra["pixel_pca_fid"] = evaluate(tr, S, T, embedder=pca).fid
        minutes[name] = (time.time() - t0) / 60
    return reports, minutes


@pytest.mark.acceptance(7, "ablation trend reproduction")
def test_ablation_trends(pipeline, record_property):
    run_dir = pipeline["run_dir"]
    assert pipeline["codes"].get("train-dst") == 0 and pipeline["codes"].get("pretrain-gan") == 0
    wins_a = wins_b = 0
    lines, longest = [], 0.0
    for seed in TREND_SEEDS:
        reports, minutes = _trend_runs(run_dir, seed)
        full, no_lst, no_dual = reports["full"], reports["no_lst"], reports["no_dual"]
        a = full.compat_proxy_mean > no_lst.compat_proxy_mean
        b = full.fid <= no_dual.fid
        wins_a += a
        wins_b += b
        longest = max(longest, *minutes.values())
        lines.append(f"seed {seed}: proxy {full.compat_proxy_mean:.3f} vs w/o L_ST {no_lst.compat_proxy_mean:.3f} "
                     f"[{'ok' if a else 'x'}], FID {full.fid:.3f} vs w/o L_dual {no_dual.fid:.3f} "
                     f"[{'ok' if b else 'x'}] (pixel-PCA cross-check {full.extra['pixel_pca_fid']:.1f} "
                     f"vs {no_dual.extra['pixel_pca_fid']:.1f})")
    for line in lines:
        print(line)
    detail(record_property, f"(a) {wins_a}/3, (b) {wins_b}/3; " + "; ".join(lines))
    assert longest <= 30
    assert wins_a >= 2, "full ST-Net does not beat w/o L_ST on the compatibility proxy"
    assert wins_b >= 2, "full ST-Net does not match or beat w/o L_dual on desk-FID"


@pytest.mark.acceptance(8, "determinism and resume")
def test_determinism_and_resume(pipeline, record_property, tmp_path):
    from stnet.backbone import StyleGANBackbone
    from stnet.cli import _load_split, _pixels
    from stnet.translation import STNetTranslator

    run_dir = pipeline["run_dir"]
    assert pipeline["codes"].get("train-dst") == 0 and pipeline["codes"].get("pretrain-gan") == 0
    backbone = StyleGANBackbone.load(run_dir / "backbone" / "lower.pt")
    dst = StyleTextureDiscriminator.load(run_dir / "dst" / "dst.pt")
    X = _pixels(_load_split(run_dir, "upper", 32)[0])

    def fresh(steps):
        return STNetTranslator(backbone, dst, steps=steps, seed=8, checkpoint_every=0)

    a, b = fresh(50).fit(X), fresh(50).fit(X)
    same_seed = a.log_ == b.log_ and len(a.log_) == 50
    half = fresh(23).fit(X)
    ckpt = half.save_checkpoint(tmp_path / "half.pt")
    resumed = STNetTranslator.load_checkpoint(ckpt, backbone, dst, steps=50, warm_start=True).fit(X)
    resumed_same = resumed.log_ == a.log_ and resumed.encoder_checksum() == a.encoder_checksum()

    # the same through the CLI: interrupted run + --resume vs one uninterrupted run
    cli_dir = tmp_path / "cli"
    for sub in ("splits", "backbone", "dst", "corpus"):
        (cli_dir / sub).parent.mkdir(parents=True, exist_ok=True)
        os.symlink(run_dir / sub, cli_dir / sub)
    cfg = tmp_path / "t.cfg"
    cfg.write_text("steps = 30\ncheckpoint_every = 10\nseed = 8\n")
    assert main(["--run-dir", str(cli_dir), "train", "--config", str(cfg)]) == 0
    log_full = (cli_dir / "train" / "upper2lower_full" / "loss_log.csv").read_text()
    assert main(["--run-dir", str(cli_dir), "--force", "train", "--config", str(cfg), "--steps", "20"]) == 0
    assert main(["--run-dir", str(cli_dir), "train", "--config", str(cfg), "--resume"]) == 0
    log_resumed = (cli_dir / "train" / "upper2lower_full" / "loss_log.csv").read_text()
    cli_same = log_full == log_resumed
    detail(record_property, f"50-step logs identical: {same_seed}; API resume: {resumed_same}; CLI resume: {cli_same}")
    assert same_seed and resumed_same and cli_same


@pytest.mark.acceptance(9, "end-to-end pipeline smoke")
def test_end_to_end(pipeline, record_property):
    from stnet.evaluation import MetricReport

    run_dir = pipeline["run_dir"]
    codes = pipeline["codes"]
    total = sum(pipeline["seconds"].values()) / 60
    report_path = run_dir / "eval" / "upper2lower_full.json"
    report = MetricReport.load(report_path) if report_path.exists() else None
    n_outputs = len(list((run_dir / "synth" / "upper2lower_full").glob("*_out.png")))
    detail(record_property, f"exit codes {list(codes.values())}, {total:.1f} min total, "
                            + (f"FID {report.fid:.3f}, proxy {report.compat_proxy_mean:.3f}, n={report.n_eval}"
                               if report else "no report"))
    assert len(codes) == 7 and all(c == 0 for c in codes.values())
    assert report is not None and report.n_eval > 0 and math.isfinite(report.fid)
    assert report.variant == "ST-Net" and -1 <= report.compat_proxy_mean <= 1
    assert n_outputs > 0 and (run_dir / "synth" / "upper2lower_full" / "grid.png").exists()
    assert total < 60


def test_pretrained_backbone_beats_noise(pipeline):
    # not an acceptance criterion: samples from the 5k-step backbone should sit
    # closer to the training set than uniform noise under the desk embedder
    from stnet.backbone import StyleGANBackbone
    from stnet.cli import _load_split, _pixels
    from stnet.evaluation import DstEmbedder

    run_dir = pipeline["run_dir"]
    assert pipeline["codes"].get("train-dst") == 0 and pipeline["codes"].get("pretrain-gan") == 0
    backbone = StyleGANBackbone.load(run_dir / "backbone" / "lower.pt")
    emb = DstEmbedder(StyleTextureDiscriminator.load(run_dir / "dst" / "dst.pt")).fit()
    train = _pixels(_load_split(run_dir, "lower", 32)[0])
    r = np.random.default_rng(7)
    samples = backbone.sample(len(train), r)
    noise = r.random(train.shape).astype(np.float32)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ref = emb.transform(train)
        fid_samples = frechet_distance_features(emb.transform(samples), ref)
        fid_noise = frechet_distance_features(emb.transform(noise), ref)
    print(f"backbone samples {fid_samples:.2f} vs noise {fid_noise:.2f}")
    assert fid_samples < fid_noise
