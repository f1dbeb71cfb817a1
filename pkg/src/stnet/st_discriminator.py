"""Style- and texture-guided discriminator.

A small residual network produces a global style feature. Two MLP heads sit
on top of it during self-supervised training: a style head that regresses the
RGB colour histogram of the full image, and a texture head trained with
instance discrimination over random patch pairs. Once trained the network is
frozen and its feature cosine distance becomes the compatibility loss.
"""
import csv
import logging
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import (
    batched,
    check_images,
    check_random_state,
    parameter_checksum,
    to_nchw,
)
from .dataio import color_histograms, random_patch_pairs, smooth_histogram
from .exceptions import DegenerateFeatureError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DEGENERATE_NORM = 1e-12


# losses ------------------------------------------------------------------

def _as_tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def kl_divergence(p, q):
    """Row-wise ``sum_k p_k log(p_k / q_k)`` over the last axis (``0 log 0 = 0``)."""
    return (torch.xlogy(p, p) - torch.xlogy(p, q)).sum(dim=-1)


def style_loss(pred, gt, direction="pred_gt"):
    """Sum over RGB channels of KL(pred || gt), averaged over the batch.

    ``pred`` and ``gt`` are ``(3, L)`` or ``(n, 3, L)`` probability arrays.
    ``gt`` is expected to be smoothed already so no bin is empty.
    ``direction="gt_pred"`` evaluates KL(gt || pred) instead.
    """
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    if pred.shape[-1] != gt.shape[-1]:
        raise ValueError(f"bin count mismatch: prediction has {pred.shape[-1]}, target {gt.shape[-1]}")
    if pred.shape != gt.shape or pred.shape[-2] != 3:
        raise ValueError(f"expected matching (..., 3, L) shapes, got {tuple(pred.shape)} and {tuple(gt.shape)}")
    gt = gt.to(pred.dtype)
    if direction == "pred_gt":
        kl = kl_divergence(pred, gt)
    elif direction == "gt_pred":
        kl = kl_divergence(gt, pred)
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    return kl.sum(dim=-1).mean()


def texture_loss(embeddings):
    """Instance-discrimination loss over ``2n`` patch embeddings.

    Rows ``2i`` and ``2i + 1`` (zero-based) come from the same image. Only the
    even rows act as anchors, and the softmax denominator runs over all
    ``2n`` rows including the anchor itself. No temperature is applied.
    """
    u = _as_tensor(embeddings)
    if u.ndim != 2 or u.shape[0] == 0 or u.shape[0] % 2:
        raise ValueError(f"need an even, non-zero number of embeddings, got shape {tuple(u.shape)}")
    anchors = u[0::2]
    logits = anchors @ u.t()                                   # (n, 2n)
    positives = torch.arange(1, u.shape[0], 2)
    return F.cross_entropy(logits, positives)


def dst_training_loss(style, texture, lambda_sty=1.0, lambda_tex=2.2):
    if lambda_sty < 0 or lambda_tex < 0:
        raise ValueError("loss weights must be non-negative")
    return lambda_sty * style + lambda_tex * texture


def cosine_distance(fx, fy):
    """``1 - cos(fx, fy)`` row-wise; raises on features with zero norm."""
    fx, fy = _as_tensor(fx), _as_tensor(fy)
    nx_, ny_ = fx.norm(dim=-1), fy.norm(dim=-1)
    if bool((nx_ < DEGENERATE_NORM).any()) or bool((ny_ < DEGENERATE_NORM).any()):
        raise DegenerateFeatureError("degenerate feature: norm below 1e-12")
    return 1.0 - (fx * fy).sum(dim=-1) / (nx_ * ny_)


# network -----------------------------------------------------------------

def _norm(kind, ch):
    if kind == "group":
        return nn.GroupNorm(8, ch)
    if kind == "batch":
        return nn.BatchNorm2d(ch)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride, norm="none"):
        super().__init__()
        bias = norm == "none"
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=bias)
        self.norm1 = _norm(norm, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=bias)
        self.norm2 = _norm(norm, out_ch)
        self.shortcut = nn.Identity()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _norm(norm, out_ch))

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(y + self.shortcut(x))


def mlp(in_dim, hidden, out_dim):
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))


class DstNetwork(nn.Module):
    """Residual backbone (three strided stages) plus style and texture heads."""

    def __init__(self, n_bins=10, feature_dim=256, texture_dim=128, hidden_dim=256,
                 widths=(32, 64, 128), norm="none"):
        super().__init__()
        self.n_bins = n_bins
        self.stem = nn.Sequential(nn.Conv2d(3, widths[0], 3, padding=1, bias=norm == "none"),
                                  _norm(norm, widths[0]), nn.ReLU())
        stages, in_ch = [], widths[0]
        for w in widths:
            stages.append(BasicBlock(in_ch, w, stride=2, norm=norm))
            in_ch = w
        self.stages = nn.Sequential(*stages)
        self.project = nn.Linear(in_ch, feature_dim)
        self.f_sty = mlp(feature_dim, hidden_dim, 3 * n_bins)
        self.f_tex = mlp(feature_dim, hidden_dim, texture_dim)

    def features(self, x):
        h = self.stages(self.stem(x * 2.0 - 1.0))
        return self.project(h.mean(dim=(2, 3)))

    def style_probs(self, feat):
        return F.softmax(self.f_sty(feat).view(-1, 3, self.n_bins), dim=-1)

    def texture_embedding(self, feat):
        return F.normalize(self.f_tex(feat), dim=-1)


def _set_requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


class StyleTextureDiscriminator(TransformerMixin, BaseEstimator):
    """Self-supervised style/texture feature extractor.

    ``fit`` trains on images from both domains; ``transform`` returns the
    ``feature_dim``-dimensional style features.
    """

    def __init__(self, resolution=32, n_bins=10, feature_dim=256, texture_dim=128,
                 hidden_dim=256, widths=(16, 32, 64), norm="batch", patch_size=None,
                 lambda_sty=1.0, lambda_tex=2.2, n_steps=2000, batch_size=32,
                 learning_rate=2e-4, beta1=0.0, beta2=0.99, kl_direction="pred_gt",
                 hist_eps=1e-4, random_state=0, verbose=False):
        self.resolution = resolution
        self.n_bins = n_bins
        self.feature_dim = feature_dim
        self.texture_dim = texture_dim
        self.hidden_dim = hidden_dim
        self.widths = widths
        self.norm = norm
        self.patch_size = patch_size
        self.lambda_sty = lambda_sty
        self.lambda_tex = lambda_tex
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.kl_direction = kl_direction
        self.hist_eps = hist_eps
        self.random_state = random_state
        self.verbose = verbose

    @property
    def patch_size_(self):
        if self.patch_size is not None:
            return self.patch_size
        return self.resolution // 2 if self.resolution <= 64 else self.resolution // 4

    def _build(self):
        torch.manual_seed(int(check_random_state(self.random_state).integers(2 ** 31)))
        self.network_ = DstNetwork(self.n_bins, self.feature_dim, self.texture_dim,
                                   self.hidden_dim, self.widths, self.norm)
        self.network_.eval()
        self.frozen_ = False
        self.curve_ = []

    def initialize(self):
        """Random, untrained network (useful as a baseline)."""
        self._build()
        self.n_features_in_ = 3
        return self

    def fit(self, X, y=None, X_val=None):
        if len(X) == 0:
            raise ValueError("cannot train the style/texture discriminator on an empty dataset")
        X = check_images(X, self.resolution)
        self._build()
        net = self.network_
        rng = check_random_state(self.random_state)
        # skip the draw used for weight init so batches differ from it
        rng.integers(2 ** 31)
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate,
                               betas=(self.beta1, self.beta2))
        hist = torch.from_numpy(smooth_histogram(color_histograms(X, self.n_bins), self.hist_eps))
        n = len(X)
        bs = min(self.batch_size, n)
        P = self.patch_size_
        order, pos = rng.permutation(n), 0
        t0 = time.time()
        net.train()
        for step in range(self.n_steps):
            if pos + bs > n:
                order, pos = rng.permutation(n), 0
            idx = order[pos:pos + bs]
            pos += bs
            batch = X[idx]
            patches = random_patch_pairs(batch, P, rng)
            feats = net.features(to_nchw(batch))
            patch_feats = net.features(to_nchw(patches))
            l_sty = style_loss(net.style_probs(feats), hist[idx], self.kl_direction)
            l_tex = texture_loss(net.texture_embedding(patch_feats))
            loss = dst_training_loss(l_sty, l_tex, self.lambda_sty, self.lambda_tex)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            self.curve_.append({"step": step, "style_loss": float(l_sty.detach()),
                                "texture_loss": float(l_tex.detach()), "total": float(loss.detach())})
            if self.verbose and (step % 100 == 0 or step == self.n_steps - 1):
                logger.info("dst step %d style=%.4f texture=%.4f (%.1fs)", step,
                            float(l_sty.detach()), float(l_tex.detach()), time.time() - t0)
        net.eval()
        self.n_features_in_ = 3
        return self.freeze()

    def freeze(self):
        check_is_fitted(self, "network_")
        _set_requires_grad(self.network_, False)
        self.network_.eval()
        self.frozen_ = True
        return self

    def checksum(self):
        return parameter_checksum(self.network_)

    # inference -------------------------------------------------------

    def features_tensor(self, x_nchw):
        """Differentiable features of an NCHW tensor at the model resolution."""
        if x_nchw.shape[-1] != self.resolution or x_nchw.shape[-2] != self.resolution:
            raise ValueError(f"expected {self.resolution}x{self.resolution} images, got {tuple(x_nchw.shape[-2:])}")
        return self.network_.features(x_nchw.to(next(self.network_.parameters()).dtype))

    def transform(self, X, batch_size=256):
        """Style features ``(n, feature_dim)`` of images at the model resolution."""
        check_is_fitted(self, "network_")
        X = check_images(X, self.resolution)
        out = []
        with torch.no_grad():
            for sl in batched(len(X), batch_size):
                out.append(self.network_.features(to_nchw(X[sl])).numpy())
        return np.concatenate(out) if out else np.zeros((0, self.feature_dim), np.float32)

    extract_features = transform

    def predict_histogram(self, X):
        """Style-head histogram predictions ``(n, 3, n_bins)``."""
        check_is_fitted(self, "network_")
        X = check_images(X, self.resolution)
        with torch.no_grad():
            return self.network_.style_probs(self.network_.features(to_nchw(X))).numpy()

    def embed_texture(self, patches):
        """Unit-norm texture embeddings for patches of any (square) size."""
        check_is_fitted(self, "network_")
        patches = check_images(patches)
        with torch.no_grad():
            return self.network_.texture_embedding(self.network_.features(to_nchw(patches))).numpy()

    def style_distance(self, x, y):
        """``1 - cos`` between the style features of ``x`` and ``y`` (row-wise)."""
        fx = torch.from_numpy(self.transform(x)).double()
        fy = torch.from_numpy(self.transform(y)).double()
        d = cosine_distance(fx, fy).numpy()
        return float(d[0]) if d.shape == (1,) else d

    def style_kl(self, X):
        """Mean per-channel KL of the style head against smoothed histograms."""
        X = check_images(X, self.resolution)
        pred = torch.from_numpy(self.predict_histogram(X)).double()
        gt = torch.from_numpy(smooth_histogram(color_histograms(X, self.n_bins), self.hist_eps))
        return float(style_loss(pred, gt, self.kl_direction)) / 3.0

    def sibling_retrieval_accuracy(self, X, rng=0):
        """Fraction of patches whose nearest other patch is their sibling crop."""
        X = check_images(X, self.resolution)
        patches = random_patch_pairs(X, self.patch_size_, check_random_state(rng))
        u = self.embed_texture(patches)
        sim = u @ u.T
        np.fill_diagonal(sim, -np.inf)
        sibling = np.arange(len(u)) ^ 1
        return float(np.mean(sim.argmax(axis=1) == sibling))

    # persistence -----------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "network_")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"kind": "dst", "version": CHECKPOINT_VERSION, "params": self.get_params(),
                    "network": self.network_.state_dict(), "curve": self.curve_}, path)
        return path

    def save_curve(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "style_loss", "texture_loss", "total"])
            writer.writeheader()
            writer.writerows(self.curve_)
        return path

    @classmethod
    def load(cls, path):
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        if ckpt.get("kind") != "dst":
            raise ValueError(f"{path} is not a style/texture discriminator checkpoint")
        if ckpt.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {ckpt.get('version')}")
        est = cls(**ckpt["params"])
        est._build()
        est.network_.load_state_dict(ckpt["network"])
        est.curve_ = ckpt.get("curve", [])
        est.n_features_in_ = 3
        return est.freeze()
