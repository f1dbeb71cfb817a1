"""Fréchet distance on pluggable embedders and the D_ST compatibility proxy."""
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.decomposition import PCA
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images

logger = logging.getLogger(__name__)

PROXY_LABEL = "compat_proxy (D_ST cosine; stands in for FCTS)"


@dataclass
class FeatureCloud:
    features: np.ndarray
    mean: np.ndarray
    covariance: np.ndarray

    @classmethod
    def from_features(cls, features):
        F = np.asarray(features, dtype=np.float64)
        if F.ndim != 2 or len(F) < 2:
            raise ValueError(f"need an (n >= 2, d) feature matrix, got shape {F.shape}")
        n, d = F.shape
        if n < d + 1:
            warnings.warn(f"covariance from n={n} samples in d={d} dimensions is rank-deficient",
                          RuntimeWarning, stacklevel=2)
        cov = np.cov(F, rowvar=False).reshape(d, d)
        return cls(F, F.mean(axis=0), 0.5 * (cov + cov.T))

    @classmethod
    def from_moments(cls, mean, covariance):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(covariance, dtype=np.float64))
        return cls(np.zeros((0, len(mean))), mean, cov)

    @property
    def dim(self):
        return len(self.mean)


def _psd_sqrt(S):
    vals, vecs = np.linalg.eigh(S)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _regularize(S, eps):
    # only rank-deficient estimates get the ridge; well-conditioned ones stay exact
    if eps and np.linalg.eigvalsh(S).min() < eps:
        return S + eps * np.eye(len(S))
    return S


def frechet_distance(cloud_a, cloud_b, eps=1e-6):
    """Fréchet distance between Gaussian fits of two feature clouds.

    ``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``. The trace of the
    square root is computed as ``sum sqrt(eig(A^{1/2} S_b A^{1/2}))`` with
    ``A = S_a``, which stays in the symmetric PSD setting; negative
    eigenvalues from round-off are clipped at 0.
    """
    if cloud_a.dim != cloud_b.dim:
        raise ValueError(f"feature dimension mismatch: {cloud_a.dim} vs {cloud_b.dim}")
    Sa = _regularize(cloud_a.covariance, eps)
    Sb = _regularize(cloud_b.covariance, eps)
    diff = cloud_a.mean - cloud_b.mean
    root_a = _psd_sqrt(Sa)
    M = root_a @ Sb @ root_a
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh(0.5 * (M + M.T)), 0.0, None)).sum()
    fd = float(diff @ diff + np.trace(Sa) + np.trace(Sb) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


def frechet_distance_features(Fa, Fb, eps=1e-6):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return frechet_distance(FeatureCloud.from_features(Fa), FeatureCloud.from_features(Fb), eps)


class DstEmbedder(TransformerMixin, BaseEstimator):
    """Frozen style/texture discriminator features as the FID embedding."""

    def __init__(self, dst=None):
        self.dst = dst

    def fit(self, X=None, y=None):
        check_is_fitted(self.dst, "network_")
        return self

    def transform(self, X):
        return self.dst.transform(X)

    @property
    def name(self):
        return "dst_features"


class PixelPCAEmbedder(TransformerMixin, BaseEstimator):
    """Raw pixels projected on principal components of a reference set."""

    def __init__(self, n_components=32, random_state=0):
        self.n_components = n_components
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_images(X)
        k = min(self.n_components, len(X) - 1, X[0].size)
        self.pca_ = PCA(n_components=k, random_state=self.random_state).fit(X.reshape(len(X), -1))
        return self

    def transform(self, X):
        check_is_fitted(self, "pca_")
        X = check_images(X)
        return self.pca_.transform(X.reshape(len(X), -1))

    @property
    def name(self):
        return "pixel_pca"


def compatibility_proxy(dst, x, y):
    """Cosine of D_ST features, i.e. ``1 - style_distance``; row-wise for batches."""
    d = dst.style_distance(x, y)
    return np.clip(1.0 - d, -1.0, 1.0) if isinstance(d, np.ndarray) else min(1.0, max(-1.0, 1.0 - d))


@dataclass
class MetricReport:
    fid: float
    compat_proxy_mean: float
    n_eval: int
    direction: str
    variant: str = "ST-Net"
    embedder: str = "dst_features"
    n_real: int = 0
    step: int = -1
    config_ref: str = ""
    compat_label: str = PROXY_LABEL
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def evaluate_images(source, generated, target_real, dst, embedder=None, direction="",
                    variant="ST-Net", **kwargs):
    """Metrics for an already translated set.

    FID compares ``generated`` with ``target_real``; the proxy averages the
    compatibility of each ``(source[i], generated[i])`` pair.
    """
    source = check_images(source)
    generated = check_images(generated)
    target_real = check_images(target_real)
    if len(source) == 0 or len(target_real) == 0:
        raise ValueError("evaluation needs a non-empty test set")
    if len(source) != len(generated):
        raise ValueError("source and generated sets must align one-to-one")
    if embedder is None:
        embedder = DstEmbedder(dst)
    try:
        check_is_fitted(embedder)
    except Exception:
        embedder.fit(target_real)
    fid = frechet_distance_features(embedder.transform(generated), embedder.transform(target_real))
    proxy = compatibility_proxy(dst, source, generated)
    return MetricReport(
        fid=fid,
        compat_proxy_mean=float(np.mean(proxy)),
        n_eval=len(generated),
        n_real=len(target_real),
        direction=direction,
        variant=variant,
        embedder=getattr(embedder, "name", type(embedder).__name__),
        **kwargs,
    )


def evaluate(translator, source_test, target_test, embedder=None, dst=None, **kwargs):
    """Translate every source test image and score the result.

    ``dst`` defaults to the translator's own frozen discriminator.
    """
    if len(source_test) == 0:
        raise ValueError("evaluation needs a non-empty test set")
    dst = dst if dst is not None else translator.dst
    generated = translator.transform(source_test)
    kwargs.setdefault("direction", getattr(translator, "direction", ""))
    kwargs.setdefault("variant", getattr(translator, "variant_", "ST-Net"))
    return evaluate_images(source_test, generated, target_test, dst, embedder, **kwargs)


def summary_table(reports):
    """Plain-text table of reports (one row each), for the end of a run."""
    header = f"{'step':>8}  {'variant':<20}  {'direction':<14}  {'fid':>10}  {'compat_proxy':>12}  {'n':>5}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(f"{r.step:>8}  {r.variant:<20}  {r.direction:<14}  {r.fid:>10.4f}  "
                     f"{r.compat_proxy_mean:>12.4f}  {r.n_eval:>5}")
    return "\n".join(lines) + "\n"
