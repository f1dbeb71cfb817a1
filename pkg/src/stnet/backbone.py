"""Style-based generator backbone: mapping network f and synthesis network g.

The backbone is pretrained per domain with the non-saturating logistic GAN
loss plus an R1 penalty on real images, then frozen. A single ``w`` code
drives every layer of the synthesis network.
"""
import copy
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import (
    batched,
    check_images,
    check_random_state,
    check_vectors,
    parameter_checksum,
    to_nchw,
    to_nhwc,
)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class EqualLinear(nn.Module):
    """Linear layer with equalized learning rate."""

    def __init__(self, in_dim, out_dim, bias_init=0.0, lr_mul=1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init)))
        self.scale = lr_mul / math.sqrt(in_dim)
        self.lr_mul = lr_mul

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class MappingNetwork(nn.Module):
    def __init__(self, z_dim=512, w_dim=512, n_layers=4, lr_mul=0.01):
        super().__init__()
        layers = []
        for i in range(n_layers):
            layers.append(EqualLinear(z_dim if i == 0 else w_dim, w_dim, lr_mul=lr_mul))
        self.layers = nn.ModuleList(layers)

    def forward(self, z):
        x = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.2) * math.sqrt(2)
        return x


class ModulatedConv(nn.Module):
    """3x3 (or 1x1) conv whose input channels are scaled by a style from ``w``.

    Demodulation rescales each output channel to unit expected variance.
    Implemented with shared weights and per-sample scaling, which is
    equivalent to the grouped-convolution formulation.
    """

    def __init__(self, in_ch, out_ch, w_dim, kernel=3, demodulate=True, upsample=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.affine = EqualLinear(w_dim, in_ch, bias_init=1.0)
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.demodulate = demodulate
        self.upsample = upsample
        self.padding = kernel // 2

    def forward(self, x, w):
        styles = self.affine(w)
        weight = self.weight * self.scale
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = x * styles[:, :, None, None]
        x = F.conv2d(x, weight, padding=self.padding)
        if self.demodulate:
            wsq = weight.pow(2).sum(dim=(2, 3))                # (out, in)
            d = torch.rsqrt(styles.pow(2) @ wsq.t() + 1e-8)   # (n, out)
            x = x * d[:, :, None, None]
        return x


class SynthesisLayer(nn.Module):
    def __init__(self, in_ch, out_ch, w_dim, upsample=False):
        super().__init__()
        self.conv = ModulatedConv(in_ch, out_ch, w_dim, upsample=upsample)
        self.noise_strength = nn.Parameter(torch.zeros(()))
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x, w, noise_generator=None):
        x = self.conv(x, w)
        if noise_generator is not None:
            noise = torch.randn(x.shape[0], 1, *x.shape[2:], generator=noise_generator)
            x = x + noise * self.noise_strength
        return F.leaky_relu(x + self.bias[None, :, None, None], 0.2) * math.sqrt(2)


class ToRGB(nn.Module):
    def __init__(self, in_ch, w_dim):
        super().__init__()
        self.conv = ModulatedConv(in_ch, 3, w_dim, kernel=1, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(3))

    def forward(self, x, w):
        return self.conv(x, w) + self.bias[None, :, None, None]


class SynthesisNetwork(nn.Module):
    """Learned 4x4 constant upsampled by modulated conv blocks with skip-RGB outputs."""

    def __init__(self, w_dim=512, resolution=32, channels=(64, 64, 32, 32)):
        super().__init__()
        n_blocks = int(round(math.log2(resolution))) - 2
        if 4 * 2 ** n_blocks != resolution:
            raise ValueError(f"resolution must be a power of two >= 8, got {resolution}")
        channels = list(channels)
        if len(channels) < n_blocks + 1:
            channels += [channels[-1]] * (n_blocks + 1 - len(channels))
        self.resolution = resolution
        self.const = nn.Parameter(torch.randn(1, channels[0], 4, 4))
        self.first = SynthesisLayer(channels[0], channels[0], w_dim)
        self.first_rgb = ToRGB(channels[0], w_dim)
        self.blocks = nn.ModuleList()
        self.rgbs = nn.ModuleList()
        for i in range(n_blocks):
            self.blocks.append(nn.ModuleList([
                SynthesisLayer(channels[i], channels[i + 1], w_dim, upsample=True),
                SynthesisLayer(channels[i + 1], channels[i + 1], w_dim),
            ]))
            self.rgbs.append(ToRGB(channels[i + 1], w_dim))

    def forward(self, w, noise_generator=None):
        x = self.const.expand(w.shape[0], -1, -1, -1)
        x = self.first(x, w, noise_generator)
        rgb = self.first_rgb(x, w)
        for (up, conv), to_rgb in zip(self.blocks, self.rgbs):
            x = conv(up(x, w, noise_generator), w, noise_generator)
            rgb = F.interpolate(rgb, scale_factor=2, mode="bilinear", align_corners=False) + to_rgb(x, w)
        # affine squashing of tanh into [0, 1]
        return 0.5 * (torch.tanh(rgb) + 1.0)


class DiscriminatorBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, in_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1, bias=False)

    def forward(self, x):
        y = F.leaky_relu(self.conv1(x), 0.2)
        y = F.avg_pool2d(F.leaky_relu(self.conv2(y), 0.2), 2)
        s = F.avg_pool2d(self.skip(x), 2)
        return (y + s) / math.sqrt(2)


class ImageDiscriminator(nn.Module):
    """Residual image critic used only while pretraining the backbone."""

    def __init__(self, resolution=32, channels=(32, 64, 64)):
        super().__init__()
        n_blocks = int(round(math.log2(resolution))) - 2
        channels = list(channels)
        if len(channels) < n_blocks + 1:
            channels += [channels[-1]] * (n_blocks + 1 - len(channels))
        self.from_rgb = nn.Conv2d(3, channels[0], 1)
        self.blocks = nn.Sequential(*[
            DiscriminatorBlock(channels[i], channels[i + 1]) for i in range(n_blocks)
        ])
        c = channels[n_blocks]
        self.conv = nn.Conv2d(c + 1, c, 3, padding=1)
        self.fc = nn.Linear(c * 16, c)
        self.out = nn.Linear(c, 1)

    def forward(self, img):
        x = F.leaky_relu(self.from_rgb(img * 2.0 - 1.0), 0.2)
        x = self.blocks(x)
        # minibatch standard deviation
        std = x.std(dim=0, unbiased=False).mean().expand(x.shape[0], 1, *x.shape[2:])
        x = F.leaky_relu(self.conv(torch.cat([x, std], dim=1)), 0.2)
        x = F.leaky_relu(self.fc(x.flatten(1)), 0.2)
        return self.out(x).squeeze(1)


def _set_requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


class StyleGANBackbone(BaseEstimator):
    """Per-domain generative backbone with ``fit`` / ``sample_w`` / ``synthesize``.

    Parameters mirror the pretraining recipe: Adam with betas (0, 0.99), R1
    penalty weight ``r1_gamma`` applied every ``r1_interval`` steps (lazy
    regularization), and an exponential moving average of the generator that
    becomes the frozen backbone.
    """

    def __init__(self, resolution=32, z_dim=512, w_dim=512, mapping_layers=4,
                 channels=(32, 32, 16, 16), disc_channels=(16, 32, 32),
                 n_steps=5000, batch_size=16, learning_rate=2e-3, r1_gamma=10.0,
                 r1_interval=16, ema_beta=0.995, use_noise=False, random_state=0,
                 verbose=False):
        self.resolution = resolution
        self.z_dim = z_dim
        self.w_dim = w_dim
        self.mapping_layers = mapping_layers
        self.channels = channels
        self.disc_channels = disc_channels
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.r1_gamma = r1_gamma
        self.r1_interval = r1_interval
        self.ema_beta = ema_beta
        self.use_noise = use_noise
        self.random_state = random_state
        self.verbose = verbose

    def _build(self):
        torch.manual_seed(int(check_random_state(self.random_state).integers(2 ** 31)))
        self.mapping_ = MappingNetwork(self.z_dim, self.w_dim, self.mapping_layers)
        self.synthesis_ = SynthesisNetwork(self.w_dim, self.resolution, self.channels)
        self.frozen_ = False
        self.history_ = []
        self.domain_ = ""

    def initialize(self):
        """Build networks with random weights and no training."""
        self._build()
        self._eval()
        return self

    def fit(self, X, y=None):
        """Adversarially train f and g on a single-domain image batch ``X``."""
        if hasattr(X, "__len__") and len(X) == 0:
            raise ValueError("cannot pretrain a backbone on an empty dataset")
        X = check_images(X, self.resolution)
        self._build()
        rng = check_random_state(self.random_state)
        gen = torch.Generator().manual_seed(int(rng.integers(2 ** 31)))
        disc = ImageDiscriminator(self.resolution, self.disc_channels)
        ema_map = copy.deepcopy(self.mapping_)
        ema_syn = copy.deepcopy(self.synthesis_)
        _set_requires_grad(ema_map, False)
        _set_requires_grad(ema_syn, False)

        betas = (0.0, 0.99)
        g_opt = torch.optim.Adam(
            list(self.mapping_.parameters()) + list(self.synthesis_.parameters()),
            lr=self.learning_rate, betas=betas)
        r1_ratio = self.r1_interval / (self.r1_interval + 1)
        d_opt = torch.optim.Adam(disc.parameters(), lr=self.learning_rate * r1_ratio,
                                 betas=(0.0, 0.99 ** r1_ratio))
        real_all = to_nchw(X)
        n = real_all.shape[0]
        bs = min(self.batch_size, n)
        t0 = time.time()
        for step in range(self.n_steps):
            idx = torch.from_numpy(rng.choice(n, size=bs, replace=n < bs))
            real = real_all[idx]
            # random horizontal flips
            flip = torch.from_numpy(rng.random(bs) < 0.5)
            real = torch.where(flip[:, None, None, None], real.flip(3), real)
            noise_gen = gen if self.use_noise else None

            # discriminator
            _set_requires_grad(disc, True)
            z = torch.randn(bs, self.z_dim, generator=gen)
            with torch.no_grad():
                fake = self.synthesis_(self.mapping_(z), noise_gen)
            d_loss = F.softplus(disc(fake)).mean() + F.softplus(-disc(real)).mean()
            r1 = torch.zeros(())
            if self.r1_gamma > 0 and step % self.r1_interval == 0:
                real_r = real.detach().requires_grad_(True)
                (grad,) = torch.autograd.grad(disc(real_r).sum(), real_r, create_graph=True)
                r1 = grad.pow(2).sum(dim=(1, 2, 3)).mean()
                d_loss = d_loss + 0.5 * self.r1_gamma * self.r1_interval * r1
            d_opt.zero_grad(set_to_none=True)
            d_loss.backward()
            d_opt.step()

            # generator
            _set_requires_grad(disc, False)
            z = torch.randn(bs, self.z_dim, generator=gen)
            fake = self.synthesis_(self.mapping_(z), noise_gen)
            g_loss = F.softplus(-disc(fake)).mean()
            g_opt.zero_grad(set_to_none=True)
            g_loss.backward()
            g_opt.step()

            with torch.no_grad():
                for src, dst in ((self.mapping_, ema_map), (self.synthesis_, ema_syn)):
                    for p, q in zip(src.parameters(), dst.parameters()):
                        q.lerp_(p, 1.0 - self.ema_beta)
            self.history_.append({"step": step, "d_loss": float(d_loss.detach()), "g_loss": float(g_loss.detach()), "r1": float(r1.detach())})
            if self.verbose and (step % 200 == 0 or step == self.n_steps - 1):
                logger.info("backbone step %d d=%.4f g=%.4f r1=%.4f (%.1fs)",
                            step, float(d_loss.detach()), float(g_loss.detach()), float(r1.detach()), time.time() - t0)
        self.mapping_, self.synthesis_ = ema_map, ema_syn
        self.n_features_in_ = 3
        self._eval()
        return self

    def _eval(self):
        self.mapping_.eval()
        self.synthesis_.eval()

    def freeze(self):
        check_is_fitted(self, "mapping_")
        _set_requires_grad(self.mapping_, False)
        _set_requires_grad(self.synthesis_, False)
        self._eval()
        self.frozen_ = True
        return self

    def checksum(self):
        return parameter_checksum(self.mapping_, self.synthesis_)

    # inference -------------------------------------------------------

    def sample_z(self, n, rng=None):
        rng = check_random_state(rng)
        return rng.standard_normal((n, self.z_dim)).astype(np.float32)

    def map_tensor(self, z):
        return self.mapping_(z)

    def synthesize_tensor(self, w, noise_generator=None):
        return self.synthesis_(w, noise_generator)

    def sample_w(self, z):
        """Map noise ``z`` (``(n, z_dim)`` or ``(z_dim,)``) into W space."""
        check_is_fitted(self, "mapping_")
        z = check_vectors(z, self.z_dim, "z")
        with torch.no_grad():
            return self.mapping_(torch.from_numpy(z)).numpy()

    def synthesize(self, w, batch_size=256, noise_seed=None):
        """Render images ``(n, R, R, 3)`` in [0, 1] from W codes.

        Per-layer noise is used only when ``use_noise`` is set and a
        ``noise_seed`` is given; otherwise the map is deterministic.
        """
        check_is_fitted(self, "synthesis_")
        w = check_vectors(w, self.w_dim, "w")
        gen = None
        if self.use_noise and noise_seed is not None:
            gen = torch.Generator().manual_seed(int(noise_seed))
        out = []
        with torch.no_grad():
            for sl in batched(len(w), batch_size):
                out.append(to_nhwc(self.synthesis_(torch.from_numpy(w[sl]), gen)))
        return np.concatenate(out) if out else np.zeros((0, self.resolution, self.resolution, 3), np.float32)

    def sample(self, n, rng=None):
        return self.synthesize(self.sample_w(self.sample_z(n, rng)))

    # persistence -----------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "mapping_")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "kind": "backbone",
            "version": CHECKPOINT_VERSION,
            "params": self.get_params(),
            "domain": self.domain_,
            "mapping": self.mapping_.state_dict(),
            "synthesis": self.synthesis_.state_dict(),
            "history": self.history_,
        }, path)
        return path

    @classmethod
    def load(cls, path):
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        if ckpt.get("kind") != "backbone":
            raise ValueError(f"{path} is not a backbone checkpoint")
        if ckpt.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported backbone checkpoint version {ckpt.get('version')}")
        est = cls(**ckpt["params"])
        est._build()
        est.mapping_.load_state_dict(ckpt["mapping"])
        est.synthesis_.load_state_dict(ckpt["synthesis"])
        est.history_ = ckpt.get("history", [])
        est.domain_ = ckpt.get("domain", "")
        est.n_features_in_ = 3
        est.freeze()
        return est
