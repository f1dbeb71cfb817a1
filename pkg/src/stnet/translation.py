"""Encoder training against a frozen backbone, frozen D_ST and live latent critics.

The generator is ``g(e(x))``: only the encoder ``e`` learns. Each step first
updates both latent critics on fresh prior codes versus the current encoded
codes, then updates the encoder on ``lambda_st * L_ST`` plus the adversarial
terms. There is deliberately no image reconstruction loss.
"""
import copy
import csv
import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import batched, check_images, parameter_checksum, to_nchw
from .dual import FORMS, LatentCritic, critic_loss, encoder_adversarial_terms
from .exceptions import MissingStageError, NumericalAbort
from .st_discriminator import cosine_distance

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DIRECTIONS = {"upper->lower": ("upper", "lower"), "lower->upper": ("lower", "upper")}
LOG_FIELDS = ["step", "total", "L_ST", "adversarial", "critic_loss",
              "s1_wz", "s1_we", "s2_we", "s2_wz"]


def normalize_direction(direction):
    d = str(direction).replace("→", "->").replace(" ", "").lower()
    if d not in DIRECTIONS:
        raise ValueError(f"direction must be one of {sorted(DIRECTIONS)}, got {direction!r}")
    return d


def variant_name(ablate_L_ST, ablate_dual):
    if ablate_L_ST and ablate_dual:
        return "ST-Net w/o L_ST w/o L_dual"
    if ablate_L_ST:
        return "ST-Net w/o L_ST"
    if ablate_dual:
        return "ST-Net w/o L_dual"
    return "ST-Net"


@dataclass
class TrainConfig:
    direction: str = "upper->lower"
    lambda_st: float = 1.0
    learning_rate: float = 2e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    ablate_L_ST: bool = False
    ablate_dual: bool = False
    adversarial_form: str = "standard"
    critic_hidden: int = 256
    checkpoint_every: int = 500

    def __post_init__(self):
        self.direction = normalize_direction(self.direction)
        if self.lambda_st < 0:
            raise ValueError("lambda_st must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.adversarial_form not in FORMS:
            raise ValueError(f"adversarial_form must be one of {FORMS}")

    @property
    def source_domain(self):
        return DIRECTIONS[self.direction][0]

    @property
    def target_domain(self):
        return DIRECTIONS[self.direction][1]

    @property
    def variant(self):
        return variant_name(self.ablate_L_ST, self.ablate_dual)


class Encoder(nn.Module):
    """Strided conv net with global average pooling into a single W code.

    Outputs are offsets from ``w_avg`` (the backbone's mean mapped code), so a
    freshly initialized encoder already lands near the prior.
    """

    def __init__(self, w_dim=512, widths=(32, 64, 128), w_avg=None):
        super().__init__()
        layers, in_ch = [], 3
        for w in widths:
            layers += [nn.Conv2d(in_ch, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            in_ch = w
        layers += [nn.Conv2d(in_ch, in_ch, 3, padding=1), nn.LeakyReLU(0.2)]
        self.convs = nn.Sequential(*layers)
        self.head = nn.Linear(in_ch, w_dim)
        self.register_buffer("w_avg", torch.zeros(w_dim) if w_avg is None else torch.as_tensor(w_avg).float())

    def forward(self, x):
        h = self.convs(x * 2.0 - 1.0).mean(dim=(2, 3))
        return self.head(h) + self.w_avg


def total_loss(dst, x, y, s1_we, s2_we, lambda_st=1.0, form="standard"):
    """``lambda_st * L_ST(x, y) + encoder adversarial terms`` (batch means).

    ``dst`` only needs a ``features_tensor`` method; ``x``/``y`` are NCHW
    tensors or ``(n, H, W, 3)`` arrays.
    """
    def as_nchw(a):
        if torch.is_tensor(a):
            return a
        check_images(a)
        a = np.asarray(a, dtype=np.float64)
        return to_nchw(a[None] if a.ndim == 3 else a)

    x, y = as_nchw(x), as_nchw(y)
    l_st = cosine_distance(dst.features_tensor(x).double(), dst.features_tensor(y).double()).mean()
    return lambda_st * l_st + encoder_adversarial_terms(s1_we, s2_we, form)


def _set_requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


class STNetTranslator(TransformerMixin, BaseEstimator):
    """Source-domain image -> compatible target-domain image via ``g(e(x))``.

    ``backbone`` must be pretrained on the target domain and ``dst`` trained
    on both domains; both are frozen by ``fit``. Set ``warm_start=True`` to
    continue training a fitted (or reloaded) translator up to ``steps``.
    """

    def __init__(self, backbone=None, dst=None, direction="upper->lower", lambda_st=1.0,
                 learning_rate=2e-4, adam_beta1=0.0, adam_beta2=0.99, batch_size=32,
                 steps=2000, seed=0, ablate_L_ST=False, ablate_dual=False,
                 adversarial_form="standard", critic_hidden=256, checkpoint_every=500,
                 encoder_widths=(32, 64, 128), warm_start=False, verbose=False):
        self.backbone = backbone
        self.dst = dst
        self.direction = direction
        self.lambda_st = lambda_st
        self.learning_rate = learning_rate
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed
        self.ablate_L_ST = ablate_L_ST
        self.ablate_dual = ablate_dual
        self.adversarial_form = adversarial_form
        self.critic_hidden = critic_hidden
        self.checkpoint_every = checkpoint_every
        self.encoder_widths = encoder_widths
        self.warm_start = warm_start
        self.verbose = verbose

    @classmethod
    def from_config(cls, config, backbone, dst, **kwargs):
        params = dataclasses.asdict(config)
        params.update(kwargs)
        return cls(backbone=backbone, dst=dst, **params)

    @property
    def config(self):
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.get_params(deep=False).items() if k in names})

    @property
    def effective_lambda_st(self):
        return 0.0 if self.ablate_L_ST else float(self.lambda_st)

    # setup -----------------------------------------------------------

    def _check_prerequisites(self):
        for name, obj, attr in (("pretrain-gan", self.backbone, "mapping_"), ("train-dst", self.dst, "network_")):
            if obj is None or not hasattr(obj, attr):
                raise MissingStageError(name, "a fitted model")
        if self.backbone.resolution != self.dst.resolution:
            raise ValueError("backbone and D_ST resolutions differ")
        self.backbone.freeze()
        self.dst.freeze()

    def _init_state(self):
        cfg = self.config
        self.variant_ = cfg.variant
        rng = np.random.default_rng(cfg.seed)
        torch.manual_seed(int(rng.integers(2 ** 31)))
        with torch.no_grad():
            z = torch.randn(10_000, self.backbone.z_dim, generator=torch.Generator().manual_seed(int(rng.integers(2 ** 31))))
            w_avg = self.backbone.mapping_(z).mean(dim=0)
        self.encoder_ = Encoder(self.backbone.w_dim, self.encoder_widths, w_avg)
        self.critic1_ = LatentCritic(self.backbone.w_dim, self.critic_hidden, "D1")
        self.critic2_ = LatentCritic(self.backbone.w_dim, self.critic_hidden, "D2")
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.encoder_opt_ = torch.optim.Adam(self.encoder_.parameters(), lr=cfg.learning_rate, betas=betas)
        self.critic_opt_ = torch.optim.Adam(
            list(self.critic1_.parameters()) + list(self.critic2_.parameters()),
            lr=cfg.learning_rate, betas=betas)
        self.rng_ = rng
        self.z_gen_ = torch.Generator().manual_seed(int(rng.integers(2 ** 31)))
        self.step_ = 0
        self.order_ = None
        self.pos_ = 0
        self.log_ = []
        self.reports_ = []

    def _next_batch(self, n):
        bs = min(self.batch_size, n)
        if self.order_ is None or len(self.order_) != n or self.pos_ + bs > n:
            self.order_ = self.rng_.permutation(n)
            self.pos_ = 0
        idx = self.order_[self.pos_:self.pos_ + bs]
        self.pos_ += bs
        return idx

    # training --------------------------------------------------------

    def train_step(self, x, batch_ids=None, dump_dir=None):
        """One critic update followed by one encoder update on NCHW batch ``x``."""
        lam = self.effective_lambda_st
        form = self.adversarial_form
        mapping, synthesis = self.backbone.mapping_, self.backbone.synthesis_
        self.encoder_.train()
        w_e = self.encoder_(x)

        entry = {"step": self.step_}
        if not self.ablate_dual:
            z = torch.randn(x.shape[0], self.backbone.z_dim, generator=self.z_gen_)
            with torch.no_grad():
                w_z = mapping(z)
            _set_requires_grad(self.critic1_, True)
            _set_requires_grad(self.critic2_, True)
            w_e_d = w_e.detach()
            s1_wz, s1_we_c = self.critic1_(w_z).double(), self.critic1_(w_e_d).double()
            s2_we_c, s2_wz = self.critic2_(w_e_d).double(), self.critic2_(w_z).double()
            c_loss = critic_loss(s1_wz, s1_we_c, s2_we_c, s2_wz, form)
            self._check_finite(c_loss, "critic loss", batch_ids, dump_dir)
            self.critic_opt_.zero_grad(set_to_none=True)
            c_loss.backward()
            self.critic_opt_.step()
            entry.update(critic_loss=c_loss.item(), s1_wz=s1_wz.mean().item(), s2_wz=s2_wz.mean().item())
        else:
            entry.update(critic_loss=0.0, s1_wz=float("nan"), s2_wz=float("nan"))

        # encoder update; critics frozen for this half-step
        _set_requires_grad(self.critic1_, False)
        _set_requires_grad(self.critic2_, False)
        track_st = lam > 0
        with torch.set_grad_enabled(track_st):
            y = synthesis(w_e if track_st else w_e.detach())
            l_st = cosine_distance(self.dst.features_tensor(x).double(),
                                   self.dst.features_tensor(y).double()).mean()
        if not self.ablate_dual:
            s1_we, s2_we = self.critic1_(w_e).double(), self.critic2_(w_e).double()
            adv = encoder_adversarial_terms(s1_we, s2_we, form)
            entry.update(s1_we=s1_we.mean().item(), s2_we=s2_we.mean().item())
        else:
            adv = torch.zeros((), dtype=torch.float64)
            entry.update(s1_we=float("nan"), s2_we=float("nan"))
        total = lam * l_st + adv
        self._check_finite(total, "encoder loss", batch_ids, dump_dir)
        self.encoder_opt_.zero_grad(set_to_none=True)
        if total.requires_grad:
            total.backward()
            self.encoder_opt_.step()
        self.encoder_.eval()
        entry.update(total=total.item(), L_ST=l_st.item(), adversarial=adv.item())
        self.step_ += 1
        self.log_.append(entry)
        return entry

    def _check_finite(self, value, what, batch_ids, dump_dir):
        if torch.isfinite(value).all():
            return
        dump_path = None
        if dump_dir is not None:
            dump_path = Path(dump_dir) / f"nonfinite_step{self.step_}.pt"
            dump_path.parent.mkdir(parents=True, exist_ok=True)
            torch.save({"batch_ids": list(batch_ids or []), "step": self.step_, "what": what}, dump_path)
        raise NumericalAbort(f"non-finite {what} at step {self.step_}; batch ids: {list(batch_ids or [])}",
                             batch_ids, dump_path)

    def fit(self, X, y=None, ids=None, run_dir=None, eval_sets=None, backbone_ref="", dst_ref=""):
        """Train the encoder on source-domain images ``X`` for ``steps`` steps.

        With ``run_dir`` set, checkpoints, loss log and sample grids are
        written every ``checkpoint_every`` steps and at the end.
        ``eval_sets=(source_test, target_test)`` adds a metric snapshot at each
        checkpoint.
        """
        X = check_images(X, getattr(self.backbone, "resolution", None))
        if len(X) == 0:
            raise ValueError("cannot train on an empty source set")
        self._check_prerequisites()
        if not (self.warm_start and hasattr(self, "encoder_")):
            self._init_state()
        self.backbone_ref_ = str(backbone_ref or getattr(self, "backbone_ref_", ""))
        self.dst_ref_ = str(dst_ref or getattr(self, "dst_ref_", ""))
        ids = list(ids) if ids is not None else [str(i) for i in range(len(X))]
        frozen = (self.backbone.checksum(), self.dst.checksum())
        X_t = to_nchw(X)
        run_dir = Path(run_dir) if run_dir is not None else None
        t0 = time.time()
        while self.step_ < self.steps:
            idx = self._next_batch(len(X))
            entry = self.train_step(X_t[idx], [ids[i] for i in idx], run_dir)
            if self.verbose and (entry["step"] % 100 == 0 or self.step_ == self.steps):
                logger.info("train step %d total=%.4f L_ST=%.4f adv=%.4f critic=%.4f (%.1fs)",
                            entry["step"], entry["total"], entry["L_ST"], entry["adversarial"],
                            entry["critic_loss"], time.time() - t0)
            at_cadence = self.checkpoint_every and self.step_ % self.checkpoint_every == 0
            if run_dir is not None and (at_cadence or self.step_ == self.steps):
                self._snapshot(run_dir, X, eval_sets)
        if (self.backbone.checksum(), self.dst.checksum()) != frozen:
            raise RuntimeError("frozen backbone or D_ST parameters changed during training")
        self.n_features_in_ = 3
        return self

    def _snapshot(self, run_dir, X, eval_sets):
        from .dataio import save_image, tile_pairs
        from .evaluation import evaluate

        run_dir.mkdir(parents=True, exist_ok=True)
        ckpt = run_dir / "checkpoints" / f"step_{self.step_:06d}.pt"
        self.save_checkpoint(ckpt)
        self.write_log(run_dir / "loss_log.csv")
        (run_dir / "samples").mkdir(exist_ok=True)
        k = min(8, len(X))
        save_image(run_dir / "samples" / f"step_{self.step_:06d}.png", tile_pairs(X[:k], self.transform(X[:k])))
        if eval_sets is not None:
            report = evaluate(self, eval_sets[0], eval_sets[1], step=self.step_, config_ref=str(ckpt))
            report.save(run_dir / "metrics" / f"step_{self.step_:06d}.json")
            self.reports_.append(report)

    # inference -------------------------------------------------------

    def encode(self, X, batch_size=256):
        """W codes ``(n, w_dim)`` for source images."""
        check_is_fitted(self, "encoder_")
        X = check_images(X, self.backbone.resolution)
        self.encoder_.eval()
        out = []
        with torch.no_grad():
            for sl in batched(len(X), batch_size):
                out.append(self.encoder_(to_nchw(X[sl])).numpy())
        return np.concatenate(out) if out else np.zeros((0, self.backbone.w_dim), np.float32)

    def transform(self, X):
        """Translate source images into target-domain images ``g(e(x))``."""
        w = self.encode(X)
        if len(w) == 0:
            r = self.backbone.resolution
            return np.zeros((0, r, r, 3), np.float32)
        return self.backbone.synthesize(w)

    translate = transform

    def encoder_checksum(self):
        return parameter_checksum(self.encoder_)

    # persistence -----------------------------------------------------

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
            for row in self.log_:
                writer.writerow({k: row.get(k, "") for k in LOG_FIELDS})
        return path

    def save_checkpoint(self, path):
        check_is_fitted(self, "encoder_")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        params = self.get_params(deep=False)
        params.pop("backbone")
        params.pop("dst")
        torch.save({
            "kind": "translator",
            "version": CHECKPOINT_VERSION,
            "params": params,
            "backbone_ref": getattr(self, "backbone_ref_", ""),
            "dst_ref": getattr(self, "dst_ref_", ""),
            "backbone_checksum": self.backbone.checksum(),
            "dst_checksum": self.dst.checksum(),
            "encoder": self.encoder_.state_dict(),
            "critic1": self.critic1_.state_dict(),
            "critic2": self.critic2_.state_dict(),
            "encoder_opt": self.encoder_opt_.state_dict(),
            "critic_opt": self.critic_opt_.state_dict(),
            "rng": copy.deepcopy(self.rng_.bit_generator.state),
            "z_gen": self.z_gen_.get_state(),
            "order": None if self.order_ is None else self.order_.tolist(),
            "pos": self.pos_,
            "step": self.step_,
            "log": self.log_,
        }, path)
        return path

    @classmethod
    def load_checkpoint(cls, path, backbone=None, dst=None, **overrides):
        """Rebuild a translator (with optimizer and RNG state) from a checkpoint.

        Missing ``backbone``/``dst`` are loaded from the paths recorded in the
        checkpoint. ``overrides`` change constructor params, e.g. ``steps``.
        """
        from .backbone import StyleGANBackbone
        from .st_discriminator import StyleTextureDiscriminator

        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        if ckpt.get("kind") != "translator":
            raise ValueError(f"{path} is not a translator checkpoint")
        if ckpt.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported translator checkpoint version {ckpt.get('version')}")
        if backbone is None:
            backbone = StyleGANBackbone.load(ckpt["backbone_ref"])
        if dst is None:
            dst = StyleTextureDiscriminator.load(ckpt["dst_ref"])
        if backbone.checksum() != ckpt["backbone_checksum"] or dst.checksum() != ckpt["dst_checksum"]:
            raise ValueError("frozen models do not match the ones this checkpoint was trained with")
        params = dict(ckpt["params"])
        params.update(overrides)
        est = cls(backbone=backbone, dst=dst, **params)
        est._check_prerequisites()
        est._init_state()
        est.encoder_.load_state_dict(ckpt["encoder"])
        est.critic1_.load_state_dict(ckpt["critic1"])
        est.critic2_.load_state_dict(ckpt["critic2"])
        est.encoder_opt_.load_state_dict(ckpt["encoder_opt"])
        est.critic_opt_.load_state_dict(ckpt["critic_opt"])
        est.rng_.bit_generator.state = ckpt["rng"]
        est.z_gen_.set_state(ckpt["z_gen"])
        est.order_ = None if ckpt["order"] is None else np.asarray(ckpt["order"])
        est.pos_ = ckpt["pos"]
        est.step_ = ckpt["step"]
        est.log_ = list(ckpt["log"])
        est.backbone_ref_ = ckpt["backbone_ref"]
        est.dst_ref_ = ckpt["dst_ref"]
        est.n_features_in_ = 3
        est.encoder_.eval()
        return est
