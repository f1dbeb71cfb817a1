"""Dual latent critics over W-space codes.

D1 is trained to score prior codes ``f(z)`` high and encoded codes ``e(x)``
low; D2 is trained the opposite way. The encoder plays against both.

``form="standard"`` reads the ``1 - log D`` terms of the three-player game as
``log(1 - D)`` (critics) and uses the non-saturating ``-log D1`` for the
encoder. ``form="literal"`` evaluates ``1 - log D`` exactly as written.
"""

import numpy as np
import torch
from torch import nn

from ._validation import check_vectors

SCORE_EPS = 1e-6
FORMS = ("standard", "literal")


def _scores(s):
    s = s if torch.is_tensor(s) else torch.as_tensor(np.asarray(s, dtype=np.float64))
    return s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)


def critic_loss(s1_wz, s1_we, s2_we, s2_wz, form="standard"):
    """Loss minimized by the critics (negated maximization objective).

    ``s1_wz = D1(f(z))``, ``s1_we = D1(e(x))``, ``s2_we = D2(e(x))``,
    ``s2_wz = D2(f(z))``.
    """
    s1_wz, s1_we, s2_we, s2_wz = map(_scores, (s1_wz, s1_we, s2_we, s2_wz))
    real = torch.log(s1_wz).mean() + torch.log(s2_we).mean()
    if form == "standard":
        other = torch.log1p(-s1_we).mean() + torch.log1p(-s2_wz).mean()
    elif form == "literal":
        other = (1.0 - torch.log(s1_we)).mean() + (1.0 - torch.log(s2_wz)).mean()
    else:
        raise ValueError(f"unknown adversarial form {form!r}; expected one of {FORMS}")
    return -(real + other)


def encoder_adversarial_terms(s1_we, s2_we, form="standard"):
    """Adversarial part of the encoder loss: ``-E log D1(e(x)) + E log D2(e(x))``."""
    s1_we, s2_we = _scores(s1_we), _scores(s2_we)
    if form == "standard":
        first = -torch.log(s1_we).mean()
    elif form == "literal":
        first = (1.0 - torch.log(s1_we)).mean()
    else:
        raise ValueError(f"unknown adversarial form {form!r}; expected one of {FORMS}")
    return first + torch.log(s2_we).mean()


class LatentCritic(nn.Module):
    """Three-layer MLP from a W code to a sigmoid score in (0, 1)."""

    def __init__(self, w_dim=512, hidden=256, role="D1"):
        super().__init__()
        if role not in ("D1", "D2"):
            raise ValueError(f"role must be D1 or D2, got {role!r}")
        self.role = role
        self.w_dim = w_dim
        self.net = nn.Sequential(
            nn.Linear(w_dim, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1),
        )

    def logits(self, w):
        return self.net(w).squeeze(-1)

    def forward(self, w):
        return torch.sigmoid(self.logits(w))


def critic_score(critic, w):
    """Scores of a critic for one code ``(w_dim,)`` or a batch ``(n, w_dim)``."""
    w = check_vectors(w, critic.w_dim, "w")
    with torch.no_grad():
        s = critic(torch.from_numpy(w)).numpy()
    return float(s[0]) if s.shape == (1,) else s
