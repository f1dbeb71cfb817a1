"""Synthetic two-domain clothing corpus.

Every "outfit" draws a hue, saturation/value, a texture motif and a motif
period. The upper item is a top-weighted T-shirt silhouette and the lower item
a bottom-weighted trouser silhouette; both are filled with the shared colour
and motif. Images are written unpaired: the lower ids are a random permutation
of the outfit index, and the true pairing only goes to ``pairs.json``.
"""
import colorsys
import json
from pathlib import Path

import numpy as np

from .dataio import save_image

MOTIFS = ("plain", "hstripes", "vstripes", "checker", "dots", "diagonal")
BACKGROUND = 0.96


def _motif_mask(motif, period, phase, res):
    yy, xx = np.mgrid[0:res, 0:res]
    half = period / 2.0
    if motif == "plain":
        return np.zeros((res, res), dtype=bool)
    if motif == "hstripes":
        return ((yy + phase) % period) < half
    if motif == "vstripes":
        return ((xx + phase) % period) < half
    if motif == "checker":
        return ((((yy + phase) // half) + ((xx + phase) // half)) % 2).astype(bool)
    if motif == "dots":
        cy = (yy + phase) % period - half
        cx = (xx + phase) % period - half
        return cy ** 2 + cx ** 2 <= (period / 3.5) ** 2
    if motif == "diagonal":
        return ((xx + yy + phase) % period) < half
    raise ValueError(f"unknown motif {motif!r}")


def _box(mask, r0, r1, c0, c1, res):
    mask[int(round(r0 * res)):int(round(r1 * res)), int(round(c0 * res)):int(round(c1 * res))] = True


def upper_silhouette(res, dy=0, dx=0):
    m = np.zeros((res, res), dtype=bool)
    _box(m, 0.06, 0.74, 0.24, 0.76, res)   # body
    _box(m, 0.06, 0.34, 0.04, 0.96, res)   # sleeves
    return np.roll(m, (dy, dx), axis=(0, 1))


def lower_silhouette(res, dy=0, dx=0):
    m = np.zeros((res, res), dtype=bool)
    _box(m, 0.26, 0.52, 0.16, 0.84, res)   # waist / hips
    _box(m, 0.52, 0.98, 0.16, 0.47, res)   # left leg
    _box(m, 0.52, 0.98, 0.53, 0.84, res)   # right leg
    return np.roll(m, (dy, dx), axis=(0, 1))


def sample_outfit(rng):
    return {
        "hue": float(rng.uniform()),
        "saturation": float(rng.uniform(0.55, 0.95)),
        "value": float(rng.uniform(0.55, 0.95)),
        "motif": MOTIFS[int(rng.integers(len(MOTIFS)))],
        "period": int(rng.choice([4, 6, 8])),
    }


def render_item(outfit, domain, res, rng):
    """Render one garment image ``(res, res, 3)`` in [0, 1]."""
    dy, dx = (int(v) for v in rng.integers(-1, 2, size=2))
    shape = upper_silhouette(res, dy, dx) if domain == "upper" else lower_silhouette(res, dy, dx)
    base = np.array(colorsys.hsv_to_rgb(outfit["hue"], outfit["saturation"], outfit["value"]))
    accent = np.array(colorsys.hsv_to_rgb(outfit["hue"], outfit["saturation"] * 0.6, outfit["value"] * 0.45))
    phase = int(rng.integers(outfit["period"]))
    motif = _motif_mask(outfit["motif"], outfit["period"], phase, res)
    img = np.full((res, res, 3), BACKGROUND)
    img[shape] = base
    img[shape & motif] = accent
    img += rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_corpus(n, resolution=32, seed=0):
    """Build the corpus in memory.

    Returns ``(upper, lower, pairs, outfits)`` where ``upper``/``lower`` map
    ids to pixel arrays and ``pairs`` lists ``(upper_id, lower_id)``.
    """
    rng = np.random.default_rng(seed)
    outfits = [sample_outfit(rng) for _ in range(n)]
    lower_index = rng.permutation(n)
    upper, lower, pairs = {}, {}, []
    for i, outfit in enumerate(outfits):
        uid = f"upper_{i:05d}"
        lid = f"lower_{lower_index[i]:05d}"
        upper[uid] = render_item(outfit, "upper", resolution, rng)
        lower[lid] = render_item(outfit, "lower", resolution, rng)
        pairs.append((uid, lid))
    return upper, lower, pairs, outfits


def write_corpus(out_dir, n, resolution=32, seed=0, force=False):
    """Write ``upper/``, ``lower/`` PNGs plus the ``pairs.json`` sidecar."""
    if n < 16:
        raise ValueError(f"need at least 16 items per domain, got {n}")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise FileExistsError(f"{out_dir} is not empty; pass --force to overwrite")
        for sub in ("upper", "lower"):
            for p in (out_dir / sub).glob("*.png"):
                p.unlink()
    upper, lower, pairs, outfits = make_corpus(n, resolution, seed)
    for domain, images in (("upper", upper), ("lower", lower)):
        d = out_dir / domain
        d.mkdir(parents=True, exist_ok=True)
        for key, pixels in images.items():
            save_image(d / f"{key}.png", pixels)
    sidecar = {
        "note": "ground-truth pairing; evaluation only, never read by training",
        "seed": seed,
        "resolution": resolution,
        "pairs": [
            {"upper": u, "lower": l, **outfit} for (u, l), outfit in zip(pairs, outfits)
        ],
    }
    (out_dir / "pairs.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return out_dir


def load_pairs(path):
    d = json.loads(Path(path).read_text())
    return [(p["upper"], p["lower"]) for p in d["pairs"]]
