"""Synthetic image domain: clean latent grids, artifact injection, templated texts.

Images are (C, H, W) float arrays in [-1, 1]. Clean images are sums of three
seeded sinusoids per channel, so corruptions stand out against a smooth,
low-frequency background. Artifacts fall into exactly three categories
(structure, physics, distortion), are confined to one quadrant, and come
with a ground-truth mask so correction quality is measurable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

CATEGORIES = ("structure", "physics", "distortion")
REGIONS = ("top_left", "top_right", "bottom_left", "bottom_right")
MAGNITUDES = ("low", "high")

DISTORTION_AMPLITUDE = {"low": 0.25, "high": 0.5}

SINUSOID_COUNT = 3
SINUSOID_FREQS = (1, 2)


@dataclass(frozen=True)
class GridConfig:
    channels: int = 4
    height: int = 8
    width: int = 8

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def n_sites(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class ArtifactSpec:
    category: str
    region: str
    magnitude: str
    seed: int

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ConfigError(f"unknown artifact category {self.category!r}")
        if self.region not in REGIONS:
            raise ConfigError(f"unknown region {self.region!r}")
        if self.magnitude not in MAGNITUDES:
            raise ConfigError(f"unknown magnitude {self.magnitude!r}")

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "region": self.region,
            "magnitude": self.magnitude,
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArtifactSpec":
        return cls(d["category"], d["region"], d["magnitude"], int(d["seed"]))


def _admits_invariant_shift(fx: np.ndarray, fy: np.ndarray, cfg: GridConfig) -> bool:
    """True if some small translation leaves every sinusoid unchanged.

    Such frequency combos make the field periodic under an in-quadrant
    shift, so a patch swap along that shift would be exactly invisible
    (and undetectable); they are excluded from the clean-image family.
    """
    for dr in range(-2, 3):
        for dc in range(-2, 3):
            if dr == 0 and dc == 0:
                continue
            if np.all((fx * dr * cfg.width + fy * dc * cfg.height)
                      % (cfg.height * cfg.width) == 0):
                return True
    return False


def gen_clean(seed: int, cfg: GridConfig = GridConfig()) -> np.ndarray:
    """Clean image: per channel, mean of K=3 seeded sinusoids over the grid.

    value(c,i,j) = (1/K) * sum_k sin(2*pi*(fx_k*i/H + fy_k*j/W) + phase(c,k)),
    with integer frequencies from {1, 2}. The 1/K normalization bounds the
    result inside [-1, 1]. Frequency combos with an exact small-shift
    symmetry are redrawn.
    """
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    k = SINUSOID_COUNT
    while True:
        fx = rng.choice(SINUSOID_FREQS, size=k)
        fy = rng.choice(SINUSOID_FREQS, size=k)
        if not _admits_invariant_shift(fx, fy, cfg):
            break
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(cfg.channels, k))
    i = np.arange(cfg.height)[:, None]
    j = np.arange(cfg.width)[None, :]
    base = 2.0 * np.pi * (fx[:, None, None] * i / cfg.height + fy[:, None, None] * j / cfg.width)
    img = np.sin(base[None] + phases[:, :, None, None]).mean(axis=1)
    return img


def region_slices(region: str, cfg: GridConfig) -> tuple[slice, slice]:
    h2, w2 = cfg.height // 2, cfg.width // 2
    rows = slice(0, h2) if region.startswith("top") else slice(h2, cfg.height)
    cols = slice(0, w2) if region.endswith("left") else slice(w2, cfg.width)
    return rows, cols


def region_mask(region: str, cfg: GridConfig) -> np.ndarray:
    mask = np.zeros((cfg.height, cfg.width), dtype=bool)
    rows, cols = region_slices(region, cfg)
    mask[rows, cols] = True
    return mask


def _disjoint_patch_pair(rng: np.random.Generator, qh: int, qw: int) -> tuple[tuple[int, int], tuple[int, int]]:
    origins = [(r, c) for r in range(qh - 1) for c in range(qw - 1)]
    pairs = [
        (a, b)
        for ai, a in enumerate(origins)
        for b in origins[ai + 1:]
        if abs(a[0] - b[0]) >= 2 or abs(a[1] - b[1]) >= 2
    ]
    if not pairs:
        raise ConfigError(f"quadrant {qh}x{qw} too small for two disjoint 2x2 patches")
    return pairs[int(rng.integers(len(pairs)))]


def inject_artifact(
    img: np.ndarray,
    spec: ArtifactSpec,
    cfg: GridConfig = GridConfig(),
    amplitude: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt one quadrant of ``img`` per ``spec``; return (corrupted, mask).

    structure: swap two disjoint seeded 2x2 patches inside the quadrant.
    physics:   negate all values inside the quadrant.
    distortion: add seeded zero-mean uniform noise of amplitude 0.25 (low)
                or 0.5 (high) inside the quadrant, then clamp to [-1, 1].

    ``amplitude`` overrides the magnitude-derived distortion amplitude
    (used by tests). Pixels outside the quadrant are bit-identical copies.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0x1A]))
    rows, cols = region_slices(spec.region, cfg)
    out = img.copy()
    if spec.category == "structure":
        qh, qw = rows.stop - rows.start, cols.stop - cols.start
        (r1, c1), (r2, c2) = _disjoint_patch_pair(rng, qh, qw)
        r1, c1 = rows.start + r1, cols.start + c1
        r2, c2 = rows.start + r2, cols.start + c2
        a = out[:, r1:r1 + 2, c1:c1 + 2].copy()
        out[:, r1:r1 + 2, c1:c1 + 2] = out[:, r2:r2 + 2, c2:c2 + 2]
        out[:, r2:r2 + 2, c2:c2 + 2] = a
    elif spec.category == "physics":
        out[:, rows, cols] = -out[:, rows, cols]
    else:
        a = DISTORTION_AMPLITUDE[spec.magnitude] if amplitude is None else amplitude
        noise = rng.uniform(-a, a, size=(img.shape[0], rows.stop - rows.start, cols.stop - cols.start))
        out[:, rows, cols] = np.clip(out[:, rows, cols] + noise, -1.0, 1.0)
    return out, region_mask(spec.region, cfg)


def region_rmse(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """RMSE between two images, restricted to mask==True sites (all channels)."""
    d = a - b
    if mask is not None:
        d = d[:, mask]
    return float(np.sqrt(np.mean(d * d)))


# ---------------------------------------------------------------------------
# closed vocabulary and text templates
# ---------------------------------------------------------------------------

SPECIALS = ("<pad>", "<bos>", "<eos>", "<detect>", "<caption>", "<reason>", "<stop>")
WORDS = (
    "artifact", "structure", "physics", "distortion",
    "quadrant", "top_left", "top_right", "bottom_left", "bottom_right",
    "magnitude", "low", "high",
    "image", "normal", "real", "fake",
    "clean", "pattern", "none", "observed",
    "detect", "this", "please", "repair",
)


class Vocab:
    """Closed token list; id == position. The order is normative."""

    def __init__(self) -> None:
        self.tokens = list(SPECIALS) + list(WORDS)
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, toks: list[str]) -> list[int]:
        try:
            return [self.ids[t] for t in toks]
        except KeyError as e:
            raise DataFormatError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: list[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.ids, indent=2) + "\n")


VOCAB = Vocab()

PAD = VOCAB.ids["<pad>"]
BOS = VOCAB.ids["<bos>"]
EOS = VOCAB.ids["<eos>"]
DETECT_TOK = VOCAB.ids["<detect>"]
CAPTION_TOK = VOCAB.ids["<caption>"]
REASON_TOK = VOCAB.ids["<reason>"]
STOP_TOK = VOCAB.ids["<stop>"]

DETECT_PROMPT = VOCAB.encode(["<bos>", "detect", "this", "image"])
REPAIR_PROMPT = VOCAB.encode(["please", "repair", "this", "image"])
DIAGNOSIS_LEN = 7


def render_diagnosis(spec: ArtifactSpec) -> list[int]:
    return VOCAB.encode([
        "<reason>", "artifact", spec.category, "quadrant", spec.region,
        "magnitude", spec.magnitude,
    ])


def parse_diagnosis(ids: list[int]) -> dict | None:
    """Recover (category, region, magnitude) from a diagnosis; None if malformed."""
    if len(ids) != DIAGNOSIS_LEN or ids[0] != REASON_TOK:
        return None
    toks = VOCAB.decode(ids)
    if toks[1] != "artifact" or toks[3] != "quadrant" or toks[5] != "magnitude":
        return None
    if toks[2] not in CATEGORIES or toks[4] not in REGIONS or toks[6] not in MAGNITUDES:
        return None
    return {"category": toks[2], "region": toks[4], "magnitude": toks[6]}


def render_termination() -> list[int]:
    return VOCAB.encode(["<stop>", "image", "normal", "<eos>"])


def render_detection_answer(label: str, spec: ArtifactSpec | None = None) -> list[int]:
    if label == "real":
        return VOCAB.encode([
            "<detect>", "real", "<caption>", "clean", "pattern", "image",
            "<reason>", "none", "observed", "<eos>",
        ])
    if label == "fake":
        if spec is None:
            raise ConfigError("fake detection answer requires an ArtifactSpec")
        return VOCAB.encode([
            "<detect>", "fake", "<caption>", "artifact", spec.category, "image",
            "<reason>", "artifact", spec.category, "quadrant", spec.region, "<eos>",
        ])
    raise ConfigError(f"unknown label {label!r}")
