"""Inference: greedy decoding, Euler flow sampling, detection, VCoT loop.

The diagnose-then-correct loop alternates a decoded text diagnosis with a
conditional flow-sampled image. A round whose diagnosis begins with the
stop token terminates the loop and leaves the image untouched; a hard cap
on rounds guarantees halting regardless of model behavior.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dataset import SequenceBuilder, TrainSample
from .errors import ConfigError
from .model import ModelConfig, forward
from .objectives import shift_time
from .toyworld import (
    CAPTION_TOK,
    DETECT_PROMPT,
    DETECT_TOK,
    EOS,
    REASON_TOK,
    REPAIR_PROMPT,
    STOP_TOK,
    VOCAB,
    DIAGNOSIS_LEN,
)

FAKE_ID = VOCAB.ids["fake"]
REAL_ID = VOCAB.ids["real"]

DEFAULT_MAX_NEW_TOKENS = 24
DEFAULT_FLOW_STEPS = 20
DEFAULT_MAX_ROUNDS = 6


@dataclass
class Context:
    """Conditioning prefix for decoding: ordered text/image parts."""

    parts: list = field(default_factory=list)

    def add_text(self, kind: str, ids: list[int]) -> "Context":
        self.parts.append(("text", kind, list(ids)))
        return self

    def add_image(self, img: np.ndarray) -> "Context":
        self.parts.append(("image", "img_cond", img))
        return self

    def materialize(self, cfg: ModelConfig, answer_ids: list[int],
                    with_gen: bool = False) -> TrainSample:
        b = SequenceBuilder(cfg.grid)
        cond_images = []
        for part in self.parts:
            if part[0] == "text":
                b.add_text(part[1], part[2])
            else:
                b.add_image("img_cond")
                cond_images.append(part[2])
        if answer_ids:
            b.add_text("answer", answer_ids)
        if with_gen:
            b.add_image("img_gen")
        return TrainSample(b.build(), "inference", cond_images, None)


def decode_text(
    context: Context,
    params: dict[str, nn.Tensor],
    cfg: ModelConfig,
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS,
) -> tuple[list[int], list[np.ndarray]]:
    """Greedy one-token-at-a-time decoding; stops at <eos> or the cap.

    Returns the decoded ids and, per decoded slot, the logits that
    produced it.
    """
    decoded: list[int] = []
    step_logits: list[np.ndarray] = []
    for _ in range(max_new_tokens):
        sample = context.materialize(cfg, decoded)
        logits, _ = forward(sample, params, cfg)
        last = logits[-1]
        step_logits.append(last)
        tok = int(np.argmax(last))
        decoded.append(tok)
        if tok == EOS:
            break
    return decoded, step_logits


@dataclass
class StructuredDetection:
    verdict: str
    fake_score: float
    caption_ids: list[int]
    reason_ids: list[int]
    raw_ids: list[int]
    malformed: bool = False

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "fake_score": self.fake_score,
            "caption": VOCAB.decode(self.caption_ids),
            "reason": VOCAB.decode(self.reason_ids),
            "raw_tokens": VOCAB.decode(self.raw_ids),
            "malformed": self.malformed,
        }


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def detect(
    image: np.ndarray,
    params: dict[str, nn.Tensor],
    cfg: ModelConfig,
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS,
) -> StructuredDetection:
    """Structured real/fake verdict with a normalized fake score.

    The verdict reads the label slot right after the decoded <detect>
    marker; if the marker never appears, the slot after the first decoded
    token is used and the result is flagged malformed.
    """
    if image.shape != cfg.grid.shape:
        raise ConfigError(f"image shape {image.shape} != grid {cfg.grid.shape}")
    ctx = Context().add_image(image).add_text("prompt", DETECT_PROMPT)
    decoded, step_logits = decode_text(ctx, params, cfg, max_new_tokens)

    malformed = DETECT_TOK not in decoded
    slot = 1 if malformed else decoded.index(DETECT_TOK) + 1
    slot = min(slot, len(step_logits) - 1)
    probs = _softmax(step_logits[slot])
    p_fake, p_real = float(probs[FAKE_ID]), float(probs[REAL_ID])
    score = p_fake / (p_fake + p_real)
    verdict = "fake" if p_fake > p_real else "real"

    caption_ids, reason_ids = [], []
    if CAPTION_TOK in decoded:
        rest = decoded[decoded.index(CAPTION_TOK) + 1:]
        end = rest.index(REASON_TOK) if REASON_TOK in rest else len(rest)
        caption_ids = rest[:end]
    if REASON_TOK in decoded:
        rest = decoded[decoded.index(REASON_TOK) + 1:]
        end = rest.index(EOS) if EOS in rest else len(rest)
        reason_ids = rest[:end]
    return StructuredDetection(verdict, score, caption_ids, reason_ids, decoded, malformed)


def flow_sample(
    condition: Context,
    diag_ids: list[int],
    params: dict[str, nn.Tensor],
    cfg: ModelConfig,
    n_steps: int = DEFAULT_FLOW_STEPS,
    rng: np.random.Generator | None = None,
    z0: np.ndarray | None = None,
    velocity_fn=None,
) -> np.ndarray:
    """Euler integration of the velocity field over the shifted time grid.

    ``velocity_fn(z, t) -> (C,H,W)`` overrides the model (used by the
    sampler-exactness checks); ``z0`` overrides the seeded noise draw.
    """
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
    grid = cfg.grid
    if z0 is None:
        if rng is None:
            rng = np.random.default_rng(0)
        z0 = rng.standard_normal(grid.shape)
    z = z0.astype(np.float64, copy=True)

    taus = shift_time(np.arange(n_steps + 1) / n_steps, cfg.timestep_shift)
    sample = condition.materialize(cfg, diag_ids, with_gen=True) if velocity_fn is None else None
    for k in range(n_steps):
        if velocity_fn is not None:
            v = np.asarray(velocity_fn(z, taus[k]))
        else:
            sites = z.reshape(grid.channels, -1).T
            _, v = forward(sample, params, cfg, t=float(taus[k]), gen_sites=sites)
            v = v.astype(np.float64)
        z = z + (taus[k + 1] - taus[k]) * v
    return np.clip(z, -1.0, 1.0)


@dataclass
class Round:
    diagnosis_ids: list[int]
    image: np.ndarray


@dataclass
class CorrectionTrajectory:
    rounds: list[Round]
    terminated_by: str            # "stop_token" | "max_rounds"
    rounds_used: int

    @property
    def final_image(self) -> np.ndarray:
        return self.rounds[-1].image

    @property
    def single_step_image(self) -> np.ndarray:
        return self.rounds[0].image


def vcot_correct(
    image: np.ndarray,
    params: dict[str, nn.Tensor],
    cfg: ModelConfig,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    n_steps: int = DEFAULT_FLOW_STEPS,
    rng: np.random.Generator | None = None,
) -> CorrectionTrajectory:
    """Iterative diagnose-then-correct with stop-token termination.

    Each round decodes a diagnosis over [Q][image]; a leading stop token
    ends the loop with the image unchanged, otherwise the next image is
    flow-sampled conditioned on the freshly decoded diagnosis.
    """
    if max_rounds < 1:
        raise ConfigError(f"max_rounds must be >= 1, got {max_rounds}")
    if rng is None:
        rng = np.random.default_rng(0)
    current = image
    rounds: list[Round] = []
    terminated_by = "max_rounds"
    for _ in range(max_rounds):
        ctx = Context().add_text("prompt", REPAIR_PROMPT).add_image(current)
        diag, _ = decode_text(ctx, params, cfg, max_new_tokens=DIAGNOSIS_LEN)
        if diag and diag[0] == STOP_TOK:
            rounds.append(Round(diag, current))
            terminated_by = "stop_token"
            break
        nxt = flow_sample(ctx, diag, params, cfg, n_steps=n_steps, rng=rng)
        rounds.append(Round(diag, nxt))
        current = nxt
    return CorrectionTrajectory(rounds, terminated_by, len(rounds))
