"""Correction tuples, detection samples, training-sequence assembly, JSONL io.

A training sample is an interleaved multimodal sequence built from
contiguous segments. Four segment kinds exist:

* ``prompt``   - instruction text, never supervised
* ``answer``   - text that may carry AR supervision (diagnosis, stop,
                 detection answer)
* ``img_cond`` - a conditioning image, one token per grid site
* ``img_gen``  - the generated-image block; token values are filled with
                 the noised latent at train/sample time

Per-token AR and FM loss masks are fixed at assembly; the flow-matching
mask covers exactly the img_gen block. ``cond_len`` is the index of the
first supervised token.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .toyworld import (
    CATEGORIES,
    DETECT_PROMPT,
    MAGNITUDES,
    REGIONS,
    REPAIR_PROMPT,
    ArtifactSpec,
    GridConfig,
    VOCAB,
    gen_clean,
    inject_artifact,
    region_rmse,
    render_detection_answer,
    render_diagnosis,
    render_termination,
)

SCHEMA_VERSION = 1

MOD_TEXT, MOD_IMG_COND, MOD_IMG_GEN = 0, 1, 2
KINDS = ("prompt", "answer", "img_cond", "img_gen")
KIND_INDEX = {k: i for i, k in enumerate(KINDS)}

TASKS = ("detect", "s1_correct", "vcot_initial", "vcot_intermediate", "vcot_terminate")

DEFAULT_MID_ALPHAS = (1.0 / 3.0, 2.0 / 3.0)

# split codes folded into per-record seed derivation
_SPLIT_TRAIN_DETECT = 0
_SPLIT_TRAIN_CORRECT = 1
_SPLIT_TEST_DETECT = 2
_SPLIT_TEST_CORRECT = 3
_SPLIT_CALIBRATION = 4
_TUPLE_SPEC_SALT = 0x5EED


@dataclass(frozen=True)
class Segment:
    kind: str
    start: int
    length: int


@dataclass
class MultimodalSequence:
    text_ids: np.ndarray      # [L] int64; <pad> id at image positions
    modality: np.ndarray      # [L] int8, MOD_* values
    site: np.ndarray          # [L] int64; i*W+j for image tokens, 0 for text
    segment_id: np.ndarray    # [L] int32
    segments: list[Segment]
    ar_loss_mask: np.ndarray  # [L] bool, marks supervised target positions
    fm_loss_mask: np.ndarray  # [L] bool, true exactly on img_gen tokens
    cond_len: int

    def __len__(self) -> int:
        return len(self.text_ids)


class SequenceBuilder:
    """Append segments in order, then build a MultimodalSequence."""

    def __init__(self, cfg: GridConfig) -> None:
        self.cfg = cfg
        self._text: list[int] = []
        self._modality: list[int] = []
        self._site: list[int] = []
        self._seg_id: list[int] = []
        self._ar: list[bool] = []
        self._fm: list[bool] = []
        self.segments: list[Segment] = []

    def _extend(self, kind, text, modality, site, ar, fm, n):
        start = len(self._text)
        self.segments.append(Segment(kind, start, n))
        sid = len(self.segments) - 1
        self._text.extend(text)
        self._modality.extend([modality] * n)
        self._site.extend(site)
        self._seg_id.extend([sid] * n)
        self._ar.extend(ar)
        self._fm.extend(fm)

    def add_text(self, kind: str, ids: list[int], supervised: bool = False) -> None:
        n = len(ids)
        self._extend(kind, ids, MOD_TEXT, [0] * n, [supervised] * n, [False] * n, n)

    def add_image(self, kind: str) -> None:
        n = self.cfg.n_sites
        modality = MOD_IMG_COND if kind == "img_cond" else MOD_IMG_GEN
        fm = kind == "img_gen"
        self._extend(kind, [0] * n, modality, list(range(n)), [False] * n, [fm] * n, n)

    def build(self) -> MultimodalSequence:
        ar = np.array(self._ar, dtype=bool)
        fm = np.array(self._fm, dtype=bool)
        supervised = np.flatnonzero(ar | fm)
        cond_len = int(supervised[0]) if supervised.size else len(self._text)
        return MultimodalSequence(
            text_ids=np.array(self._text, dtype=np.int64),
            modality=np.array(self._modality, dtype=np.int8),
            site=np.array(self._site, dtype=np.int64),
            segment_id=np.array(self._seg_id, dtype=np.int32),
            segments=list(self.segments),
            ar_loss_mask=ar,
            fm_loss_mask=fm,
            cond_len=cond_len,
        )


@dataclass(eq=False)
class CorrectionTuple:
    artifact_image: np.ndarray
    diag_ids: list[int]
    mid_images: list[np.ndarray]
    correct_image: np.ndarray
    stop_ids: list[int]
    spec: ArtifactSpec
    mask: np.ndarray
    index: int = 0

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, CorrectionTuple)
            and np.array_equal(self.artifact_image, other.artifact_image)
            and self.diag_ids == other.diag_ids
            and len(self.mid_images) == len(other.mid_images)
            and all(np.array_equal(a, b) for a, b in zip(self.mid_images, other.mid_images))
            and np.array_equal(self.correct_image, other.correct_image)
            and self.stop_ids == other.stop_ids
            and self.spec == other.spec
            and np.array_equal(self.mask, other.mask)
            and self.index == other.index
        )


@dataclass(eq=False)
class DetectionSample:
    image: np.ndarray
    label: str
    answer_ids: list[int]
    spec: ArtifactSpec | None = None
    index: int = 0

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, DetectionSample)
            and np.array_equal(self.image, other.image)
            and self.label == other.label
            and self.answer_ids == other.answer_ids
            and self.spec == other.spec
            and self.index == other.index
        )


@dataclass
class TrainSample:
    seq: MultimodalSequence
    task: str
    cond_images: list[np.ndarray]          # aligned with img_cond segments
    fm_target: np.ndarray | None = None    # (C,H,W) target for flow matching


def _record_rng(base_seed: int, split: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), split, int(index)]))


def _draw_spec(rng: np.random.Generator) -> ArtifactSpec:
    return ArtifactSpec(
        category=CATEGORIES[int(rng.integers(len(CATEGORIES)))],
        region=REGIONS[int(rng.integers(len(REGIONS)))],
        magnitude=MAGNITUDES[int(rng.integers(len(MAGNITUDES)))],
        seed=int(rng.integers(1 << 62)),
    )


def build_correction_tuple(
    seed: int,
    cfg: GridConfig = GridConfig(),
    alphas: tuple[float, ...] = DEFAULT_MID_ALPHAS,
    index: int = 0,
) -> CorrectionTuple:
    """Clean source, injected artifact, interpolated mids, and both texts."""
    clean = gen_clean(seed, cfg)
    spec = _draw_spec(np.random.default_rng(np.random.SeedSequence([int(seed), _TUPLE_SPEC_SALT])))
    artifact, mask = inject_artifact(clean, spec, cfg)
    mids = [artifact + a * (clean - artifact) for a in alphas]
    return CorrectionTuple(
        artifact_image=artifact,
        diag_ids=render_diagnosis(spec),
        mid_images=mids,
        correct_image=clean,
        stop_ids=render_termination(),
        spec=spec,
        mask=mask,
        index=index,
    )


def build_detection_sample(
    base_seed: int, split: int, index: int, cfg: GridConfig = GridConfig()
) -> DetectionSample:
    """Balanced by index parity: even -> real, odd -> fake."""
    rng = _record_rng(base_seed, split, index)
    img_seed = int(rng.integers(1 << 62))
    clean = gen_clean(img_seed, cfg)
    if index % 2 == 0:
        return DetectionSample(clean, "real", render_detection_answer("real"), None, index)
    spec = _draw_spec(rng)
    corrupted, _ = inject_artifact(clean, spec, cfg)
    return DetectionSample(corrupted, "fake", render_detection_answer("fake", spec), spec, index)


def quality_filter(
    candidate: np.ndarray,
    clean: np.ndarray,
    mask: np.ndarray,
    tau_keep: float,
) -> tuple[bool, str | None]:
    """Accept a candidate restoration; reject incomplete repair or drift.

    Clause (a): RMSE inside the artifact region must be <= tau_keep.
    Clause (b): RMSE outside the region must be <= tau_keep.
    """
    if candidate.shape != clean.shape:
        raise DataFormatError(
            f"quality_filter: shape {candidate.shape} vs {clean.shape}")
    if region_rmse(candidate, clean, mask) > tau_keep:
        return False, "incomplete"
    if region_rmse(candidate, clean, ~mask) > tau_keep:
        return False, "drift"
    return True, None


def calibrate_thresholds(
    base_seed: int, cfg: GridConfig = GridConfig(), n: int = 100
) -> dict:
    """Per-category RMSE thresholds from a deterministic calibration sweep.

    A perfect restoration has region RMSE exactly 0, so each threshold is
    the midpoint between 0 and the smallest raw-corruption RMSE observed
    for that category; tau_keep is the midpoint over all categories.
    """
    per_cat: dict[str, list[float]] = {c: [] for c in CATEGORIES}
    for i in range(n):
        rng = _record_rng(base_seed, _SPLIT_CALIBRATION, i)
        img_seed = int(rng.integers(1 << 62))
        clean = gen_clean(img_seed, cfg)
        spec = ArtifactSpec(
            category=CATEGORIES[i % 3],
            region=REGIONS[(i // 3) % 4],
            magnitude=MAGNITUDES[(i // 12) % 2],
            seed=int(rng.integers(1 << 62)),
        )
        corrupted, mask = inject_artifact(clean, spec, cfg)
        per_cat[spec.category].append(region_rmse(corrupted, clean, mask))
    thresholds = {c: min(v) / 2.0 for c, v in per_cat.items()}
    return {
        "category_thresholds": thresholds,
        "tau_keep": min(thresholds.values()),
        "calibration_runs": n,
    }


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def assemble(item, state: str, cfg: GridConfig = GridConfig(), mid_index: int = 0) -> TrainSample:
    """Turn a DetectionSample or CorrectionTuple into a masked TrainSample."""
    b = SequenceBuilder(cfg)
    if state == "detect":
        b.add_image("img_cond")
        b.add_text("prompt", DETECT_PROMPT)
        b.add_text("answer", item.answer_ids, supervised=True)
        return TrainSample(b.build(), state, [item.image], None)
    if state == "s1_correct":
        b.add_image("img_cond")
        b.add_text("answer", item.diag_ids)
        b.add_image("img_gen")
        return TrainSample(b.build(), state, [item.artifact_image], item.correct_image)
    if state == "vcot_initial":
        b.add_text("prompt", REPAIR_PROMPT)
        b.add_image("img_cond")
        b.add_text("answer", item.diag_ids, supervised=True)
        b.add_image("img_gen")
        return TrainSample(b.build(), state, [item.artifact_image], item.correct_image)
    if state == "vcot_intermediate":
        b.add_text("prompt", REPAIR_PROMPT)
        b.add_image("img_cond")
        b.add_image("img_gen")
        return TrainSample(
            b.build(), state, [item.mid_images[mid_index]], item.correct_image)
    if state == "vcot_terminate":
        b.add_text("prompt", REPAIR_PROMPT)
        b.add_image("img_cond")
        b.add_text("answer", item.stop_ids, supervised=True)
        b.add_image("img_gen")
        return TrainSample(b.build(), state, [item.correct_image], item.correct_image)
    raise ConfigError(f"unknown assembly state {state!r}")


# ---------------------------------------------------------------------------
# JSONL serialization
# ---------------------------------------------------------------------------

def _require(d: dict, path: str, line_no: int | None = None):
    cur = d
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            where = f"line {line_no}: " if line_no is not None else ""
            raise DataFormatError(f"{where}missing field {path}")
        cur = cur[part]
    return cur


def _spec_from(d: dict, line_no: int | None) -> ArtifactSpec:
    return ArtifactSpec(
        category=_require(d, "spec.category", line_no),
        region=_require(d, "spec.region", line_no),
        magnitude=_require(d, "spec.magnitude", line_no),
        seed=int(_require(d, "spec.seed", line_no)),
    )


def serialize_detection(s: DetectionSample) -> str:
    rec = {
        "index": s.index,
        "label": s.label,
        "image": s.image.tolist(),
        "answer_ids": list(s.answer_ids),
        "spec": s.spec.to_dict() if s.spec is not None else None,
    }
    return json.dumps(rec, separators=(",", ":"))


def parse_detection(line: str, line_no: int | None = None) -> DetectionSample:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"line {line_no}: invalid JSON ({e.msg})") from None
    label = _require(d, "label", line_no)
    spec = _spec_from(d, line_no) if d.get("spec") is not None else None
    if label == "fake" and spec is None:
        raise DataFormatError(f"line {line_no}: missing field spec")
    return DetectionSample(
        image=np.asarray(_require(d, "image", line_no), dtype=np.float64),
        label=label,
        answer_ids=[int(t) for t in _require(d, "answer_ids", line_no)],
        spec=spec,
        index=int(_require(d, "index", line_no)),
    )


def serialize_correction(t: CorrectionTuple) -> str:
    rec = {
        "index": t.index,
        "spec": t.spec.to_dict(),
        "artifact_image": t.artifact_image.tolist(),
        "diag_ids": list(t.diag_ids),
        "mid_images": [m.tolist() for m in t.mid_images],
        "correct_image": t.correct_image.tolist(),
        "stop_ids": list(t.stop_ids),
        "mask": t.mask.astype(int).tolist(),
    }
    return json.dumps(rec, separators=(",", ":"))


def parse_correction(line: str, line_no: int | None = None) -> CorrectionTuple:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"line {line_no}: invalid JSON ({e.msg})") from None
    return CorrectionTuple(
        artifact_image=np.asarray(_require(d, "artifact_image", line_no), dtype=np.float64),
        diag_ids=[int(t) for t in _require(d, "diag_ids", line_no)],
        mid_images=[np.asarray(m, dtype=np.float64) for m in _require(d, "mid_images", line_no)],
        correct_image=np.asarray(_require(d, "correct_image", line_no), dtype=np.float64),
        stop_ids=[int(t) for t in _require(d, "stop_ids", line_no)],
        spec=_spec_from(d, line_no),
        mask=np.asarray(_require(d, "mask", line_no), dtype=bool),
        index=int(_require(d, "index", line_no)),
    )


def _load_jsonl(path: str | Path, parse) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if line:
                out.append(parse(line, line_no))
    return out


def load_detection(path: str | Path) -> list[DetectionSample]:
    return _load_jsonl(path, parse_detection)


def load_correction(path: str | Path) -> list[CorrectionTuple]:
    return _load_jsonl(path, parse_correction)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    n_train: int = 4000
    n_test: int = 500
    n_train_correct: int | None = None   # defaults to n_train // 4
    n_test_correct: int | None = None    # defaults to min(n_test, 200)
    seed: int = 0
    grid: GridConfig = field(default_factory=GridConfig)
    n_mid: int = 2
    calibration_runs: int = 100

    @property
    def alphas(self) -> tuple[float, ...]:
        return tuple((k + 1) / (self.n_mid + 1) for k in range(self.n_mid))

    def resolved_counts(self) -> dict[str, int]:
        return {
            "train_detect": self.n_train,
            "train_correct": self.n_train_correct if self.n_train_correct is not None
            else max(1, self.n_train // 4),
            "test_detect": self.n_test,
            "test_correct": self.n_test_correct if self.n_test_correct is not None
            else min(self.n_test, 200),
        }


def _regen_mids(tup: CorrectionTuple, mid_generator, tau_keep: float) -> None:
    """Replace interpolated mids with model-generated ones where admissible.

    A generated mid must stay between artifact and correct in region RMSE
    and must not drift outside the region; otherwise the interpolated mid
    is kept.
    """
    rmse_artifact = region_rmse(tup.artifact_image, tup.correct_image, tup.mask)
    candidates = mid_generator(tup)
    for i, cand in enumerate(candidates[: len(tup.mid_images)]):
        r = region_rmse(cand, tup.correct_image, tup.mask)
        drift = region_rmse(cand, tup.correct_image, ~tup.mask)
        if 0.0 < r < rmse_artifact and drift <= tau_keep:
            tup.mid_images[i] = cand


def generate_datasets(
    out_dir: str | Path,
    cfg: DatasetConfig,
    mid_generator=None,
) -> dict:
    """Write the four JSONL splits, vocab.json, and manifest.json.

    Record i of each split derives all randomness from (seed, split, i),
    so regeneration is reproducible and order-independent.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = cfg.resolved_counts()
    calib = calibrate_thresholds(cfg.seed, cfg.grid, cfg.calibration_runs)

    with open(out / "train_detect.jsonl", "w", encoding="utf-8") as f:
        for i in range(counts["train_detect"]):
            f.write(serialize_detection(
                build_detection_sample(cfg.seed, _SPLIT_TRAIN_DETECT, i, cfg.grid)) + "\n")
    with open(out / "test_detect.jsonl", "w", encoding="utf-8") as f:
        for i in range(counts["test_detect"]):
            f.write(serialize_detection(
                build_detection_sample(cfg.seed, _SPLIT_TEST_DETECT, i, cfg.grid)) + "\n")

    for split_code, name, n in (
        (_SPLIT_TRAIN_CORRECT, "train_correct.jsonl", counts["train_correct"]),
        (_SPLIT_TEST_CORRECT, "test_correct.jsonl", counts["test_correct"]),
    ):
        with open(out / name, "w", encoding="utf-8") as f:
            for i in range(n):
                rng = _record_rng(cfg.seed, split_code, i)
                tup = build_correction_tuple(
                    int(rng.integers(1 << 62)), cfg.grid, cfg.alphas, index=i)
                if mid_generator is not None:
                    _regen_mids(tup, mid_generator, calib["tau_keep"])
                f.write(serialize_correction(tup) + "\n")

    VOCAB.dump(out / "vocab.json")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "grid": {"channels": cfg.grid.channels, "height": cfg.grid.height, "width": cfg.grid.width},
        "counts": counts,
        "base_seed": cfg.seed,
        "n_mid": cfg.n_mid,
        "mid_alphas": list(cfg.alphas),
        "mid_source": "interpolation" if mid_generator is None else "checkpoint",
        "tau_keep": calib["tau_keep"],
        "category_thresholds": calib["category_thresholds"],
        "calibration_runs": calib["calibration_runs"],
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise DataFormatError(f"no manifest.json in {data_dir}")
    with open(path, "r", encoding="utf-8") as f:
        m = json.load(f)
    if m.get("schema_version") != SCHEMA_VERSION:
        raise DataFormatError(
            f"manifest schema_version {m.get('schema_version')} != {SCHEMA_VERSION}")
    return m


def grid_from_manifest(manifest: dict) -> GridConfig:
    g = manifest["grid"]
    return GridConfig(channels=g["channels"], height=g["height"], width=g["width"])
