"""Caption generation plumbing and quality calibration.

Captions are scored with two components: a clamped image-text cosine
(text semantic quality) and a segmentation-consistency score between the
original image and an image regenerated from the caption (visual recall).
Their mean is the perception score; captions scoring strictly below the
threshold (default 0.6) are dropped.

External models (captioner, text-to-image, segmenter) sit behind adapter
callables. The bundled mocks are pure functions of (seed, input): they
plant category fractions in pixel-intensity bands of the first channel, so
the mock segmenter can read them back and the whole calibration run is
reproducible from the seed alone.
"""

from __future__ import annotations

import base64
import io
import json
import re
import time
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from PIL import Image

from .rng import derive_seed

CATEGORIES = (
    "Person",
    "Bike",
    "Heavy Vehicle",
    "Light Vehicle",
    "Facade",
    "Window & Opening",
    "Road",
    "Sidewalk",
    "Street Furniture",
    "Greenery - Tree",
    "Greenery - Grass & Shrubs",
    "Sky",
    "Nature",
)
NUM_CATEGORIES = len(CATEGORIES)

PROMPT_TEMPLATE = (
    "Analyze the street-view panoramic image in {city} in a comprehensive and "
    "detailed manner. The coordinate of the street-view image is {lon:.4f}, "
    "{lat:.4f}. The segmentation ratio of the street-view image is {segments}."
)

DEFAULT_THRESHOLD = 0.6
_MIN_REPORTED_FRACTION = 1e-3

# Intensity bands in channel 0 that carry the planted category fractions.
BAND_CENTERS = (np.arange(NUM_CATEGORIES) + 0.5) / (NUM_CATEGORIES + 1.0)
BAND_HALF_WIDTH = 0.02
_UNASSIGNED_INTENSITY = 1.0


@dataclass
class SegmentationRatio:
    """Area fractions of the 13 street-view categories."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (NUM_CATEGORIES,):
            raise ValueError(f"expected {NUM_CATEGORIES} fractions, got {self.values.shape}")
        if np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise ValueError("fractions must lie in [0, 1]")
        if self.values.sum() > 1.0 + 1e-9:
            raise ValueError(f"fractions sum to {self.values.sum():.6f} > 1")

    @classmethod
    def from_dict(cls, fractions: dict[str, float]) -> "SegmentationRatio":
        vals = np.zeros(NUM_CATEGORIES)
        for name, frac in fractions.items():
            if name not in CATEGORIES:
                raise ValueError(f"unknown category {name!r}")
            vals[CATEGORIES.index(name)] = frac
        return cls(vals)

    def as_dict(self) -> dict[str, float]:
        return {name: float(v) for name, v in zip(CATEGORIES, self.values)}


# ---------------------------------------------------------------------------
# Prompt construction
# ---------------------------------------------------------------------------


def build_prompt(city: str, lat: float, lon: float, seg: SegmentationRatio) -> str:
    """Instantiate the caption-generation prompt template.

    Coordinates render longitude-first with 4 decimals; segment info lists
    "name: fraction" pairs with 3 decimals in canonical category order,
    omitting categories below 0.001.
    """
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"latitude {lat} out of range [-90, 90]")
    if not -180.0 <= lon <= 180.0:
        raise ValueError(f"longitude {lon} out of range [-180, 180]")
    segments = ", ".join(
        f"{name}: {frac:.3f}"
        for name, frac in zip(CATEGORIES, seg.values)
        if frac >= _MIN_REPORTED_FRACTION
    )
    return PROMPT_TEMPLATE.format(city=city, lon=lon, lat=lat, segments=segments)


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------


def clip_score(z_image: np.ndarray, z_text: np.ndarray, rescale: float = 1.0) -> float:
    """Clamped cosine similarity between image and text embeddings.

    The cosine is clamped below at 0, optionally rescaled, and clamped
    above at 1 so the score lives in [0, 1] alongside the cycle score.
    """
    z_image = np.asarray(z_image, dtype=np.float64)
    z_text = np.asarray(z_text, dtype=np.float64)
    ni, nt = np.linalg.norm(z_image), np.linalg.norm(z_text)
    if ni == 0.0 or nt == 0.0:
        raise ValueError("clip_score is undefined for zero vectors")
    cos = float(np.dot(z_image, z_text) / (ni * nt))
    return min(max(cos, 0.0) * rescale, 1.0)


def cycle_score(seg_original: SegmentationRatio, seg_regenerated: SegmentationRatio) -> float:
    """1 minus the mean absolute difference of the 13 category fractions."""
    mae = float(np.abs(seg_original.values - seg_regenerated.values).mean())
    return 1.0 - mae


# ---------------------------------------------------------------------------
# Adapters
# ---------------------------------------------------------------------------


class Embedder(Protocol):
    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


@dataclass
class ModelAdapters:
    """Pluggable external-model contracts used by the scoring pipeline."""

    image_to_text: Callable[[np.ndarray, str], str]
    text_to_image: Callable[[str], np.ndarray]
    segmenter: Callable[[np.ndarray], SegmentationRatio]


def paint_fraction_image(
    fractions: np.ndarray, height: int = 32, width: int = 32
) -> np.ndarray:
    """Render an image whose channel-0 intensity histogram encodes the
    given category fractions (the planted channel statistics the mock
    segmenter reads)."""
    fractions = np.clip(np.asarray(fractions, dtype=np.float64), 0.0, 1.0)
    total = height * width
    flat = np.full(total, _UNASSIGNED_INTENSITY)
    cursor = 0
    for c in range(NUM_CATEGORIES):
        count = int(round(fractions[c] * total))
        count = min(count, total - cursor)
        flat[cursor: cursor + count] = BAND_CENTERS[c]
        cursor += count
    img = np.empty((height, width, 3))
    img[:, :, 0] = flat.reshape(height, width)
    img[:, :, 1] = 0.5
    img[:, :, 2] = 0.5
    return img


def mock_segmenter(image: np.ndarray) -> SegmentationRatio:
    """Read category fractions back out of the channel-0 intensity bands."""
    chan = np.asarray(image, dtype=np.float64)[:, :, 0].reshape(-1)
    fracs = np.empty(NUM_CATEGORIES)
    for c in range(NUM_CATEGORIES):
        lo = BAND_CENTERS[c] - BAND_HALF_WIDTH
        hi = BAND_CENTERS[c] + BAND_HALF_WIDTH
        fracs[c] = np.count_nonzero((chan >= lo) & (chan <= hi))
    fracs /= chan.size
    return SegmentationRatio(np.minimum(fracs, 1.0))


def mock_caption_from_fractions(fractions: np.ndarray) -> str:
    """Deterministic pseudo-caption naming the dominant categories.

    Dominant categories come first; no boilerplate prefix, so captions of
    different scenes share as few byte tokens as possible.
    """
    order = sorted(
        range(NUM_CATEGORIES), key=lambda c: (-fractions[c], c)
    )
    parts = [
        f"{CATEGORIES[c]}: {fractions[c]:.3f}"
        for c in order
        if fractions[c] >= _MIN_REPORTED_FRACTION
    ]
    if not parts:
        return "No recognizable street elements."
    return ", ".join(parts) + "."


def parse_caption_fractions(text: str) -> np.ndarray:
    """Recover 'name: fraction' mentions from a caption."""
    fracs = np.zeros(NUM_CATEGORIES)
    for c, name in enumerate(CATEGORIES):
        m = re.search(rf"{re.escape(name)}: (\d+(?:\.\d+)?)", text)
        if m:
            fracs[c] = float(m.group(1))
    return fracs


def make_mock_adapters(
    seed: int = 0, noise_sigma: float = 0.01, image_size: tuple[int, int] = (32, 32)
) -> ModelAdapters:
    """Deterministic mock adapters, pure in (seed, input)."""

    def image_to_text(image: np.ndarray, prompt: str) -> str:
        return mock_caption_from_fractions(mock_segmenter(image).values)

    def text_to_image(text: str) -> np.ndarray:
        fracs = parse_caption_fractions(text)
        rng = np.random.default_rng(derive_seed(seed, "text_to_image:" + text))
        noisy = np.clip(fracs + rng.normal(0.0, noise_sigma, size=NUM_CATEGORIES), 0.0, 1.0)
        if noisy.sum() > 1.0:
            noisy *= 1.0 / noisy.sum()
        return paint_fraction_image(noisy, *image_size)

    return ModelAdapters(
        image_to_text=image_to_text,
        text_to_image=text_to_image,
        segmenter=mock_segmenter,
    )


# ---------------------------------------------------------------------------
# Perception scoring
# ---------------------------------------------------------------------------


@dataclass
class CaptionRecord:
    image_id: str
    text: str
    prompt: str
    clip_score: float | None = None
    cycle_score: float | None = None
    perception_score: float | None = None
    status: str = "scored"
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "text": self.text,
            "prompt": self.prompt,
            "clip_score": self.clip_score,
            "cycle_score": self.cycle_score,
            "perception_score": self.perception_score,
            "status": self.status,
        }


def perception_score(
    image: np.ndarray,
    text: str,
    adapters: ModelAdapters,
    embedder: Embedder,
    rescale: float = 1.0,
) -> tuple[float, float, float]:
    """(clip, cycle, perception) for one image/caption pair.

    The caption is rendered back into an image; segmentation consistency
    between original and regenerated image gives the cycle component, the
    clamped embedding cosine gives the clip component, and the perception
    score is exactly their mean.
    """
    regenerated = adapters.text_to_image(text)
    clip = clip_score(embedder.embed_image(image), embedder.embed_text(text), rescale)
    cycle = cycle_score(adapters.segmenter(image), adapters.segmenter(regenerated))
    return clip, cycle, (clip + cycle) / 2.0


def score_caption(
    image_id: str,
    image: np.ndarray,
    text: str,
    prompt: str,
    adapters: ModelAdapters,
    embedder: Embedder,
    rescale: float = 1.0,
) -> CaptionRecord:
    """Score one caption; adapter failures yield an error record, never a
    silent drop."""
    record = CaptionRecord(image_id=image_id, text=text, prompt=prompt)
    try:
        clip, cycle, perception = perception_score(image, text, adapters, embedder, rescale)
    except Exception as exc:  # noqa: BLE001 - adapter boundary
        record.status = "error"
        record.error = f"{type(exc).__name__}: {exc}"
        return record
    record.clip_score = clip
    record.cycle_score = cycle
    record.perception_score = perception
    return record


# ---------------------------------------------------------------------------
# Threshold filtering
# ---------------------------------------------------------------------------


@dataclass
class CalibrationResult:
    kept: list[CaptionRecord]
    dropped: list[CaptionRecord]
    errors: list[CaptionRecord]
    histogram_counts: np.ndarray
    histogram_edges: np.ndarray
    threshold: float

    def summary(self) -> dict:
        return {
            "kept": len(self.kept),
            "dropped": len(self.dropped),
            "errors": len(self.errors),
            "threshold": self.threshold,
        }


def calibrate_dataset(
    records: Sequence[CaptionRecord], threshold: float = DEFAULT_THRESHOLD
) -> CalibrationResult:
    """Partition scored records by the perception threshold.

    A record is dropped iff its score is strictly lower than the threshold
    (boundary scores are kept), so re-calibrating the kept set drops
    nothing. Error records pass through untouched in their own bucket.
    """
    kept, dropped, errors = [], [], []
    scores = []
    for record in records:
        if record.status == "error" or record.perception_score is None:
            errors.append(record)
            continue
        scores.append(record.perception_score)
        if record.perception_score < threshold:
            record.status = "dropped"
            dropped.append(record)
        else:
            record.status = "kept"
            kept.append(record)
    counts, edges = np.histogram(scores, bins=20, range=(0.0, 1.0))
    return CalibrationResult(kept, dropped, errors, counts, edges, threshold)


def write_records(path: str | Path, records: Sequence[CaptionRecord]) -> None:
    """One JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[CaptionRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                doc = json.loads(line)
                records.append(CaptionRecord(**doc))
    return records


def write_histogram_csv(path: str | Path, result: CalibrationResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin_low,bin_high,count\n")
        for i, count in enumerate(result.histogram_counts):
            fh.write(
                f"{result.histogram_edges[i]:.2f},{result.histogram_edges[i + 1]:.2f},{count}\n"
            )


# ---------------------------------------------------------------------------
# Optional HTTP adapter clients
# ---------------------------------------------------------------------------


def image_to_png_b64(image: np.ndarray) -> str:
    arr = (np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).round()
    buf = io.BytesIO()
    Image.fromarray(arr.astype(np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def png_b64_to_image(data: str) -> np.ndarray:
    img = Image.open(io.BytesIO(base64.b64decode(data))).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


class HttpAdapterError(RuntimeError):
    pass


@dataclass
class HttpAdapterClient:
    """JSON-over-HTTP captioner / text-to-image clients.

    Wire format: POST {"image": <base64 PNG>, "prompt": str} -> {"text": str}
    and POST {"text": str} -> {"image": <base64 PNG>}. Failures after the
    configured retries raise HttpAdapterError, which the scoring layer
    converts into error records.
    """

    caption_url: str
    image_url: str
    timeout: float = 10.0
    retries: int = 2

    def _post(self, url: str, payload: dict) -> dict:
        body = json.dumps(payload).encode("utf-8")
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                req = urllib.request.Request(
                    url, data=body, headers={"Content-Type": "application/json"}
                )
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode("utf-8"))
            except Exception as exc:  # noqa: BLE001 - network boundary
                last_error = exc
                if attempt < self.retries:
                    time.sleep(0.05 * (attempt + 1))
        raise HttpAdapterError(f"POST {url} failed after {self.retries + 1} attempts: {last_error}")

    def image_to_text(self, image: np.ndarray, prompt: str) -> str:
        doc = self._post(self.caption_url, {"image": image_to_png_b64(image), "prompt": prompt})
        return str(doc["text"])

    def text_to_image(self, text: str) -> np.ndarray:
        doc = self._post(self.image_url, {"text": text})
        return png_b64_to_image(doc["image"])


def make_http_adapters(
    caption_url: str, image_url: str, timeout: float = 10.0, retries: int = 2
) -> ModelAdapters:
    """Adapters backed by HTTP endpoints; segmentation stays local."""
    client = HttpAdapterClient(caption_url, image_url, timeout=timeout, retries=retries)
    return ModelAdapters(
        image_to_text=client.image_to_text,
        text_to_image=client.text_to_image,
        segmenter=mock_segmenter,
    )
