"""Synthetic city datasets with planted, analytically known structure.

Each region carries a latent factor vector u. Indicators are Y = A u + eps
with a full-rank map A, so the best achievable R-squared per indicator is
known in closed form and stored with the dataset. Images render u through
a city-specific style: channel 0 carries planted segmentation fractions in
intensity bands (readable by the mock segmenter, hence by the caption
mocks), channels 1 and 2 carry smooth intensities driven by u plus
distractor texture. Texts are mock captions of the planted fractions.

Cities generated with independent seeds get independent styles and
indicator maps; passing a shared plant reuses both, which is what makes
cross-city transfer comparable.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .calibration import (
    NUM_CATEGORIES,
    mock_caption_from_fractions,
    paint_fraction_image,
)
from .checkpoint import decode_array, encode_array
from .rng import rng_for

DATASET_MANIFEST = "manifest.json"
DATASET_VERSION = 1

DEFAULT_INDICATOR_PREFIX = "indicator"


@dataclass
class StreetView:
    image: np.ndarray
    lat: float
    lon: float
    text: str


@dataclass
class RegionSample:
    region_id: str
    satellite: np.ndarray
    sat_text: str
    lat: float
    lon: float
    street_views: list[StreetView]
    targets: np.ndarray
    target_present: np.ndarray


@dataclass
class PlantSpec:
    """Shared planted structure: indicator map plus rendering style."""

    indicator_map: np.ndarray  # (K, r)
    frac_mix: np.ndarray  # (NUM_CATEGORIES, r): latent -> segmentation logits
    chan_gain: np.ndarray  # (2, r): latent -> channel mean drivers
    texture_freq: np.ndarray  # (2, 2): per-channel spatial frequencies
    sigma: float

    @property
    def latent_dim(self) -> int:
        return self.indicator_map.shape[1]

    @property
    def num_indicators(self) -> int:
        return self.indicator_map.shape[0]

    def to_json(self) -> dict:
        return {
            "indicator_map": encode_array(self.indicator_map),
            "frac_mix": encode_array(self.frac_mix),
            "chan_gain": encode_array(self.chan_gain),
            "texture_freq": encode_array(self.texture_freq),
            "sigma": self.sigma,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PlantSpec":
        return cls(
            indicator_map=decode_array(doc["indicator_map"]),
            frac_mix=decode_array(doc["frac_mix"]),
            chan_gain=decode_array(doc["chan_gain"]),
            texture_freq=decode_array(doc["texture_freq"]),
            sigma=float(doc["sigma"]),
        )


@dataclass
class PlantInfo:
    """Plant spec plus the per-dataset ground truth it generated."""

    spec: PlantSpec
    latents: np.ndarray  # (L, r)
    r2_ceiling: np.ndarray  # (K,)


@dataclass
class CityDataset:
    city: str
    regions: list[RegionSample]
    indicator_names: list[str]
    split: dict[str, list[int]]
    split_seed: int
    plant: PlantInfo
    image_size: tuple[int, int] = (32, 32)

    def split_indices(self, name: str) -> list[int]:
        return self.split[name]


def make_plant(
    seed: int, num_indicators: int, latent_dim: int, sigma: float
) -> PlantSpec:
    rng = rng_for(seed, "plant")
    a = rng.normal(size=(num_indicators, latent_dim))
    # guard full rank: gaussian matrices are almost surely fine, but verify
    if np.linalg.matrix_rank(a) < min(num_indicators, latent_dim):
        a += np.eye(num_indicators, latent_dim)
    return PlantSpec(
        indicator_map=a,
        frac_mix=rng.normal(size=(NUM_CATEGORIES, latent_dim)),
        chan_gain=rng.normal(size=(2, latent_dim)),
        texture_freq=rng.uniform(1.0, 4.0, size=(2, 2)),
        sigma=sigma,
    )


def planted_fractions(u: np.ndarray, spec: PlantSpec) -> np.ndarray:
    """Softmax mix of the latent factors, scaled so the sum stays below 1."""
    logits = spec.frac_mix @ u / 1.5
    e = np.exp(logits - logits.max())
    return 0.85 * e / e.sum()


def render_image(
    u: np.ndarray,
    spec: PlantSpec,
    distractor_phase: np.ndarray,
    height: int,
    width: int,
) -> np.ndarray:
    """Render a latent vector into an image under the plant's style.

    Channel 0 encodes the planted fractions in intensity bands; channels 1
    and 2 are smooth fills whose means are tanh-squashed projections of u,
    overlaid with low-amplitude distractor texture. Pixel values are
    quantized to 8-bit steps so in-memory and PNG round-tripped data agree
    exactly.
    """
    img = paint_fraction_image(planted_fractions(u, spec), height, width)
    ys, xs = np.mgrid[0:height, 0:width]
    ys = ys / height
    xs = xs / width
    for chan in (1, 2):
        mean = 0.5 + 0.35 * np.tanh(spec.chan_gain[chan - 1] @ u)
        fy, fx = spec.texture_freq[chan - 1]
        texture = 0.15 * np.sin(
            2.0 * np.pi * (fy * ys + fx * xs + distractor_phase[chan - 1])
        )
        img[:, :, chan] = np.clip(mean + texture, 0.0, 1.0)
    return np.round(img * 255.0) / 255.0


def split_dataset(num_regions: int, seed: int) -> dict[str, list[int]]:
    """Uniform random 7:1:2 train/val/test partition."""
    if num_regions < 10:
        raise ValueError(f"need at least 10 regions to split, got {num_regions}")
    rng = rng_for(seed, "split")
    order = rng.permutation(num_regions)
    n_train = int(round(0.7 * num_regions))
    n_val = int(round(0.1 * num_regions))
    return {
        "train": sorted(int(i) for i in order[:n_train]),
        "val": sorted(int(i) for i in order[n_train: n_train + n_val]),
        "test": sorted(int(i) for i in order[n_train + n_val:]),
    }


def generate_synthetic_city(
    seed: int,
    region_count: int = 64,
    m_max: int = 4,
    num_indicators: int = 3,
    latent_dim: int = 3,
    sigma: float = 0.0,
    city: str = "synthcity",
    image_size: tuple[int, int] = (32, 32),
    plant: PlantSpec | None = None,
    split_seed: int | None = None,
) -> CityDataset:
    """Generate a fully synthetic city with known indicator structure.

    ``plant`` may be supplied to share the indicator map and rendering
    style with another city; otherwise both are drawn from the seed.
    """
    if region_count < 10:
        raise ValueError(f"region_count must be at least 10, got {region_count}")
    if m_max < 0 or num_indicators < 1 or latent_dim < 1:
        raise ValueError("invalid generator sizes")
    height, width = image_size
    spec = plant or make_plant(seed, num_indicators, latent_dim, sigma)
    if spec.num_indicators != num_indicators or spec.latent_dim != latent_dim:
        raise ValueError("shared plant dimensions do not match requested sizes")

    rng = rng_for(seed, f"city:{city}")
    latents = rng.normal(size=(region_count, latent_dim))
    noise = rng.normal(0.0, 1.0, size=(region_count, num_indicators))
    targets = latents @ spec.indicator_map.T + spec.sigma * noise

    # Bayes-optimal R^2 per indicator: Var(A_k u) / (Var(A_k u) + sigma^2)
    signal_var = (spec.indicator_map**2).sum(axis=1)
    r2_ceiling = signal_var / (signal_var + spec.sigma**2)

    lat0 = float(rng.uniform(22.0, 42.0))
    lon0 = float(rng.uniform(105.0, 122.0))
    grid = int(np.ceil(np.sqrt(region_count)))

    regions: list[RegionSample] = []
    for i in range(region_count):
        cell_lat = lat0 + 0.01 * (i // grid)
        cell_lon = lon0 + 0.01 * (i % grid)
        sat_phase = rng.uniform(size=2)
        satellite = render_image(latents[i], spec, sat_phase, height, width)
        sat_text = mock_caption_from_fractions(planted_fractions(latents[i], spec))
        views = []
        n_views = int(rng.integers(1, m_max + 1)) if m_max > 0 else 0
        for _ in range(n_views):
            u_view = latents[i] + rng.normal(0.0, 0.15, size=latent_dim)
            view_phase = rng.uniform(size=2)
            image = render_image(u_view, spec, view_phase, height, width)
            views.append(
                StreetView(
                    image=image,
                    lat=cell_lat + float(rng.uniform(-0.004, 0.004)),
                    lon=cell_lon + float(rng.uniform(-0.004, 0.004)),
                    text=mock_caption_from_fractions(planted_fractions(u_view, spec)),
                )
            )
        regions.append(
            RegionSample(
                region_id=f"{city}-{i:04d}",
                satellite=satellite,
                sat_text=sat_text,
                lat=cell_lat,
                lon=cell_lon,
                street_views=views,
                targets=targets[i].copy(),
                target_present=np.ones(num_indicators, dtype=bool),
            )
        )

    split_seed = seed if split_seed is None else split_seed
    return CityDataset(
        city=city,
        regions=regions,
        indicator_names=[f"{DEFAULT_INDICATOR_PREFIX}_{k}" for k in range(num_indicators)],
        split=split_dataset(region_count, split_seed),
        split_seed=split_seed,
        plant=PlantInfo(spec=spec, latents=latents, r2_ceiling=r2_ceiling),
        image_size=image_size,
    )


# ---------------------------------------------------------------------------
# Indicator preprocessing
# ---------------------------------------------------------------------------


@dataclass
class IndicatorTransform:
    """Optional natural log, then per-indicator train-split standardization."""

    log_flags: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    @classmethod
    def fit(
        cls, targets: np.ndarray, log_flags, train_indices
    ) -> "IndicatorTransform":
        targets = np.asarray(targets, dtype=np.float64)
        log_flags = np.asarray(log_flags, dtype=bool)
        if log_flags.shape != (targets.shape[1],):
            raise ValueError("one log flag per indicator required")
        logged = cls._apply_log(targets, log_flags)
        train = logged[np.asarray(train_indices, dtype=int)]
        means = train.mean(axis=0)
        stds = train.std(axis=0)
        stds = np.where(stds == 0.0, 1.0, stds)
        return cls(log_flags=log_flags, means=means, stds=stds)

    @staticmethod
    def _apply_log(targets: np.ndarray, log_flags: np.ndarray) -> np.ndarray:
        out = targets.astype(np.float64).copy()
        for k, flagged in enumerate(log_flags):
            if flagged:
                if np.any(targets[:, k] <= 0.0):
                    raise ValueError(
                        f"indicator {k} has nonpositive values; log transform invalid"
                    )
                out[:, k] = np.log(targets[:, k])
        return out

    def forward(self, targets: np.ndarray) -> np.ndarray:
        logged = self._apply_log(np.asarray(targets, dtype=np.float64), self.log_flags)
        return (logged - self.means) / self.stds

    def inverse(self, transformed: np.ndarray) -> np.ndarray:
        logged = np.asarray(transformed, dtype=np.float64) * self.stds + self.means
        out = logged.copy()
        for k, flagged in enumerate(self.log_flags):
            if flagged:
                out[:, k] = np.exp(logged[:, k])
        return out


# ---------------------------------------------------------------------------
# Disk format
# ---------------------------------------------------------------------------


def _save_png(path: Path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def _load_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_dataset(dataset: CityDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    region_docs = []
    for region in dataset.regions:
        rdir = out / "regions" / region.region_id
        rdir.mkdir(parents=True, exist_ok=True)
        _save_png(rdir / "satellite.png", region.satellite)
        (rdir / "satellite.txt").write_text(region.sat_text, encoding="utf-8")
        view_docs = []
        for j, view in enumerate(region.street_views):
            _save_png(rdir / f"streetview_{j:02d}.png", view.image)
            (rdir / f"streetview_{j:02d}.txt").write_text(view.text, encoding="utf-8")
            view_docs.append({"lat": view.lat, "lon": view.lon})
        region_docs.append(
            {
                "id": region.region_id,
                "lat": region.lat,
                "lon": region.lon,
                "street_views": view_docs,
                "target_present": [bool(p) for p in region.target_present],
            }
        )
    with open(out / "targets.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id", "indicator_name", "value"])
        for region in dataset.regions:
            for name, value in zip(dataset.indicator_names, region.targets):
                writer.writerow([region.region_id, name, repr(float(value))])
    manifest = {
        "version": DATASET_VERSION,
        "city": dataset.city,
        "image_size": list(dataset.image_size),
        "indicator_names": dataset.indicator_names,
        "split": dataset.split,
        "split_seed": dataset.split_seed,
        "regions": region_docs,
        "plant": {
            "spec": dataset.plant.spec.to_json(),
            "latents": encode_array(dataset.plant.latents),
            "r2_ceiling": encode_array(dataset.plant.r2_ceiling),
        },
    }
    (out / DATASET_MANIFEST).write_text(
        json.dumps(manifest, sort_keys=True), encoding="utf-8"
    )


def load_dataset(in_dir: str | Path) -> CityDataset:
    root = Path(in_dir)
    manifest_path = root / DATASET_MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {manifest.get('version')!r}")
    indicator_names = manifest["indicator_names"]
    targets: dict[str, dict[str, float]] = {}
    with open(root / "targets.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            targets.setdefault(row["region_id"], {})[row["indicator_name"]] = float(
                row["value"]
            )
    regions = []
    for doc in manifest["regions"]:
        rdir = root / "regions" / doc["id"]
        views = []
        for j, vdoc in enumerate(doc["street_views"]):
            views.append(
                StreetView(
                    image=_load_png(rdir / f"streetview_{j:02d}.png"),
                    lat=vdoc["lat"],
                    lon=vdoc["lon"],
                    text=(rdir / f"streetview_{j:02d}.txt").read_text(encoding="utf-8"),
                )
            )
        regions.append(
            RegionSample(
                region_id=doc["id"],
                satellite=_load_png(rdir / "satellite.png"),
                sat_text=(rdir / "satellite.txt").read_text(encoding="utf-8"),
                lat=doc["lat"],
                lon=doc["lon"],
                street_views=views,
                targets=np.array([targets[doc["id"]][n] for n in indicator_names]),
                target_present=np.array(doc["target_present"], dtype=bool),
            )
        )
    plant = PlantInfo(
        spec=PlantSpec.from_json(manifest["plant"]["spec"]),
        latents=decode_array(manifest["plant"]["latents"]),
        r2_ceiling=decode_array(manifest["plant"]["r2_ceiling"]),
    )
    return CityDataset(
        city=manifest["city"],
        regions=regions,
        indicator_names=indicator_names,
        split={k: list(v) for k, v in manifest["split"].items()},
        split_seed=manifest["split_seed"],
        plant=plant,
        image_size=tuple(manifest["image_size"]),
    )


def dataset_targets(dataset: CityDataset) -> np.ndarray:
    return np.stack([r.targets for r in dataset.regions])
