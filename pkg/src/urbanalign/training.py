"""Stage 1 pretraining, frozen feature extraction, Stage 2 linear probing,
and the cross-city transfer harness."""

from __future__ import annotations

import dataclasses
import hashlib
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import alignment as al
from . import autodiff as ad
from . import encoders as enc
from .autodiff import Tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .errors import DataError, NumericalError
from .metrics import MetricTriple, evaluate_per_indicator
from .optim import Adam
from .rng import rng_for
from .synthdata import CityDataset, IndicatorTransform, RegionSample, dataset_targets


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------


class PretrainModel:
    """All encoder and alignment parameters for one pretraining run."""

    def __init__(
        self,
        vit_cfg: enc.VitConfig,
        text_cfg: enc.TextConfig,
        loc_cfg: enc.LocationConfig,
        fusion_mode: str,
        seed: int,
        tau: float = 0.07,
        learnable_tau: bool = False,
    ):
        self.vit_cfg = vit_cfg
        self.text_cfg = text_cfg
        self.loc_cfg = loc_cfg
        self.seed = seed
        self.tau = tau
        self.image = enc.ImageEncoderParams.create(vit_cfg, rng_for(seed, "image_encoder"))
        self.text = enc.TextEncoderParams.create(text_cfg, rng_for(seed, "text_encoder"))
        self.location = enc.LocationEncoderParams.create(loc_cfg)
        self.sv_agg = al.AggregatorParams.create(vit_cfg.dim, rng_for(seed, "sv_aggregator"))
        self.loc_agg = al.AggregatorParams.create(vit_cfg.dim, rng_for(seed, "loc_aggregator"))
        self.fusion = al.FusionParams.create(fusion_mode, vit_cfg.dim, rng_for(seed, "fusion"))
        self.log_tau = ad.parameter(np.asarray(math.log(tau))) if learnable_tau else None

    # -- parameters -------------------------------------------------------

    def named_parameters(self):
        yield from self.image.named("image")
        yield from self.text.named("text")
        yield from self.sv_agg.named("sv_agg")
        yield from self.loc_agg.named("loc_agg")
        yield from self.fusion.named("fusion")
        if self.log_tau is not None:
            yield "log_tau", self.log_tau

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def temperature(self) -> float | Tensor:
        if self.log_tau is not None:
            return ad.exp(self.log_tau)
        return self.tau

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(tensor.values.tobytes())
        for arr in (self.location.freq, self.location.w1, self.location.b1,
                    self.location.w2, self.location.b2):
            h.update(arr.tobytes())
        return h.hexdigest()

    # -- forward passes ----------------------------------------------------

    def encode_region_image(self, image: np.ndarray) -> tuple[Tensor, Tensor]:
        conformed = enc.conform_image(image, self.vit_cfg.height, self.vit_cfg.width)
        return enc.encode_image(conformed, self.image, self.vit_cfg)

    def encode_text_ids(self, ids: list[int]) -> tuple[Tensor, Tensor]:
        return enc.encode_text(ids, self.text, self.text_cfg)

    def encode_caption(self, text: str) -> tuple[Tensor, Tensor]:
        return self.encode_text_ids(enc.tokenize(text, self.text_cfg.max_len))

    def region_embedding(self, region: RegionSample, sv_cap: int) -> Tensor:
        """Fused region embedding (pre-normalization), per the fusion mode."""
        sat_global, _ = self.encode_region_image(region.satellite)
        views = region.street_views[:sv_cap]
        sv_globals = [self.encode_region_image(v.image)[0] for v in views]
        loc_feats = [enc.encode_location(v.lat, v.lon, self.location) for v in views]
        mask = [True] * len(views)
        e_sv = al.aggregate(sv_globals, mask, self.sv_agg)
        e_p = al.aggregate(loc_feats, mask, self.loc_agg)
        return al.fuse(sat_global, e_sv, e_p, self.fusion)

    # -- calibration embedder contract -------------------------------------

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        with ad.no_recording():
            return self.encode_region_image(image)[0].values

    def embed_text(self, text: str) -> np.ndarray:
        with ad.no_recording():
            return self.encode_caption(text)[0].values

    # -- persistence --------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        arrays = {name: t.values for name, t in self.named_parameters()}
        for name in ("freq", "w1", "b1", "w2", "b2"):
            arrays[f"location.{name}"] = getattr(self.location, name)
        configs = {
            "vit": dataclasses.asdict(self.vit_cfg),
            "text": dataclasses.asdict(self.text_cfg),
            "location": dataclasses.asdict(self.loc_cfg),
            "fusion_mode": self.fusion.mode,
            "tau": self.tau,
            "learnable_tau": self.log_tau is not None,
            "seed": self.seed,
        }
        save_checkpoint(path, Checkpoint(configs=configs, arrays=arrays, extra=extra or {}))

    @classmethod
    def load(cls, path) -> tuple["PretrainModel", dict]:
        ckpt = load_checkpoint(path)
        cfg = ckpt.configs
        model = cls(
            vit_cfg=enc.VitConfig(**cfg["vit"]),
            text_cfg=enc.TextConfig(**cfg["text"]),
            loc_cfg=enc.LocationConfig(**cfg["location"]),
            fusion_mode=cfg["fusion_mode"],
            seed=cfg["seed"],
            tau=cfg["tau"],
            learnable_tau=cfg["learnable_tau"],
        )
        enc.assign_named_values(model.named_parameters(), ckpt.arrays)
        for name in ("freq", "w1", "b1", "w2", "b2"):
            setattr(model.location, name, ckpt.arrays[f"location.{name}"].copy())
        return model, ckpt.extra


def model_from_config(config: TrainConfig, image_size: tuple[int, int], channels: int = 3) -> PretrainModel:
    height, width = image_size
    vit_cfg = enc.VitConfig(
        height=height, width=width, channels=channels, patch=config.patch,
        dim=config.dim, layers=config.enc_layers, heads=config.heads,
    )
    text_cfg = enc.TextConfig(
        dim=config.dim, layers=config.enc_layers, heads=config.heads,
        max_len=config.text_max_len,
    )
    loc_cfg = enc.LocationConfig(dim=config.dim)
    return PretrainModel(
        vit_cfg, text_cfg, loc_cfg, config.fusion, config.seed,
        tau=config.tau, learnable_tau=config.learnable_tau,
    )


# ---------------------------------------------------------------------------
# Stage 1: pretraining
# ---------------------------------------------------------------------------


@dataclass
class StepLoss:
    step: int
    epoch: int
    l_cg: float
    l_cl: float
    total: float


@dataclass
class PretrainResult:
    model: PretrainModel
    losses: list[StepLoss]
    rng_states: dict


def _augment_image(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random square-ish crop (80-100% per side) resized back to full shape."""
    h, w = image.shape[0], image.shape[1]
    fraction = rng.uniform(0.8, 1.0)
    ch, cw = max(1, int(round(h * fraction))), max(1, int(round(w * fraction)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return enc.conform_image(image[top: top + ch, left: left + cw], h, w)


def pretrain(
    dataset: CityDataset,
    config: TrainConfig,
    max_steps: int | None = None,
    progress: bool = False,
) -> PretrainResult:
    """Jointly optimize the global and local contrastive objectives.

    Deterministic in (dataset, config): all randomness comes from streams
    derived from ``config.seed``. A non-finite loss aborts with the
    offending step index.
    """
    train_idx = dataset.split_indices("train")
    if not train_idx:
        raise DataError("train split is empty")
    model = model_from_config(config, dataset.image_size)
    optimizer = Adam(model.parameters(), lr=config.lr)
    batch_rng = rng_for(config.seed, "batching")
    local_rng = rng_for(config.seed, "local_batch")
    aug_rng = rng_for(config.seed, "augment")

    losses: list[StepLoss] = []
    step = 0
    done = False
    for epoch in range(config.pretrain_epochs):
        if done:
            break
        order = [train_idx[i] for i in batch_rng.permutation(len(train_idx))]
        for start in range(0, len(order), config.batch_size):
            batch = [dataset.regions[i] for i in order[start: start + config.batch_size]]
            if len(batch) < 2:
                continue  # contrastive loss is undefined on a single region
            step += 1
            ad.reset_tape()

            regions = batch
            if config.augment:
                regions = [
                    RegionSample(
                        region_id=r.region_id,
                        satellite=_augment_image(r.satellite, aug_rng),
                        sat_text=r.sat_text,
                        lat=r.lat,
                        lon=r.lon,
                        street_views=r.street_views,
                        targets=r.targets,
                        target_present=r.target_present,
                    )
                    for r in batch
                ]

            fused = [model.region_embedding(r, config.sv_cap) for r in regions]
            text_globals = [model.encode_caption(r.sat_text)[0] for r in regions]
            i_g = ad.l2_normalize_rows(ad.stack_rows(fused))
            t_g = ad.l2_normalize_rows(ad.stack_rows(text_globals))
            tau = model.temperature()
            l_cg = al.global_contrastive_loss(i_g, t_g, tau)

            pairs = [
                (region, view)
                for region in regions
                for view in region.street_views[: config.sv_cap]
            ]
            if len(pairs) > config.local_batch_cap:
                chosen = sorted(
                    local_rng.choice(len(pairs), size=config.local_batch_cap, replace=False)
                )
                pairs = [pairs[i] for i in chosen]
            if len(pairs) >= 2:
                view_tokens = [
                    ad.l2_normalize_rows(model.encode_region_image(v.image)[1])
                    for _, v in pairs
                ]
                text_tokens = [
                    ad.l2_normalize_rows(model.encode_caption(v.text)[1])
                    for _, v in pairs
                ]
                l_cl = al.local_contrastive_loss(view_tokens, text_tokens, tau)
            else:
                l_cl = ad.constant(np.asarray(0.0))

            total = al.total_loss(l_cg, l_cl, config.alpha, config.beta)
            if not np.isfinite(total.values):
                raise NumericalError(f"non-finite loss at step {step} (epoch {epoch})")
            ad.backward(total)
            optimizer.step()
            optimizer.zero_grad()
            losses.append(
                StepLoss(step, epoch, float(l_cg.values), float(l_cl.values), float(total.values))
            )
            if progress:
                print(f"step {step} epoch {epoch} "
                      f"l_cg {float(l_cg.values):.4f} l_cl {float(l_cl.values):.4f} "
                      f"total {float(total.values):.4f}")
            if max_steps is not None and step >= max_steps:
                done = True
                break
    ad.reset_tape()
    rng_states = {
        "batching": batch_rng.bit_generator.state,
        "local_batch": local_rng.bit_generator.state,
        "augment": aug_rng.bit_generator.state,
    }
    return PretrainResult(model=model, losses=losses, rng_states=rng_states)


def retrieval_top1(model: PretrainModel, dataset: CityDataset, indices, sv_cap: int) -> float:
    """Train-set image-to-text retrieval accuracy over the given regions."""
    with ad.no_recording():
        fused = np.stack(
            [model.region_embedding(dataset.regions[i], sv_cap).values for i in indices]
        )
        texts = np.stack(
            [model.encode_caption(dataset.regions[i].sat_text)[0].values for i in indices]
        )
    fused /= np.linalg.norm(fused, axis=1, keepdims=True)
    texts /= np.linalg.norm(texts, axis=1, keepdims=True)
    hits = (fused @ texts.T).argmax(axis=1) == np.arange(len(indices))
    return float(hits.mean())


# ---------------------------------------------------------------------------
# Stage 2: frozen features + probe
# ---------------------------------------------------------------------------


def extract_features(
    region: RegionSample, model: PretrainModel, sv_cap: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(e_st, e_sv, e_p) for one region with encoders frozen.

    Regions with no street views get zero vectors for the aggregated
    street-view and location features.
    """
    with ad.no_recording():
        e_st = model.encode_region_image(region.satellite)[0].values
        views = region.street_views[:sv_cap]
        sv_globals = [model.encode_region_image(v.image)[0] for v in views]
        loc_feats = [enc.encode_location(v.lat, v.lon, model.location) for v in views]
        mask = [True] * len(views)
        e_sv = al.aggregate(sv_globals, mask, model.sv_agg).values
        e_p = al.aggregate(loc_feats, mask, model.loc_agg).values
    return e_st, e_sv, e_p


def dataset_features(
    dataset: CityDataset, model: PretrainModel, sv_cap: int, threads: int = 1
) -> np.ndarray:
    """Concatenated (e_st, e_sv, e_p) feature matrix for every region."""

    def one(region):
        return np.concatenate(extract_features(region, model, sv_cap))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, dataset.regions))
    else:
        rows = [one(r) for r in dataset.regions]
    return np.stack(rows)


@dataclass
class ProbeParams:
    hidden: int
    feature_means: np.ndarray
    feature_stds: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray | None = None
    b2: np.ndarray | None = None

    def predict(self, features: np.ndarray) -> np.ndarray:
        x = (np.asarray(features) - self.feature_means) / self.feature_stds
        if self.hidden == 0:
            return x @ self.w1 + self.b1
        h = enc._np_gelu(x @ self.w1 + self.b1)
        return h @ self.w2 + self.b2


@dataclass
class ProbeResult:
    params: ProbeParams
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    stopped_epoch: int


def train_probe(
    features: np.ndarray,
    targets: np.ndarray,
    train_idx,
    val_idx,
    config: TrainConfig,
) -> ProbeResult:
    """Fit the feed-forward regressor on frozen features with Adam, full
    batch, early-stopped on validation loss."""
    train_idx = list(train_idx)
    val_idx = list(val_idx)
    if not train_idx or not val_idx:
        raise DataError("probe training requires non-empty train and val splits")
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    means = features[train_idx].mean(axis=0)
    stds = features[train_idx].std(axis=0)
    stds = np.where(stds == 0.0, 1.0, stds)
    x_train = ad.constant((features[train_idx] - means) / stds)
    y_train = ad.constant(targets[train_idx])
    x_val = (features[val_idx] - means) / stds
    y_val = targets[val_idx]

    rng = rng_for(config.seed, "probe")
    n_features = features.shape[1]
    n_targets = targets.shape[1]
    hidden = config.probe_hidden
    if hidden == 0:
        w1 = ad.parameter(rng.normal(0.0, 0.02, size=(n_features, n_targets)))
        b1 = ad.parameter(np.zeros(n_targets))
        params_list = [w1, b1]
    else:
        w1 = ad.parameter(rng.normal(0.0, math.sqrt(2.0 / n_features), size=(n_features, hidden)))
        b1 = ad.parameter(np.zeros(hidden))
        w2 = ad.parameter(rng.normal(0.0, 0.02, size=(hidden, n_targets)))
        b2 = ad.parameter(np.zeros(n_targets))
        params_list = [w1, b1, w2, b2]

    def forward(x: Tensor) -> Tensor:
        if hidden == 0:
            return ad.add(ad.matmul(x, w1), b1)
        h = ad.gelu(ad.add(ad.matmul(x, w1), b1))
        return ad.add(ad.matmul(h, w2), b2)

    def predict_np(x: np.ndarray) -> np.ndarray:
        with ad.no_recording():
            return forward(ad.constant(x)).values

    optimizer = Adam(params_list, lr=config.probe_lr)
    best_val = math.inf
    best_values = [p.values.copy() for p in params_list]
    best_epoch = 0
    flat_epochs = 0
    train_losses: list[float] = []
    val_losses: list[float] = []
    stopped_epoch = config.probe_epochs
    for epoch in range(1, config.probe_epochs + 1):
        ad.reset_tape()
        diff = ad.add(forward(x_train), ad.negate(y_train))
        loss = ad.mean_all(ad.mul(diff, diff))
        if not np.isfinite(loss.values):
            raise NumericalError(f"non-finite probe loss at epoch {epoch}")
        ad.backward(loss)
        optimizer.step()
        optimizer.zero_grad()
        train_losses.append(float(loss.values))
        val_loss = float(np.mean((predict_np(x_val) - y_val) ** 2))
        val_losses.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_values = [p.values.copy() for p in params_list]
            best_epoch = epoch
            flat_epochs = 0
        else:
            flat_epochs += 1
            if flat_epochs >= config.patience:
                stopped_epoch = epoch
                break
    for p, best in zip(params_list, best_values):
        p.values = best
    ad.reset_tape()

    probe = ProbeParams(
        hidden=hidden,
        feature_means=means,
        feature_stds=stds,
        w1=params_list[0].values,
        b1=params_list[1].values,
        w2=params_list[2].values if hidden else None,
        b2=params_list[3].values if hidden else None,
    )
    return ProbeResult(probe, train_losses, val_losses, best_epoch, stopped_epoch)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class IndicatorReport:
    name: str
    transformed: MetricTriple
    raw: MetricTriple

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "transformed_space": self.transformed.to_json(),
            "raw_space": self.raw.to_json(),
        }


@dataclass
class ProbeReport:
    target_city: str
    source_city: str
    checkpoint_id: str
    split_seed: int
    indicators: list[IndicatorReport]
    probe_best_epoch: int
    probe_stopped_epoch: int
    metric_space_note: str = (
        "primary metrics are computed in the log/standardized target space; "
        "raw_space metrics invert the transform first"
    )

    def mean_r2(self) -> float:
        values = [ind.transformed.r2 for ind in self.indicators if ind.transformed.r2 is not None]
        return float(np.mean(values)) if values else float("nan")

    def to_json(self) -> dict:
        return {
            "target_city": self.target_city,
            "source_city": self.source_city,
            "checkpoint_id": self.checkpoint_id,
            "split_seed": self.split_seed,
            "probe_best_epoch": self.probe_best_epoch,
            "probe_stopped_epoch": self.probe_stopped_epoch,
            "metric_space_note": self.metric_space_note,
            "indicators": [ind.to_json() for ind in self.indicators],
        }


def run_finetune(
    dataset: CityDataset,
    model: PretrainModel,
    config: TrainConfig,
    log_flags=None,
    source_city: str | None = None,
) -> ProbeReport:
    """Stage 2: extract frozen features, train the probe, report metrics.

    Metrics are reported in the transformed (optionally logged, train-split
    standardized) space and, labeled separately, back in raw target space.
    """
    if log_flags is None:
        log_flags = [False] * len(dataset.indicator_names)
    checkpoint_id = model.checksum()[:16]
    features = dataset_features(dataset, model, config.sv_cap, threads=config.threads)
    raw_targets = dataset_targets(dataset)
    transform = IndicatorTransform.fit(raw_targets, log_flags, dataset.split_indices("train"))
    z_targets = transform.forward(raw_targets)
    probe = train_probe(
        features, z_targets, dataset.split_indices("train"), dataset.split_indices("val"), config
    )
    test_idx = dataset.split_indices("test")
    z_pred = probe.params.predict(features[test_idx])
    z_true = z_targets[test_idx]
    transformed_metrics = evaluate_per_indicator(z_pred, z_true)
    raw_metrics = evaluate_per_indicator(transform.inverse(z_pred), raw_targets[test_idx])
    indicators = [
        IndicatorReport(name, t_m, r_m)
        for name, t_m, r_m in zip(dataset.indicator_names, transformed_metrics, raw_metrics)
    ]
    return ProbeReport(
        target_city=dataset.city,
        source_city=source_city or dataset.city,
        checkpoint_id=checkpoint_id,
        split_seed=dataset.split_seed,
        indicators=indicators,
        probe_best_epoch=probe.best_epoch,
        probe_stopped_epoch=probe.stopped_epoch,
    )


def transfer_evaluate(
    model: PretrainModel,
    source_city: str,
    target_dataset: CityDataset,
    config: TrainConfig,
    log_flags=None,
) -> ProbeReport:
    """Probe a source-city checkpoint on a target city's splits."""
    if source_city == target_dataset.city:
        warnings.warn(
            f"self-transfer: checkpoint city and target city are both "
            f"{source_city!r}", stacklevel=2,
        )
    return run_finetune(
        target_dataset, model, config, log_flags=log_flags, source_city=source_city
    )
