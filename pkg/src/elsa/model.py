"""Dual audio--text encoder with contrastive + spatial-regression losses.

Audio side: a semantic CNN over the omni log-mel grid and a spatial CNN
over coordinate-augmented intensity-vector grids, concatenated and
projected to the joint space.  Text side: a hashing bag-of-words encoder
(stands in for a pretrained transformer at desk scale).  The loss is the
symmetric contrastive loss plus direction/distance/area regression heads
fed by the pre-normalization audio vector.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nncore as nn
from .captions import tokenize


IV_GRID_CHANNELS = 8  # 6 unit-vector components + 2 coherence norms


class EmptyCaptionError(ValueError):
    """Caption has no tokens after normalization."""


class MissingLabelError(ValueError):
    """Spatial sample lacks regression targets."""


@dataclass(frozen=True)
class ElsaConfig:
    """Toy-scale dimensions; the published model used 768/192/512 with
    pretrained encoders, which is out of reach on a desk."""

    semantic_dim: int = 48
    spatial_dim: int = 24
    joint_dim: int = 64
    text_hash_buckets: int = 2048
    text_embed_dim: int = 48
    mel_bands: int = 48
    sem_time_cells: int = 16
    spa_time_cells: int = 16
    spa_freq_cells: int = 24
    sem_channels: tuple[int, int] = (8, 16)
    spa_channels: tuple[int, int] = (16, 24)
    head_hidden: int = 32
    init_tau: float = 0.07
    tau_min: float = 0.01
    mix_nonspatial_fraction: float = 0.25

    def as_dict(self) -> dict:
        d = asdict(self)
        d["sem_channels"] = list(self.sem_channels)
        d["spa_channels"] = list(self.spa_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ElsaConfig":
        d = dict(d)
        d["sem_channels"] = tuple(d["sem_channels"])
        d["spa_channels"] = tuple(d["spa_channels"])
        return cls(**d)


@dataclass
class TargetLabels:
    """Regression targets; mono-replicated samples carry no spatial targets."""

    direction: np.ndarray | None  # unit (x, y, z)
    distance_m: float | None
    floor_area_m2: float | None
    is_spatial: bool

    def __post_init__(self):
        if self.is_spatial:
            if self.direction is None or self.distance_m is None or self.floor_area_m2 is None:
                raise MissingLabelError("spatial sample without regression targets")
            n = float(np.linalg.norm(self.direction))
            if abs(n - 1.0) > 1e-6:
                raise ValueError(f"direction must be unit norm, got {n}")


@dataclass(frozen=True)
class LossBreakdown:
    clip: float
    dir: float
    dist: float
    area: float

    @property
    def total(self) -> float:
        return self.clip + self.dir + self.dist + self.area


def direction_vector(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    return np.array(
        [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
    )


def hash_token(token: str, buckets: int) -> int:
    digest = hashlib.md5(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % buckets


class ElsaModel:
    """Parameter container plus forward functions for both encoders."""

    def __init__(self, config: ElsaConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, nn.Tensor] = {}
        self.target_scalers: dict[str, tuple[float, float]] = {
            "distance_m": (0.0, 1.0),
            "floor_area_m2": (0.0, 1.0),
        }
        self._init_params(np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xE15A))))

    # ------------------------------------------------------------ params

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = nn.parameter(arr)

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config

        def conv(name, out_ch, in_ch, k=3):
            fan_in = in_ch * k * k
            self._add(f"{name}.w", rng.standard_normal((out_ch, in_ch, k, k)) * math.sqrt(2.0 / fan_in))
            self._add(f"{name}.b", np.zeros(out_ch))

        def lin(name, out_d, in_d):
            self._add(f"{name}.w", rng.standard_normal((out_d, in_d)) * math.sqrt(2.0 / in_d))
            self._add(f"{name}.b", np.zeros(out_d))

        s1, s2 = c.sem_channels
        conv("sem.conv1", s1, 1)
        conv("sem.conv2", s2, s1)
        lin("sem.out", c.semantic_dim, s2)

        p1, p2 = c.spa_channels
        conv("spa.conv1", p1, IV_GRID_CHANNELS + 2)  # features + coordinates
        conv("spa.conv2", p2, p1)
        lin("spa.out", c.spatial_dim, p2)

        concat_dim = c.semantic_dim + c.spatial_dim
        self._add("proj.ln.gamma", np.ones(concat_dim))
        self._add("proj.ln.beta", np.zeros(concat_dim))
        lin("proj.fc1", c.joint_dim, concat_dim)
        lin("proj.fc2", c.joint_dim, c.joint_dim)

        self._add("text.table", rng.standard_normal((c.text_hash_buckets, c.text_embed_dim)) * 0.3)
        lin("text.fc1", c.joint_dim, c.text_embed_dim)
        lin("text.fc2", c.joint_dim, c.joint_dim)

        for head in ("dir", "dist", "area"):
            out_d = 3 if head == "dir" else 1
            lin(f"head.{head}.fc1", c.head_hidden, c.joint_dim)
            lin(f"head.{head}.fc2", out_d, c.head_hidden)

        self._add("log_inv_tau", np.array(math.log(1.0 / c.init_tau)))

    def p(self, name: str) -> nn.Tensor:
        return self.params[name]

    # ----------------------------------------------------------- encoders

    def semantic_branch(self, logmel_grid: nn.Tensor) -> nn.Tensor:
        """(B, 1, T_cells, V) -> (B, semantic_dim)."""
        h = nn.relu(nn.conv2d(logmel_grid, self.p("sem.conv1.w"), self.p("sem.conv1.b"), padding=1))
        h = nn.max_pool2d(h, 2)
        h = nn.relu(nn.conv2d(h, self.p("sem.conv2.w"), self.p("sem.conv2.b"), padding=1))
        h = nn.global_mean_pool(h)
        return nn.linear(h, self.p("sem.out.w"), self.p("sem.out.b"))

    def coordinate_channels(self, batch: int, h: int, w: int) -> nn.Tensor:
        """Constant AddCoords2D planes: row index then column index, each
        normalized to [-1, 1] (top-left (-1,-1), bottom-right (+1,+1))."""
        rows = np.linspace(-1.0, 1.0, h)[:, None] * np.ones((1, w))
        cols = np.ones((h, 1)) * np.linspace(-1.0, 1.0, w)[None, :]
        coords = np.stack([rows, cols])[None].repeat(batch, axis=0)
        return nn.tensor(coords)

    def spatial_branch(self, iv_grid: nn.Tensor) -> nn.Tensor:
        """(B, 6, T_cells, F_cells) -> (B, spatial_dim)."""
        b, _, h, w = iv_grid.shape
        x = nn.concat([iv_grid, self.coordinate_channels(b, h, w)], axis=1)
        h1 = nn.relu(nn.conv2d(x, self.p("spa.conv1.w"), self.p("spa.conv1.b"), padding=1))
        h1 = nn.max_pool2d(h1, 2)
        h1 = nn.relu(nn.conv2d(h1, self.p("spa.conv2.w"), self.p("spa.conv2.b"), padding=1))
        h1 = nn.global_mean_pool(h1)
        return nn.linear(h1, self.p("spa.out.w"), self.p("spa.out.b"))

    def audio_encoder(self, logmel_grid: nn.Tensor, iv_grid: nn.Tensor) -> tuple[nn.Tensor, nn.Tensor]:
        """Returns (unit-norm joint embedding, pre-normalization vector)."""
        sem = self.semantic_branch(logmel_grid)
        spa = self.spatial_branch(iv_grid)
        cat = nn.concat([sem, spa], axis=1)  # semantic first, fixed order
        cat = nn.layer_norm(cat, self.p("proj.ln.gamma"), self.p("proj.ln.beta"))
        h = nn.relu(nn.linear(cat, self.p("proj.fc1.w"), self.p("proj.fc1.b")))
        pre = nn.linear(h, self.p("proj.fc2.w"), self.p("proj.fc2.b"))
        return nn.l2_normalize(pre), pre

    def text_counts(self, captions: list[str]) -> np.ndarray:
        """Normalized hash-bucket counts, one row per caption."""
        c = self.config
        counts = np.zeros((len(captions), c.text_hash_buckets))
        for i, cap in enumerate(captions):
            tokens = tokenize(cap)
            if not tokens:
                raise EmptyCaptionError(f"caption {cap!r} empty after tokenization")
            for tok in tokens:
                counts[i, hash_token(tok, c.text_hash_buckets)] += 1.0
            counts[i] /= len(tokens)
        return counts

    def text_encoder(self, captions: list[str]) -> nn.Tensor:
        counts = nn.tensor(self.text_counts(captions))
        pooled = nn.matmul(counts, self.p("text.table"))
        h = nn.relu(nn.linear(pooled, self.p("text.fc1.w"), self.p("text.fc1.b")))
        out = nn.linear(h, self.p("text.fc2.w"), self.p("text.fc2.b"))
        return nn.l2_normalize(out)

    # -------------------------------------------------------------- heads

    def _head(self, name: str, pre: nn.Tensor) -> nn.Tensor:
        h = nn.relu(nn.linear(pre, self.p(f"head.{name}.fc1.w"), self.p(f"head.{name}.fc1.b")))
        return nn.linear(h, self.p(f"head.{name}.fc2.w"), self.p(f"head.{name}.fc2.b"))

    def direction_head(self, pre: nn.Tensor) -> nn.Tensor:
        return nn.l2_normalize(self._head("dir", pre))

    def tau(self) -> nn.Tensor:
        """Learnable temperature, clamped at tau_min."""
        return nn.clamp_min(nn.exp(nn.neg(self.p("log_inv_tau"))), self.config.tau_min)

    def inv_tau(self) -> nn.Tensor:
        return nn.reciprocal(self.tau())

    def fit_target_scalers(self, distances, areas) -> None:
        """Z-score statistics from the train split, saved in the checkpoint."""
        for key, vals in (("distance_m", distances), ("floor_area_m2", areas)):
            arr = np.asarray(vals, dtype=float)
            std = float(arr.std())
            self.target_scalers[key] = (float(arr.mean()), std if std > 1e-9 else 1.0)

    def zscore(self, key: str, value) -> np.ndarray:
        mu, sigma = self.target_scalers[key]
        return (np.asarray(value, dtype=float) - mu) / sigma

    # ---------------------------------------------------------- serialization

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def meta(self) -> dict:
        return {
            "config": self.config.as_dict(),
            "target_scalers": {k: list(v) for k, v in self.target_scalers.items()},
        }

    @classmethod
    def from_checkpoint_arrays(cls, arrays: dict[str, np.ndarray], meta: dict) -> "ElsaModel":
        model = cls(ElsaConfig.from_dict(meta["config"]))
        for k, v in arrays.items():
            model.params[k].data = np.asarray(v, dtype=np.float64).reshape(
                model.params[k].data.shape
            )
        model.target_scalers = {k: tuple(v) for k, v in meta["target_scalers"].items()}
        return model


# ------------------------------------------------------------------ losses


def infonce(X: nn.Tensor, i: int, y: nn.Tensor, tau) -> nn.Tensor:
    """-log softmax similarity of candidate i against the set X for query y."""
    if not isinstance(tau, nn.Tensor):
        tau = nn.tensor(float(tau))
    logits = nn.mul(nn.matmul(X, nn.reshape(y, (-1, 1))), nn.reciprocal(tau))
    logits = nn.reshape(logits, (-1,))
    lse = nn.logsumexp(logits, axis=0)
    picked = nn.take_rows(logits, np.array([i]))
    return nn.sub(lse, nn.reshape(picked, ()))


def clip_loss(Za: nn.Tensor, Zt: nn.Tensor, inv_tau) -> nn.Tensor:
    """Symmetric average of both InfoNCE directions over aligned batches."""
    if Za.shape[0] != Zt.shape[0]:
        raise nn.ShapeMismatchError(f"batch sizes differ: {Za.shape} vs {Zt.shape}")
    if not isinstance(inv_tau, nn.Tensor):
        inv_tau = nn.tensor(float(inv_tau))
    logits = nn.mul(nn.matmul(Za, nn.transpose(Zt, (1, 0))), inv_tau)
    diag = nn.take_diag(logits)
    loss_a2t = nn.mean(nn.sub(nn.logsumexp(logits, axis=1), diag))
    loss_t2a = nn.mean(nn.sub(nn.logsumexp(logits, axis=0), diag))
    return nn.scale(nn.add(loss_a2t, loss_t2a), 0.5)


@dataclass
class Batch:
    """Model-ready arrays for one training step."""

    logmel_grids: np.ndarray  # (B, 1, T, V)
    iv_grids: np.ndarray  # (B, 6, T, F)
    captions: list[str]
    directions: np.ndarray  # (B, 3), zero rows for mono
    distances_z: np.ndarray  # (B,)
    areas_z: np.ndarray  # (B,)
    is_spatial: np.ndarray  # (B,) bool


def elsa_loss(model: ElsaModel, batch: Batch) -> tuple[nn.Tensor, LossBreakdown]:
    """Contrastive loss plus spatial regression; mono samples contribute
    nothing to the regression heads."""
    Za, pre = model.audio_encoder(nn.tensor(batch.logmel_grids), nn.tensor(batch.iv_grids))
    Zt = model.text_encoder(batch.captions)
    l_clip = clip_loss(Za, Zt, model.inv_tau())

    spatial_idx = np.nonzero(batch.is_spatial)[0]
    if len(spatial_idx) > 0:
        pre_sp = nn.take_rows(pre, spatial_idx)
        pred_dir = model.direction_head(pre_sp)
        target_dir = nn.tensor(batch.directions[spatial_idx])
        cos = nn.sum_(nn.mul(pred_dir, target_dir), axis=1)
        l_dir = nn.mean(nn.add_const(nn.neg(cos), 1.0))

        pred_dist = nn.reshape(model._head("dist", pre_sp), (-1,))
        l_dist = nn.mean(nn.square(nn.sub(pred_dist, nn.tensor(batch.distances_z[spatial_idx]))))
        pred_area = nn.reshape(model._head("area", pre_sp), (-1,))
        l_area = nn.mean(nn.square(nn.sub(pred_area, nn.tensor(batch.areas_z[spatial_idx]))))
        total = nn.add(nn.add(l_clip, l_dir), nn.add(l_dist, l_area))
        breakdown = LossBreakdown(l_clip.item(), l_dir.item(), l_dist.item(), l_area.item())
    else:
        total = l_clip
        breakdown = LossBreakdown(l_clip.item(), 0.0, 0.0, 0.0)
    return total, breakdown


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    peak_lr: float = 1e-3
    floor_lr: float = 1e-5
    seed: int = 0
    checkpoint_path: str = "checkpoint.bin"


class EmptyCorpusError(ValueError):
    pass


def batch_from_records(model: ElsaModel, records, cache) -> Batch:
    """Assemble model-ready arrays for a list of manifest records."""
    logmels, ivs, captions = [], [], []
    directions = np.zeros((len(records), 3))
    dists = np.zeros(len(records))
    areas = np.zeros(len(records))
    spatial = np.zeros(len(records), dtype=bool)
    for i, rec in enumerate(records):
        tensors = cache[rec.id]["tensors"]
        logmels.append(tensors["logmel"][None])  # add channel axis
        ivs.append(tensors["ivs"])
        captions.append(rec.spatial_caption)
        if rec.is_spatial:
            if rec.attributes is None:
                raise MissingLabelError(f"spatial record {rec.id} has no attributes")
            a = rec.attributes
            directions[i] = direction_vector(a.azimuth_deg, a.elevation_deg)
            dists[i] = model.zscore("distance_m", a.distance_m)
            areas[i] = model.zscore("floor_area_m2", a.floor_area_m2)
            spatial[i] = True
    return Batch(
        logmel_grids=np.stack(logmels),
        iv_grids=np.stack(ivs),
        captions=captions,
        directions=directions,
        distances_z=dists,
        areas_z=areas,
        is_spatial=spatial,
    )


def encode_corpus(
    model: ElsaModel, records, cache, batch_size: int = 128
) -> tuple[np.ndarray, np.ndarray]:
    """Joint audio and text embeddings for aligned records, as numpy."""
    za, zt = [], []
    for lo in range(0, len(records), batch_size):
        chunk = records[lo : lo + batch_size]
        batch = batch_from_records(model, chunk, cache)
        a, _ = model.audio_encoder(nn.tensor(batch.logmel_grids), nn.tensor(batch.iv_grids))
        t = model.text_encoder(batch.captions)
        za.append(a.data)
        zt.append(t.data)
    return np.concatenate(za), np.concatenate(zt)


def encode_audio_prenorm(model: ElsaModel, records, cache, batch_size: int = 128) -> np.ndarray:
    pres = []
    for lo in range(0, len(records), batch_size):
        chunk = records[lo : lo + batch_size]
        batch = batch_from_records(model, chunk, cache)
        _, pre = model.audio_encoder(nn.tensor(batch.logmel_grids), nn.tensor(batch.iv_grids))
        pres.append(pre.data)
    return np.concatenate(pres)


def _epoch_record_list(spatial_ids, mono_ids, fraction: float, rng: np.random.Generator):
    """Spatial records plus mono records at the requested batch fraction."""
    n_spatial = len(spatial_ids)
    ids = list(spatial_ids)
    if fraction > 0 and mono_ids:
        want = int(round(fraction / (1.0 - fraction) * n_spatial))
        pool = list(mono_ids)
        picks = []
        while len(picks) < want:
            take = min(want - len(picks), len(pool))
            picks.extend(rng.permutation(pool)[:take].tolist())
        ids.extend(picks)
    order = rng.permutation(len(ids))
    return [ids[i] for i in order]


def train_model(
    model: ElsaModel,
    records,
    cache,
    cfg: TrainConfig,
    log_fn=None,
) -> dict:
    """Epochs of shuffled mixed batches; keeps the checkpoint with the best
    validation mAP@10 (mean of both retrieval directions).

    Returns a history dict with per-epoch losses and retrieval metrics.
    """
    from . import dataio, evalkit  # local import to keep module deps one-way

    train_spatial = [r for r in records if r.split == "train" and r.is_spatial]
    train_mono = [r for r in records if r.split == "train" and not r.is_spatial]
    val_spatial = [r for r in records if r.split == "val" and r.is_spatial]
    if not train_spatial:
        raise EmptyCorpusError("no spatial training records")
    if not val_spatial:
        raise EmptyCorpusError("no spatial validation records")

    model.fit_target_scalers(
        [r.attributes.distance_m for r in train_spatial],
        [r.attributes.floor_area_m2 for r in train_spatial],
    )
    by_id = {r.id: r for r in records}

    steps_per_epoch = math.ceil(
        len(train_spatial)
        / max(1.0 - model.config.mix_nonspatial_fraction, 1e-9)
        / cfg.batch_size
    )
    schedule = nn.CosineSchedule(cfg.peak_lr, cfg.floor_lr, cfg.epochs * steps_per_epoch)
    opt = nn.Adam(model.params, schedule)

    history = {"epochs": [], "best_epoch": -1, "best_val_map10": -1.0}
    spatial_ids = sorted(r.id for r in train_spatial)
    mono_ids = sorted(r.id for r in train_mono)

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 0xE601, epoch)))
        epoch_ids = _epoch_record_list(
            spatial_ids, mono_ids, model.config.mix_nonspatial_fraction, rng
        )
        sums = np.zeros(4)
        batches = 0
        for lo in range(0, len(epoch_ids), cfg.batch_size):
            chunk = [by_id[i] for i in epoch_ids[lo : lo + cfg.batch_size]]
            if len(chunk) < 2:
                continue
            batch = batch_from_records(model, chunk, cache)
            loss, breakdown = elsa_loss(model, batch)
            opt.zero_grad()
            nn.backward(loss)
            opt.step()
            sums += (breakdown.clip, breakdown.dir, breakdown.dist, breakdown.area)
            batches += 1

        za, zt = encode_corpus(model, val_spatial, cache)
        report = evalkit.retrieval_report(za, zt)
        val_map = 0.5 * (report.a2t["map10"] + report.t2a["map10"])
        entry = {
            "epoch": epoch,
            "loss": {
                "clip": sums[0] / batches,
                "dir": sums[1] / batches,
                "dist": sums[2] / batches,
                "area": sums[3] / batches,
                "total": float(sums.sum() / batches),
            },
            "val": {
                "map10": val_map,
                "a2t": report.a2t,
                "t2a": report.t2a,
            },
            "lr": opt.current_lr,
            "tau": model.tau().item(),
        }
        history["epochs"].append(entry)
        if log_fn:
            log_fn(entry)
        if val_map > history["best_val_map10"]:
            history["best_val_map10"] = val_map
            history["best_epoch"] = epoch
            dataio.save_checkpoint(
                cfg.checkpoint_path,
                model.parameter_arrays(),
                model.meta(),
                optimizer_arrays=opt.state_arrays(),
                step=opt.step_count,
            )
    return history


def load_model(checkpoint_path) -> ElsaModel:
    from . import dataio

    params, meta, _, _ = dataio.load_checkpoint(checkpoint_path)
    return ElsaModel.from_checkpoint_arrays(params, meta)
