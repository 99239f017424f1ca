"""Multi-scan segmentation model: temporal embedding, point backbone, BEV motion branch, dual heads.

Data flow for one sample of ``k`` aligned frames (target last)::

    descriptors --f_e (+ e_i)--> P^ebd --backbone--> P^s
    per-frame BEV grids --f_u (shared)--> U_i --(U_k - U_i)--> D --f_m--> Z^m
    [P^s | Z^m gathered at each target point's pillar] --heads--> s^c, s^m

Parameter names are grouped by prefix so overhead can be reported per group:
``backbone.``, ``cffe.``, ``bev.`` and ``heads.``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .align import AlignedSequence
from .bev import BevConfig, BevGrid, flat_pixel_index, pillarize
from .core import (
    DEFAULT_TAXONOMY,
    ArityError,
    ClassTaxonomy,
    ConfigError,
    DataError,
    ManifestMismatchError,
    PointCloud,
    ShapeError,
    compose_labels,
)
from .tensor_nn import (
    ParameterSet,
    Segments,
    Tensor,
    bias_uniform,
    concat,
    conv2d,
    gather_pixels,
    kaiming_uniform,
    linear,
    load_checkpoint,
    max_pool2,
    relu,
    reshape,
    save_checkpoint,
    segment_mean,
    sub,
    take,
    upsample2,
)

GROUPS = ("backbone", "cffe", "bev", "heads")


@dataclass(frozen=True)
class MarsConfig:
    frames: int = 3
    d_e: int = 18
    d_p: int = 32
    backbone_hidden: int = 32
    voxel_size: float = 0.5
    unet_channels: tuple[int, int, int] = (8, 16, 32)
    d_u: int = 16
    kernels: tuple[int, ...] = (1, 3, 5)
    branch_channels: int = 8
    head_hidden: int = 64
    # descriptor scaling for (x, y, z, intensity)
    descriptor_scale: tuple[float, float, float, float] = (0.1, 0.1, 0.5, 1.0)
    use_cffe: bool = True
    use_bev: bool = True
    use_mafl: bool = True
    bev: BevConfig = field(default_factory=BevConfig)
    taxonomy: ClassTaxonomy = DEFAULT_TAXONOMY

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        if self.use_mafl and not self.use_bev:
            raise ConfigError("the motion-aware branch needs the BEV branch")
        if self.use_bev and (self.bev.height % 4 or self.bev.width % 4):
            raise ConfigError(f"BEV size must be divisible by 4, got {self.bev.height}x{self.bev.width}")
        if any(k % 2 == 0 for k in self.kernels):
            raise ConfigError(f"kernel sizes must be odd, got {self.kernels}")
        if not self.voxel_size > 0:
            raise ConfigError("voxel size must be positive")

    @property
    def d_z(self) -> int:
        return self.branch_channels * len(self.kernels)

    @property
    def mafl_active(self) -> bool:
        return self.use_mafl and self.frames >= 2

    @property
    def fused_dim(self) -> int:
        return self.d_p + (self.d_z if self.use_bev else 0)

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "d_e": self.d_e,
            "d_p": self.d_p,
            "backbone_hidden": self.backbone_hidden,
            "voxel_size": self.voxel_size,
            "unet_channels": list(self.unet_channels),
            "d_u": self.d_u,
            "d_z": self.d_z,
            "kernels": list(self.kernels),
            "branch_channels": self.branch_channels,
            "head_hidden": self.head_hidden,
            "descriptor_scale": list(self.descriptor_scale),
            "use_cffe": self.use_cffe,
            "use_bev": self.use_bev,
            "use_mafl": self.use_mafl,
            "bev": self.bev.to_dict(),
            "taxonomy_hash": self.taxonomy.digest(),
        }

    @classmethod
    def from_dict(cls, d: dict, taxonomy: ClassTaxonomy) -> "MarsConfig":
        if d.get("taxonomy_hash") != taxonomy.digest():
            raise ManifestMismatchError("model taxonomy hash does not match the dataset taxonomy")
        cfg = cls(
            frames=int(d["frames"]),
            d_e=int(d["d_e"]),
            d_p=int(d["d_p"]),
            backbone_hidden=int(d["backbone_hidden"]),
            voxel_size=float(d["voxel_size"]),
            unet_channels=tuple(int(c) for c in d["unet_channels"]),
            d_u=int(d["d_u"]),
            kernels=tuple(int(k) for k in d["kernels"]),
            branch_channels=int(d["branch_channels"]),
            head_hidden=int(d["head_hidden"]),
            descriptor_scale=tuple(float(s) for s in d["descriptor_scale"]),
            use_cffe=bool(d["use_cffe"]),
            use_bev=bool(d["use_bev"]),
            use_mafl=bool(d["use_mafl"]),
            bev=BevConfig.from_dict(d["bev"]),
            taxonomy=taxonomy,
        )
        if cfg.d_z != int(d["d_z"]):
            raise ManifestMismatchError(f"manifest d_z {d['d_z']} disagrees with kernels/branch width")
        return cfg


# ---------------------------------------------------------------- inputs


@dataclass
class Sample:
    """Everything the forward pass needs from one aligned window, precomputed once."""

    descriptors: np.ndarray  # (N_all, 4) scaled x, y, z, intensity over the fused cloud
    coords: np.ndarray  # (N_all, 3) aligned coordinates
    frame_id: np.ndarray  # (N_all,) 0..k-1
    voxels: Segments
    target_rows: np.ndarray  # rows of the fused cloud that belong to the target frame
    target_pixels: np.ndarray  # flat pillar index per target point, -1 outside
    bev_frames: Optional[np.ndarray]  # (k, 3, H, W) when the motion branch is active
    bev_fused: Optional[np.ndarray]  # (1, 3, H, W) for the plain BEV branch
    labels: Optional[np.ndarray]  # target-frame composite codes

    @property
    def num_target(self) -> int:
        return len(self.target_rows)


def fused_cloud(aligned: AlignedSequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xyz = np.vstack([f.xyz for f in aligned.frames])
    inten = np.concatenate([f.intensity for f in aligned.frames])
    frame_id = np.concatenate([np.full(len(f), i, dtype=np.int64) for i, f in enumerate(aligned.frames)])
    return xyz, inten, frame_id


def grids_to_array(grids: Sequence[BevGrid]) -> np.ndarray:
    configs = {g.config for g in grids}
    if len(configs) != 1:
        raise ConfigError("BEV grids do not share one configuration")
    return np.stack([np.moveaxis(g.data, -1, 0) for g in grids])


def prepare_sample(aligned: AlignedSequence, config: MarsConfig) -> Sample:
    if aligned.k != config.frames:
        raise ArityError(f"model expects {config.frames} frames, sample has {aligned.k}")
    xyz, inten, frame_id = fused_cloud(aligned)
    desc = np.column_stack([xyz, inten]) * np.asarray(config.descriptor_scale)
    voxels = Segments(np.floor(xyz / config.voxel_size).astype(np.int64))
    n_target = len(aligned.target)
    target_rows = np.arange(len(xyz) - n_target, len(xyz))
    target_pixels = flat_pixel_index(aligned.target.xyz[:, :2], config.bev)
    bev_frames = bev_fused = None
    if config.use_bev:
        if config.mafl_active:
            bev_frames = grids_to_array([pillarize(f, config.bev) for f in aligned.frames])
        else:
            whole = PointCloud(xyz, inten, frame_index=aligned.target_index)
            bev_fused = grids_to_array([pillarize(whole, config.bev)])
    return Sample(desc, xyz, frame_id, voxels, target_rows, target_pixels, bev_frames, bev_fused, aligned.target.labels)


# ---------------------------------------------------------------- model


def _add_linear(params: ParameterSet, rng, name: str, d_in: int, d_out: int) -> None:
    params.add(f"{name}.weight", kaiming_uniform(rng, (d_out, d_in), d_in))
    params.add(f"{name}.bias", bias_uniform(rng, d_out, d_in))


def _add_conv(params: ParameterSet, rng, name: str, c_in: int, c_out: int, k: int) -> None:
    fan_in = c_in * k * k
    params.add(f"{name}.weight", kaiming_uniform(rng, (c_out, c_in, k, k), fan_in))
    params.add(f"{name}.bias", bias_uniform(rng, c_out, fan_in))


def build_parameters(config: MarsConfig, seed: int) -> ParameterSet:
    """Seed-derived fan-in uniform initialisation in a fixed creation order."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11]))
    p = ParameterSet()
    h = config.backbone_hidden
    _add_linear(p, rng, "backbone.embed", 4, config.d_e)
    _add_linear(p, rng, "backbone.mlp1", config.d_e, h)
    _add_linear(p, rng, "backbone.mlp2", h, h)
    _add_linear(p, rng, "backbone.proj", 2 * h, config.d_p)
    if config.use_cffe:
        # small start so time embeddings do not swamp the descriptors
        p.add("cffe.embed", rng.normal(0.0, 0.1, size=(config.frames, config.d_e)))
    if config.use_bev and (config.mafl_active or not config.use_mafl):
        c1, c2, c3 = config.unet_channels
        _add_conv(p, rng, "bev.unet.enc1", 3, c1, 3)
        _add_conv(p, rng, "bev.unet.enc2", c1, c2, 3)
        _add_conv(p, rng, "bev.unet.mid", c2, c3, 3)
        _add_conv(p, rng, "bev.unet.dec2", c3 + c2, c2, 3)
        _add_conv(p, rng, "bev.unet.dec1", c2 + c1, config.d_u, 3)
        _add_conv(p, rng, "bev.unet.out", config.d_u, config.d_u, 1)
        if config.mafl_active:
            c_in = (config.frames - 1) * config.d_u
            for k in config.kernels:
                _add_conv(p, rng, f"bev.fm.k{k}", c_in, config.branch_channels, k)
        else:
            _add_conv(p, rng, "bev.proj", config.d_u, config.d_z, 1)
    f = config.fused_dim
    _add_linear(p, rng, "heads.cls1", f, config.head_hidden)
    _add_linear(p, rng, "heads.cls2", config.head_hidden, config.taxonomy.num_classes)
    _add_linear(p, rng, "heads.mot1", f, config.head_hidden)
    _add_linear(p, rng, "heads.mot2", config.head_hidden, 1)
    return p


def _lin(p: ParameterSet, name: str, x: Tensor) -> Tensor:
    return linear(x, p[f"{name}.weight"], p[f"{name}.bias"])


def _conv(p: ParameterSet, name: str, x: Tensor) -> Tensor:
    return conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"])


def cffe_embed(p: ParameterSet, descriptors: Tensor, frame_id: np.ndarray, k: int, use_cffe: bool = True) -> Tensor:
    """``f_e(descriptor) + e_i`` for every point of the fused cloud (``e`` omitted when disabled)."""
    out = _lin(p, "backbone.embed", descriptors)
    if not use_cffe:
        return out
    table = p["cffe.embed"]
    if table.shape[0] != k:
        raise ArityError(f"{table.shape[0]} temporal embeddings for {k} frames")
    return out + take(table, frame_id)


def toy_backbone_forward(p: ParameterSet, embedded: Tensor, voxels: Segments) -> Tensor:
    """Per-point MLP, one voxel-mean aggregation round, projection to ``D_p``."""
    h = relu(_lin(p, "backbone.mlp1", embedded))
    h = relu(_lin(p, "backbone.mlp2", h))
    pooled = take(segment_mean(h, voxels), voxels.inverse)
    return relu(_lin(p, "backbone.proj", concat([h, pooled], axis=1)))


def unet_forward(p: ParameterSet, x: Tensor) -> Tensor:
    """``f_u`` on a (B, 3, H, W) batch -> (B, D_u, H, W)."""
    e1 = relu(_conv(p, "bev.unet.enc1", x))
    e2 = relu(_conv(p, "bev.unet.enc2", max_pool2(e1)))
    mid = relu(_conv(p, "bev.unet.mid", max_pool2(e2)))
    d2 = relu(_conv(p, "bev.unet.dec2", concat([upsample2(mid), e2], axis=1)))
    d1 = relu(_conv(p, "bev.unet.dec1", concat([upsample2(d2), e1], axis=1)))
    return _conv(p, "bev.unet.out", d1)


def frame_differences(u: Tensor) -> Tensor:
    """(k, D_u, H, W) -> (k-1, D_u, H, W) holding ``U_k - U_i`` for i = 1..k-1."""
    k = u.shape[0]
    return sub(take(u, np.full(k - 1, k - 1)), take(u, np.arange(k - 1)))


def motion_features(p: ParameterSet, diffs: Tensor, kernels: Sequence[int]) -> Tensor:
    """``f_m``: multi-kernel branches over the channel-stacked differences, concatenated in kernel order."""
    k1, d_u, H, W = diffs.shape
    stacked = reshape(diffs, (k1 * d_u, H, W))
    return concat([relu(_conv(p, f"bev.fm.k{k}", stacked)) for k in kernels], axis=0)


def mafl(p: ParameterSet, bev_frames: np.ndarray | Sequence[BevGrid], kernels: Sequence[int] = (1, 3, 5)):
    """Shared ``f_u`` over all frames, differencing against the target, multi-kernel ``f_m``.

    Returns ``(Z^m, D)`` with ``Z^m`` of shape (D_z, H, W).
    """
    if not isinstance(bev_frames, np.ndarray):
        bev_frames = grids_to_array(bev_frames)
    if bev_frames.shape[0] < 2:
        raise ArityError("differencing needs at least two frames")
    diffs = frame_differences(unet_forward(p, Tensor(bev_frames)))
    return motion_features(p, diffs, kernels), diffs


def fuse(point_features: Tensor, z: Tensor, pixels: np.ndarray) -> Tensor:
    """``[P^s | Z^m at each point's pillar]``; points outside the grid get zeros."""
    return concat([point_features, gather_pixels(z, pixels)], axis=1)


def predict(p: ParameterSet, fused: Tensor) -> tuple[Tensor, Tensor]:
    expected = p["heads.cls1.weight"].shape[1]
    if fused.ndim != 2 or fused.shape[1] != expected:
        raise ShapeError(f"heads expect (N, {expected}) features, got {fused.shape}")
    s_c = _lin(p, "heads.cls2", relu(_lin(p, "heads.cls1", fused)))
    s_m = _lin(p, "heads.mot2", relu(_lin(p, "heads.mot1", fused)))
    return s_c, reshape(s_m, (fused.shape[0],))


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def gated_inference(s_c: np.ndarray, s_m: np.ndarray, tax: ClassTaxonomy) -> np.ndarray:
    """Argmax class (ties to the lowest id); moving only for movable classes with σ(s^m) > 0.5."""
    s_c = np.asarray(s_c.data if isinstance(s_c, Tensor) else s_c)
    s_m = np.asarray(s_m.data if isinstance(s_m, Tensor) else s_m)
    semantic = s_c.argmax(axis=1)
    moving = tax.movable_mask[semantic] & (s_m > 0.0)  # σ(z) > 0.5 iff z > 0
    return compose_labels(semantic, moving, tax)


@dataclass
class Forward:
    s_c: Tensor
    s_m: Tensor
    point_features: Tensor
    z: Optional[Tensor]
    diffs: Optional[Tensor]


class MarsModel:
    def __init__(self, config: MarsConfig, seed: int = 0, params: Optional[ParameterSet] = None):
        self.config = config
        self.params = params if params is not None else build_parameters(config, seed)

    def bev_features(self, sample: Sample) -> tuple[Optional[Tensor], Optional[Tensor]]:
        cfg, p = self.config, self.params
        if not cfg.use_bev:
            return None, None
        if cfg.mafl_active:
            return mafl(p, sample.bev_frames, cfg.kernels)
        if cfg.use_mafl:  # k = 1: no differences to take
            return Tensor(np.zeros((cfg.d_z, *cfg.bev.shape))), None
        u = unet_forward(p, Tensor(sample.bev_fused))
        z = relu(_conv(p, "bev.proj", reshape(u, u.shape[1:])))
        return z, None

    def forward(self, sample: Sample) -> Forward:
        cfg, p = self.config, self.params
        emb = cffe_embed(p, Tensor(sample.descriptors), sample.frame_id, cfg.frames, cfg.use_cffe)
        ps = take(toy_backbone_forward(p, emb, sample.voxels), sample.target_rows)
        z, diffs = self.bev_features(sample)
        fused = ps if z is None else fuse(ps, z, sample.target_pixels)
        s_c, s_m = predict(p, fused)
        return Forward(s_c, s_m, ps, z, diffs)

    def infer(self, sample: Sample) -> np.ndarray:
        from .tensor_nn import no_grad

        with no_grad():
            out = self.forward(sample)
        return gated_inference(out.s_c.data, out.s_m.data, self.config.taxonomy)

    # -------------------------------------------------------- reporting / io

    def parameter_report(self) -> dict[str, int]:
        counts = {g: self.params.count(g + ".") for g in GROUPS}
        counts["module"] = counts["cffe"] + counts["bev"] + counts["heads"]
        counts["total"] = self.params.count()
        return counts

    def manifest(self) -> dict:
        return {"format_version": 1, "config": self.config.to_dict(), "parameters": self.parameter_report()}

    def save(self, path: Path) -> None:
        path = Path(path)
        save_checkpoint(path, self.params)
        manifest_path(path).write_text(json.dumps(self.manifest(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path, taxonomy: ClassTaxonomy, expect: Optional[dict] = None) -> "MarsModel":
        """Restore a checkpoint; refuses a manifest whose taxonomy or ``expect`` entries disagree."""
        path = Path(path)
        try:
            doc = json.loads(manifest_path(path).read_text())
        except OSError:
            raise DataError(f"missing model manifest {manifest_path(path)}") from None
        except ValueError as exc:
            raise DataError(f"malformed model manifest: {exc}") from None
        config = MarsConfig.from_dict(doc["config"], taxonomy)
        for key, value in (expect or {}).items():
            have = doc["config"].get(key)
            if have != value:
                raise ManifestMismatchError(f"model manifest {key}={have!r} but {value!r} was requested")
        model = cls(config, params=build_parameters(config, 0))
        model.params.load_state(load_checkpoint(path))
        return model


def manifest_path(checkpoint: Path) -> Path:
    checkpoint = Path(checkpoint)
    return checkpoint.with_name(checkpoint.name + ".manifest.json")


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

