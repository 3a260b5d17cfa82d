"""Pipeline orchestration: configuration, VCKP checkpoints, dataset
generation, the Step 1-3 commands, and Table-style evaluation reports.

Every command is a pure function of (inputs on disk, config, seeds):
re-running writes byte-identical outputs. Output directories are guarded by
a lock file against concurrent writers.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autoencoders as ae
from . import metrics as mt
from . import registration as reg
from . import transform as tf
from . import volume as vol
from .errors import (ConfigInvalid, DataError, IncompatibleCheckpoint,
                     SampleSetMismatch)
from .transform import AffineParams
from .volume import AffineSamplerConfig, BinaryMask, MaskSamplerConfig, Volume

REG_METHOD_NONE = "none"
REG_METHOD_DIRECT = "direct"
REG_METHOD_STN = "stn"
REG_METHOD_MASKROBUST = "maskrobust-stn"

AE_METHODS = ("p", "pca16", "pca32", "vae", "vqvae")


# ---------------------------------------------------------------------------
# configuration

@dataclass
class DatasetConfig:
    phantom_count: int = 40
    val_count: int = 8
    dims: tuple = (64, 64, 128)
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = 7
    mirror_augment: bool = False
    # pose jitter of the generated phantoms; translation scales with dims
    pose_max_angle_deg: float = 15.0
    pose_max_translation_mm: float = 10.0
    pose_scale_range: tuple = (0.95, 1.05)


@dataclass
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    registration: reg.RegTrainConfig = field(default_factory=lambda: reg.RegTrainConfig.desk_stn())
    direct_registration: reg.RegTrainConfig = field(default_factory=lambda: reg.RegTrainConfig.desk_direct())
    autoencoder: ae.AeConfig = field(default_factory=lambda: ae.AeConfig.desk())
    pca_ranks: tuple = (16, 32)
    mask_sampler: MaskSamplerConfig = field(default_factory=MaskSamplerConfig)
    affine_sampler: AffineSamplerConfig = field(
        default_factory=lambda: AffineSamplerConfig(max_translation_mm=10.0))
    metrics: tuple = mt.DEFAULT_METRICS
    iso: float = 0.5
    out_dir: str = "out"

    @classmethod
    def paper_profile(cls) -> "PipelineConfig":
        """Published recipe at full scale (excluded from CI; hours of CPU)."""
        return cls(
            dataset=DatasetConfig(phantom_count=442, val_count=56, dims=(128, 128, 256),
                                  pose_max_translation_mm=25.0),
            registration=reg.RegTrainConfig.paper_stn(),
            direct_registration=reg.RegTrainConfig.paper_direct(),
            autoencoder=ae.AeConfig(),  # 500 epochs, lr 1e-5, beta 1e-2
            mask_sampler=MaskSamplerConfig(),
            affine_sampler=AffineSamplerConfig(),  # 15 deg / 25 mm / [0.9, 1.1]
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        cfg = cls()
        known = {
            "dataset": (DatasetConfig, "dataset"),
            "registration": (reg.RegTrainConfig, "registration"),
            "direct_registration": (reg.RegTrainConfig, "direct_registration"),
            "autoencoder": (ae.AeConfig, "autoencoder"),
            "mask_sampler": (MaskSamplerConfig, "mask_sampler"),
            "affine_sampler": (AffineSamplerConfig, "affine_sampler"),
        }
        for key, value in d.items():
            if key in known:
                klass, attr = known[key]
                sub = klass(**{k: _tupled(v) for k, v in value.items()})
                setattr(cfg, attr, sub)
            elif hasattr(cfg, key):
                setattr(cfg, key, _tupled(value))
            else:
                raise ConfigInvalid(f"unknown config key '{key}'")
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigInvalid(f"cannot parse config {path}: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _tupled(v):
    return tuple(v) if isinstance(v, list) else v


def apply_override(cfg: PipelineConfig, dotted: str, raw: str) -> None:
    """Apply a `a.b=value` CLI override; values parse as JSON, falling back
    to bare strings."""
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = dotted.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not hasattr(obj, p):
            raise ConfigInvalid(f"unknown config path '{dotted}'")
        obj = getattr(obj, p)
    if not hasattr(obj, parts[-1]):
        raise ConfigInvalid(f"unknown config path '{dotted}'")
    setattr(obj, parts[-1], _tupled(value))


# ---------------------------------------------------------------------------
# output-directory lock

@contextlib.contextmanager
def output_lock(out_dir: Path):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".volrecon.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"output dir {out_dir} is locked by another run "
                        f"(remove {lock} if stale)") from None
    try:
        os.close(fd)
        yield out_dir
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(lock)


# ---------------------------------------------------------------------------
# checkpoints (VCKP)

_CKPT_MAGIC = b"VCKP"
_CKPT_VERSION = 1


def save_checkpoint(path, kind: str, config: dict, tensors: dict) -> None:
    """magic, u32 version, u64 header length, JSON header, raw blobs.
    float64 tensors stay f64 (transform parameters); everything else is f32.
    """
    names = sorted(tensors)
    entries = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.asarray(tensors[name])
        dtype = "<f8" if arr.dtype == np.float64 else "<f4"
        blob = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": dtype, "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps({"kind": kind, "config": config, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IQ", _CKPT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[str, dict, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise IncompatibleCheckpoint(f"{path}: bad magic")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != _CKPT_VERSION:
            raise IncompatibleCheckpoint(f"{path}: version {version}")
        header = json.loads(fh.read(hlen))
        payload = fh.read()
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["kind"], header["config"], tensors


def _locnet_tensors(net: reg.LocNet) -> dict:
    out = {f"net.{k}": v for k, v in net.params.items()}
    out.update({f"buf.{k}": v for k, v in net.buffers.items()})
    return out


def _locnet_from_ckpt(config: dict, tensors: dict) -> reg.LocNet:
    params = {k[len("net."):]: v.astype(np.float32) for k, v in tensors.items()
              if k.startswith("net.")}
    buffers = {k[len("buf."):]: v.astype(np.float32) for k, v in tensors.items()
               if k.startswith("buf.")}
    return reg.LocNet(params=params, buffers=buffers, mode=config["mode"],
                      channels=tuple(config["channels"]))


def load_registration(path):
    """Returns (method, prototype Volume | None, LocNet | thetas list)."""
    kind, config, tensors = load_checkpoint(path)
    dims = tuple(config["dims"])
    spacing = tuple(config["spacing"])
    proto = None
    if "prototype" in tensors:
        proto = Volume(dims, spacing, tensors["prototype"].astype(np.float32))
    if kind == "registration-direct":
        thetas = [AffineParams.from_vector(v) for v in tensors["thetas"]]
        return REG_METHOD_DIRECT, proto, thetas
    if kind in ("registration-stn", "locnet-maskrobust"):
        method = REG_METHOD_STN if kind == "registration-stn" else REG_METHOD_MASKROBUST
        return method, proto, _locnet_from_ckpt(config, tensors)
    raise IncompatibleCheckpoint(f"{path}: kind '{kind}' is not a registration checkpoint")


def load_autoencoder(path):
    """Returns (ae_method, model) for reconstruct/evaluate."""
    kind, config, tensors = load_checkpoint(path)
    dims = tuple(config["dims"])
    spacing = tuple(config["spacing"])
    if kind == "prototype-p":
        return "p", ae.PrototypeP(Volume(dims, spacing, tensors["prototype"].astype(np.float32)))
    if kind == "pca":
        model = ae.PcaModel(mean=tensors["mean"].astype(np.float64),
                            components=tensors["components"].astype(np.float64),
                            explained_variance=tensors["explained_variance"].astype(np.float64),
                            dims=dims, spacing=spacing)
        return f"pca{model.rank}", model
    if kind in ("vae", "vae-masked", "vqvae", "vqvae-masked"):
        cfg = ae.AeConfig(**{k: _tupled(v) for k, v in config["ae_config"].items()})
        params = {k[len("net."):]: v.astype(np.float32) for k, v in tensors.items()
                  if k.startswith("net.")}
        if kind.startswith("vae"):
            return "vae", ae.VaeModel(params, cfg, dims, spacing)
        return "vqvae", ae.VqVaeModel(params, cfg, dims, spacing)
    raise IncompatibleCheckpoint(f"{path}: kind '{kind}' is not an autoencoder checkpoint")


# ---------------------------------------------------------------------------
# dataset generation

def _sample_name(i: int) -> str:
    return f"sample_{i:03d}"


def cmd_phantom_gen(cfg: PipelineConfig, out_dir=None) -> Path:
    """Generate the phantom dataset with ground-truth poses and a manifest.

    phantom_count / val_count are final sample counts; with mirror_augment
    each base phantom contributes (original, mirrored) to the same split,
    so both counts must be even.
    """
    ds = cfg.dataset
    out = Path(out_dir if out_dir is not None else Path(cfg.out_dir) / "dataset")
    factor = 2 if ds.mirror_augment else 1
    if ds.phantom_count % factor or ds.val_count % factor:
        raise ConfigInvalid("mirror_augment needs even phantom_count and val_count")
    with output_lock(out):
        pose_sampler = AffineSamplerConfig(
            max_angle_deg=ds.pose_max_angle_deg,
            max_translation_mm=ds.pose_max_translation_mm,
            scale_range=tuple(ds.pose_scale_range))
        rng = np.random.default_rng(np.random.SeedSequence([ds.seed, 0xDA7A]))
        base_train = ds.phantom_count // factor
        base_total = (ds.phantom_count + ds.val_count) // factor
        manifest = {"config": cfg.to_dict(), "samples": []}
        for split in ("train", "val"):
            (out / split).mkdir(parents=True, exist_ok=True)
        idx = 0
        for i in range(base_total):
            split = "train" if i < base_train else "val"
            spec, v, m = vol.sample_posed_phantom(rng, ds.dims, ds.spacing, pose_sampler)
            pose = spec.pose
            variants = [(v, m, False)]
            if ds.mirror_augment:
                variants.append((vol.mirror_sagittal(v), m.mirrored(), True))
            for data, mask, mirrored in variants:
                name = _sample_name(idx)
                vol.write_volume(data, out / split / f"{name}.vvol")
                vol.write_mask(mask, out / split / f"{name}.tibia.vmsk")
                manifest["samples"].append({
                    "name": name, "split": split, "mirrored": mirrored,
                    "pose": list(pose.as_vector()),
                    "spec": _spec_dict(spec),
                })
                idx += 1
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return out


def _spec_dict(spec: vol.PhantomSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["pose"] = list(spec.pose.as_vector())
    return d


def spec_from_dict(d: dict) -> vol.PhantomSpec:
    d = dict(d)
    pose = AffineParams.from_vector(np.asarray(d.pop("pose")))
    d["condyle_semi_axes_mm"] = tuple(tuple(c) for c in d["condyle_semi_axes_mm"])
    return vol.PhantomSpec(pose=pose, **{k: _tupled(v) for k, v in d.items()})


def load_dataset(data_dir, split: str = "train") -> list:
    """[(Volume, tibia BinaryMask)] sorted by name."""
    d = Path(data_dir) / split
    pairs = []
    for f in sorted(d.glob("*.vvol")):
        mask_path = d / f"{f.stem}.tibia.vmsk"
        if not mask_path.exists():
            raise DataError(f"missing tibia mask for {f}")
        pairs.append((vol.read_volume(f), vol.read_mask(mask_path)))
    if not pairs:
        raise DataError(f"no samples under {d}")
    return pairs


# ---------------------------------------------------------------------------
# training commands

def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_register(mode: str, data_dir, cfg: PipelineConfig, out_dir=None) -> Path:
    """Train Step-1 registration (direct or stn); writes the checkpoint,
    the aligned dataset, and the loss curve."""
    out = Path(out_dir if out_dir is not None else Path(cfg.out_dir) / f"register-{mode}")
    dataset = load_dataset(data_dir, "train")
    dims = dataset[0][0].dims
    spacing = dataset[0][0].spacing
    with output_lock(out):
        if mode == REG_METHOD_DIRECT:
            rcfg = cfg.direct_registration
            proto, thetas, history = reg.register_direct(dataset, rcfg)
            tensors = {"prototype": proto.volume.data,
                       "thetas": np.stack([t.as_vector() for t in thetas])}
            save_checkpoint(out / "registration.vckp", "registration-direct",
                            {"dims": list(dims), "spacing": list(spacing),
                             "train": dataclasses.asdict(rcfg)}, tensors)
            aligned = reg.align_dataset(dataset, thetas)
            _write_csv(out / "loss.csv", ["epoch", "loss"], history)
        elif mode == REG_METHOD_STN:
            rcfg = cfg.registration
            proto, net, history = reg.register_stn(dataset, rcfg)
            tensors = {"prototype": proto.volume.data}
            tensors.update(_locnet_tensors(net))
            save_checkpoint(out / "registration.vckp", "registration-stn",
                            {"dims": list(dims), "spacing": list(spacing),
                             "mode": net.mode, "channels": list(net.channels),
                             "train": dataclasses.asdict(rcfg)}, tensors)
            aligned = reg.align_dataset(dataset, net)
            _write_csv(out / "loss.csv", ["epoch", "loss"], history)
        else:
            raise ConfigInvalid(f"unknown registration mode '{mode}'")
        _write_aligned(out / "aligned", aligned)
    return out


def _write_aligned(aligned_dir: Path, aligned) -> None:
    aligned_dir.mkdir(parents=True, exist_ok=True)
    for i, (v, m) in enumerate(aligned):
        name = _sample_name(i)
        vol.write_volume(v, aligned_dir / f"{name}.vvol")
        vol.write_mask(m, aligned_dir / f"{name}.tibia.vmsk")


def load_aligned(aligned_dir) -> list:
    d = Path(aligned_dir)
    pairs = []
    for f in sorted(d.glob("*.vvol")):
        pairs.append((vol.read_volume(f), vol.read_mask(d / f"{f.stem}.tibia.vmsk")))
    if not pairs:
        raise DataError(f"no aligned samples under {d}")
    return pairs


def cmd_align(data_dir, reg_ckpt, cfg: PipelineConfig, out_dir=None, split="val") -> Path:
    """Apply a trained registration to a dataset split."""
    out = Path(out_dir if out_dir is not None else Path(cfg.out_dir) / f"aligned-{split}")
    dataset = load_dataset(data_dir, split)
    method, proto, artifact = load_registration(reg_ckpt)
    with output_lock(out):
        if method == REG_METHOD_DIRECT:
            rcfg = cfg.direct_registration
            prototype = reg.Prototype(proto)
            thetas = [reg.optimize_sample_params(v, m, prototype, rcfg)
                      for v, m in dataset]
            aligned = reg.align_dataset(dataset, thetas)
        else:
            aligned = reg.align_dataset(dataset, artifact)
        _write_aligned(out, aligned)
    return out


def cmd_ae_train(model: str, aligned_dir, cfg: PipelineConfig, masked: bool = False,
                 out_dir=None) -> Path:
    """Train one latent model on the aligned dataset. masked=True uses the
    Step-3 masked objective (visibility-masked inputs, region mode All)."""
    out = Path(out_dir if out_dir is not None else Path(cfg.out_dir) /
               (f"ae-{model}-masked" if masked else f"ae-{model}"))
    aligned = load_aligned(aligned_dir)
    dims = aligned[0][0].dims
    spacing = aligned[0][0].spacing
    meta = {"dims": list(dims), "spacing": list(spacing)}
    acfg = cfg.autoencoder
    with output_lock(out):
        if model.startswith("pca"):
            rank = int(model[3:])
            pca = ae.pca_fit([v.apply_mask(m) for v, m in aligned], rank)
            save_checkpoint(out / "model.vckp", "pca", meta,
                            {"mean": pca.mean, "components": pca.components,
                             "explained_variance": pca.explained_variance})
            _write_csv(out / "explained_variance.csv", ["component", "variance"],
                       list(enumerate(pca.explained_variance.tolist())))
        elif model == "vae":
            mask_cfg = cfg.mask_sampler if masked else None
            vmodel, history = ae.vae_train(aligned, acfg, ae.LossRegionMode.ALL, mask_cfg)
            tensors = {f"net.{k}": v for k, v in vmodel.params.items()}
            kind = "vae-masked" if masked else "vae"
            save_checkpoint(out / "model.vckp", kind,
                            dict(meta, ae_config=dataclasses.asdict(acfg),
                                 masked=masked,
                                 mask_sampler=dataclasses.asdict(cfg.mask_sampler) if masked else None),
                            tensors)
            _write_csv(out / "loss.csv", ["epoch", "total", "recon", "kl"], history)
        elif model == "vqvae":
            mask_cfg = cfg.mask_sampler if masked else None
            qmodel, history = ae.vqvae_train(aligned, acfg, ae.LossRegionMode.ALL, mask_cfg)
            tensors = {f"net.{k}": v for k, v in qmodel.params.items()}
            kind = "vqvae-masked" if masked else "vqvae"
            save_checkpoint(out / "model.vckp", kind,
                            dict(meta, ae_config=dataclasses.asdict(acfg),
                                 masked=masked,
                                 mask_sampler=dataclasses.asdict(cfg.mask_sampler) if masked else None),
                            tensors)
            _write_csv(out / "loss.csv",
                       ["epoch", "total", "recon", "codebook", "commit", "utilization"],
                       history)
        else:
            raise ConfigInvalid(f"unknown AE model '{model}'")
    return out


def save_prototype_model(proto_volume: Volume, path) -> None:
    save_checkpoint(path, "prototype-p",
                    {"dims": list(proto_volume.dims), "spacing": list(proto_volume.spacing)},
                    {"prototype": proto_volume.data})


def cmd_maskrobust_train(aligned_dir, cfg: PipelineConfig, out_dir=None) -> Path:
    """Step 3: retrain the LocNet on block-masked, randomly transformed
    aligned samples. The prototype is not a trainable input here (frozen by
    construction: the loss compares against the corrupted sample itself)."""
    out = Path(out_dir if out_dir is not None else Path(cfg.out_dir) / "maskrobust")
    aligned = load_aligned(aligned_dir)
    dims = aligned[0][0].dims
    spacing = aligned[0][0].spacing
    with output_lock(out):
        net, history = reg.train_mask_robust_locnet(
            aligned, cfg.mask_sampler, cfg.affine_sampler, cfg.registration)
        tensors = _locnet_tensors(net)
        save_checkpoint(out / "locnet.vckp", "locnet-maskrobust",
                        {"dims": list(dims), "spacing": list(spacing),
                         "mode": net.mode, "channels": list(net.channels),
                         "mask_sampler": dataclasses.asdict(cfg.mask_sampler),
                         "affine_sampler": dataclasses.asdict(cfg.affine_sampler),
                         "train": dataclasses.asdict(cfg.registration)}, tensors)
        _write_csv(out / "loss.csv", ["epoch", "total", "image", "regression"], history)
    return out


# ---------------------------------------------------------------------------
# reconstruction and evaluation

def cmd_reconstruct(reg_ckpt, ae_ckpt, volume_path, mask_path=None, out_dir=None,
                    cfg: PipelineConfig | None = None, export_stl: bool = False) -> Path:
    """Full query path: predict the transform, align, encode/decode, write
    the aligned input, theta as JSON, the reconstruction, and optionally an
    isosurface mesh."""
    cfg = cfg if cfg is not None else PipelineConfig()
    out = Path(out_dir if out_dir is not None else Path(cfg.out_dir) / "reconstruct")
    v = vol.read_volume(volume_path)
    vis = vol.read_mask(mask_path, vol.MASK_TAG_VISIBILITY) if mask_path else None
    method, proto, artifact = load_registration(reg_ckpt)
    ae_method, model = load_autoencoder(ae_ckpt)
    if hasattr(model, "dims") and tuple(model.dims) != v.dims:
        raise IncompatibleCheckpoint(f"model dims {model.dims} vs input {v.dims}")
    with output_lock(out):
        data = v.data if vis is None else v.data * vis.bits
        if isinstance(artifact, reg.LocNet):
            theta = artifact.predict(data)
        else:
            raise IncompatibleCheckpoint(
                "reconstruct needs a LocNet registration checkpoint (stn or mask-robust)")
        aligned_data = tf.affine_resample(data, theta, v.spacing)
        aligned = Volume(v.dims, v.spacing, aligned_data)
        vis_aligned = None
        if vis is not None:
            vis_aligned = BinaryMask(v.dims, tf.resample_mask(vis.bits, theta, v.spacing),
                                     vol.MASK_TAG_VISIBILITY)
        recon = ae.reconstruct(model, aligned, vis_aligned)
        vol.write_volume(aligned, out / "aligned.vvol")
        vol.write_volume(recon, out / "reconstruction.vvol")
        with open(out / "theta.json", "w") as fh:
            json.dump(theta.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        if export_stl:
            mesh = mt.marching_cubes(recon, cfg.iso)
            mt.write_stl(mesh, out / "reconstruction.stl")
            mt.write_obj(mesh, out / "reconstruction.obj")
    return out


def _discover_method_dirs(recon_dir: Path) -> list[tuple[str, str, Path]]:
    """(registration, autoencoder, dir) rows. Accepts the two-level
    <registration>/<autoencoder>/ layout, a one-level <autoencoder>/ layout,
    or a flat directory of volumes."""
    if any(recon_dir.glob("*.vvol")):
        return [("-", "-", recon_dir)]
    rows = []
    for sub in sorted(p for p in recon_dir.iterdir() if p.is_dir()):
        if any(sub.glob("*.vvol")):
            rows.append(("-", sub.name, sub))
        else:
            for ae_sub in sorted(p for p in sub.iterdir() if p.is_dir()):
                rows.append((sub.name, ae_sub.name, ae_sub))
    return rows


def cmd_evaluate(recon_dir, gt_dir, cfg: PipelineConfig | None = None, out_dir=None) -> Path:
    """Compare reconstruction directories against same-named ground-truth
    volumes; write the CSV and the registration x autoencoder markdown
    table."""
    cfg = cfg if cfg is not None else PipelineConfig()
    recon_dir = Path(recon_dir)
    gt_dir = Path(gt_dir)
    out = Path(out_dir if out_dir is not None else Path(cfg.out_dir) / "evaluation")
    gt_files = {f.name: f for f in sorted(gt_dir.glob("*.vvol"))}
    if not gt_files:
        raise SampleSetMismatch(f"no ground-truth volumes under {gt_dir}")
    rows = []
    for reg_name, ae_name, d in _discover_method_dirs(recon_dir):
        files = sorted(d.glob("*.vvol"))
        if {f.name for f in files} != set(gt_files):
            raise SampleSetMismatch(f"{d} samples do not match the ground-truth set")
        pairs = [(vol.read_volume(f), vol.read_volume(gt_files[f.name])) for f in files]
        rows.append((reg_name, ae_name, mt.evaluate_pairs(pairs, cfg.metrics, cfg.iso)))
    if not rows:
        raise SampleSetMismatch(f"no reconstructions under {recon_dir}")
    with output_lock(out):
        _write_csv(out / "metrics.csv", *_split_csv(mt.report_csv_rows(rows, cfg.metrics)))
        with open(out / "metrics.md", "w") as fh:
            fh.write(mt.format_markdown_table(rows, cfg.metrics))
    return out


def _split_csv(rows):
    return rows[0], rows[1:]


def cmd_report(eval_dirs, out_path) -> Path:
    """Merge one or more evaluation CSVs into a single markdown report."""
    out_path = Path(out_path)
    lines = []
    for d in eval_dirs:
        md = Path(d) / "metrics.md"
        if not md.exists():
            raise DataError(f"{d} has no metrics.md (run evaluate first)")
        lines.append(f"## {Path(d).name}\n")
        lines.append(md.read_text())
        lines.append("")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines))
    return out_path


# ---------------------------------------------------------------------------
# full Step 1 -> Step 2 -> Step 3 -> evaluate chain

def run_chain(cfg: PipelineConfig, ae_models=("pca16", "pca32", "vae", "vqvae")) -> Path:
    """Drive the whole pipeline on the desk-scale config:

    phantom-gen -> register (stn) -> ae-train per model -> maskrobust-train
    (LocNet + masked VAE) -> reconstruct the validation split -> evaluate.
    Returns the output root; evaluation lands in <out>/evaluation.
    """
    root = Path(cfg.out_dir)
    data = cmd_phantom_gen(cfg)
    regdir = cmd_register(REG_METHOD_STN, data, cfg)
    aligned_train = regdir / "aligned"

    ae_ckpts = {}
    for model in ae_models:
        d = cmd_ae_train(model, aligned_train, cfg, masked=False)
        ae_ckpts[model] = d / "model.vckp"
    _, proto, _ = load_registration(regdir / "registration.vckp")
    save_prototype_model(proto, root / "prototype.vckp")
    ae_ckpts["p"] = root / "prototype.vckp"

    mr_dir = cmd_maskrobust_train(aligned_train, cfg)
    masked_vae_dir = cmd_ae_train("vae", aligned_train, cfg, masked=True,
                                  out_dir=root / "ae-vae-masked")

    # validation split, aligned by the trained STN
    val_aligned_dir = cmd_align(data, regdir / "registration.vckp", cfg, split="val")
    val_aligned = load_aligned(val_aligned_dir)

    recon_root = root / "recon"
    gt_dir = root / "gt"
    gt_dir.mkdir(parents=True, exist_ok=True)
    names = [_sample_name(i) for i in range(len(val_aligned))]
    for name, (v, _) in zip(names, val_aligned):
        vol.write_volume(v, gt_dir / f"{name}.vvol")
    for method, ckpt in sorted(ae_ckpts.items()):
        _, model = load_autoencoder(ckpt)
        d = recon_root / REG_METHOD_STN / method
        d.mkdir(parents=True, exist_ok=True)
        for name, (v, _) in zip(names, val_aligned):
            recon = ae.reconstruct(model, v)
            vol.write_volume(recon, d / f"{name}.vvol")

    # mask-robust query path on corrupted raw validation volumes
    _, _, mr_net = load_registration(mr_dir / "locnet.vckp")
    _, masked_vae = load_autoencoder(masked_vae_dir / "model.vckp")
    val_raw = load_dataset(data, "val")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.dataset.seed, 0xECA]))
    d = recon_root / REG_METHOD_MASKROBUST / "vae"
    gt_mr = root / "gt-maskrobust"
    d.mkdir(parents=True, exist_ok=True)
    gt_mr.mkdir(parents=True, exist_ok=True)
    for name, (v, m) in zip(names, val_raw):
        vis = vol.sample_block_mask(cfg.mask_sampler, v.dims, rng)
        corrupted = v.apply_mask(m).data * vis.bits
        theta = mr_net.predict(corrupted)
        aligned_corrupted = Volume(v.dims, v.spacing,
                                   tf.affine_resample(corrupted, theta, v.spacing))
        recon = ae.reconstruct(masked_vae, aligned_corrupted)
        vol.write_volume(recon, d / f"{name}.vvol")
        clean_aligned = Volume(v.dims, v.spacing,
                               tf.affine_resample(v.apply_mask(m).data, theta, v.spacing))
        vol.write_volume(clean_aligned, gt_mr / f"{name}.vvol")

    cmd_evaluate(recon_root / REG_METHOD_STN, gt_dir, cfg,
                 out_dir=root / "evaluation")
    cmd_evaluate(recon_root / REG_METHOD_MASKROBUST, gt_mr, cfg,
                 out_dir=root / "evaluation-maskrobust")
    cmd_report([root / "evaluation", root / "evaluation-maskrobust"],
               root / "report.md")
    return root
