"""Latent models of aligned tibia volumes: PCA baseline, VAE, VQ-VAE, and
the constant-prototype predictor P.

The conv trunks are pure bottlenecks (no encoder-to-decoder skips): a
masked-input model must route everything through the latent, otherwise it
could copy the visible voxels and merely infill the mask pattern. Inference
decodes from the posterior mean, so reconstructions are deterministic.

Masked training draws a fresh visibility mask per sample per epoch, feeds
the masked volume to the encoder, and scores the reconstruction against the
unmasked target over a selectable region (Visible / Hidden / All; default
All). With an all-ones mask and mode=All the masked objective reduces
exactly to the plain one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import AdamWState, DiffTensor, Tape, adamw_step
from .errors import (DimsMismatch, EmptyCodebook, EmptyDataset,
                     ModelInputDimsMismatch, NonFiniteLoss)
from .volume import BinaryMask, MaskSamplerConfig, Volume, sample_block_mask


class LossRegionMode(str, Enum):
    VISIBLE = "visible"
    HIDDEN = "hidden"
    ALL = "all"


# ---------------------------------------------------------------------------
# PCA baseline

@dataclass
class PcaModel:
    mean: np.ndarray                 # (V,) float64
    components: np.ndarray           # (V, p), orthonormal columns
    explained_variance: np.ndarray   # (p,), non-increasing
    dims: tuple
    spacing: tuple

    @property
    def rank(self) -> int:
        return self.components.shape[1]

    def reconstruct_flat(self, flat: np.ndarray) -> np.ndarray:
        centered = flat.astype(np.float64) - self.mean
        return self.mean + self.components @ (self.components.T @ centered)


def pca_fit(volumes, p: int) -> PcaModel:
    """Top-p principal subspace via the N x N Gram matrix (N << voxels at
    desk scale). Reconstruction is mean + U U^T (x - mean)."""
    if len(volumes) < p + 1:
        raise EmptyDataset(f"PCA rank {p} needs at least {p + 1} samples, got {len(volumes)}")
    dims, spacing = volumes[0].dims, volumes[0].spacing
    X = np.stack([v.data.reshape(-1) for v in volumes]).astype(np.float64)
    mu = X.mean(axis=0)
    Xc = X - mu
    gram = Xc @ Xc.T
    lam, E = np.linalg.eigh(gram)
    lam, E = lam[::-1], E[:, ::-1]
    tol = max(lam[0], 0.0) * 1e-12 + 1e-30
    rank = int((lam > tol).sum())
    if p > rank:
        warnings.warn(f"requested {p} components but centered data has rank {rank}; "
                      f"reducing", RuntimeWarning)
        p = rank
    U = Xc.T @ (E[:, :p] / np.sqrt(lam[:p]))
    return PcaModel(mean=mu, components=U,
                    explained_variance=lam[:p] / max(len(volumes) - 1, 1),
                    dims=dims, spacing=spacing)


@dataclass
class PrototypeP:
    """Constant predictor: always returns the prototype volume."""

    prototype: Volume


# ---------------------------------------------------------------------------
# conv trunk shared by VAE and VQ-VAE

@dataclass
class AeConfig:
    latent_channels: int = 8
    trunk_channels: tuple = (8, 16, 32)   # one entry per downsampling level
    residual_from_stage: int = 1          # stage 0 runs at half resolution and
                                          # full width: its k=3 residual block
                                          # alone would dominate CPU time
    beta: float = 1e-2                    # KL weight (VAE)
    codebook_size: int = 256              # VQ-VAE
    commit_beta_start: float = 0.5        # VQ-VAE commitment schedule
    commit_beta_max: float = 1.0
    commit_ramp_epochs: int = 50
    lr: float = 1e-5
    weight_decay: float = 1e-2
    batch: int = 8
    epochs: int = 500
    leaky_slope: float = 0.01
    seed: int = 0

    @classmethod
    def desk(cls, epochs: int = 30, seed: int = 0, lr: float = 1e-3) -> "AeConfig":
        return cls(epochs=epochs, seed=seed, lr=lr)


def _he(rng, shape, fan):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan)).astype(np.float32)


def _trunk_init(rng, cfg: AeConfig, deterministic_encoder: bool) -> dict:
    ch = cfg.trunk_channels
    p = {}
    c_in = 1
    for i, c in enumerate(ch):
        p[f"enc{i}_w"] = _he(rng, (c, c_in, 3, 3, 3), c_in * 27)
        p[f"enc{i}_b"] = np.zeros(c, dtype=np.float32)
        if i >= cfg.residual_from_stage:
            p[f"encres{i}_w"] = _he(rng, (c, c, 3, 3, 3), c * 27)
            p[f"encres{i}_b"] = np.zeros(c, dtype=np.float32)
        c_in = c
    e = cfg.latent_channels
    p["mu_w"] = _he(rng, (e, ch[-1], 1, 1, 1), ch[-1]) * 0.1
    p["mu_b"] = np.zeros(e, dtype=np.float32)
    if not deterministic_encoder:
        p["logvar_w"] = np.zeros((e, ch[-1], 1, 1, 1), dtype=np.float32)
        p["logvar_b"] = np.zeros(e, dtype=np.float32)
    p["dec_in_w"] = _he(rng, (ch[-1], e, 1, 1, 1), e)
    p["dec_in_b"] = np.zeros(ch[-1], dtype=np.float32)
    rev = ch[::-1]  # e.g. (32, 16, 8)
    n = len(ch)
    for i, c in enumerate(rev):
        if n - 1 - i >= cfg.residual_from_stage:
            p[f"decres{i}_w"] = _he(rng, (c, c, 3, 3, 3), c * 27)
            p[f"decres{i}_b"] = np.zeros(c, dtype=np.float32)
        c_next = rev[i + 1] if i + 1 < len(rev) else max(ch[0] // 2, 2)
        p[f"up{i}_w"] = _he(rng, (c, c_next, 2, 2, 2), c * 8)
        p[f"up{i}_b"] = np.zeros(c_next, dtype=np.float32)
    c_last = max(ch[0] // 2, 2)
    p["out_w"] = _he(rng, (1, c_last, 1, 1, 1), c_last) * 0.1
    p["out_b"] = np.zeros(1, dtype=np.float32)
    return p


def _act(h, slope):
    return ad.leaky_relu(ad.channel_norm(h), slope)


def _encode_trunk(cfg: AeConfig, pt: dict, x: DiffTensor) -> DiffTensor:
    h = x
    for i in range(len(cfg.trunk_channels)):
        h = _act(ad.conv3d(h, pt[f"enc{i}_w"], pt[f"enc{i}_b"], stride=2, pad=1),
                 cfg.leaky_slope)
        if f"encres{i}_w" in pt:
            r = _act(ad.conv3d(h, pt[f"encres{i}_w"], pt[f"encres{i}_b"], stride=1, pad=1),
                     cfg.leaky_slope)
            h = ad.add(h, r)
    return h


def _decode_trunk(cfg: AeConfig, pt: dict, z: DiffTensor) -> DiffTensor:
    h = _act(ad.conv3d(z, pt["dec_in_w"], pt["dec_in_b"], stride=1, pad=0),
             cfg.leaky_slope)
    for i in range(len(cfg.trunk_channels)):
        if f"decres{i}_w" in pt:
            r = _act(ad.conv3d(h, pt[f"decres{i}_w"], pt[f"decres{i}_b"], stride=1, pad=1),
                     cfg.leaky_slope)
            h = ad.add(h, r)
        h = ad.conv_transpose3d(h, pt[f"up{i}_w"], pt[f"up{i}_b"], stride=2, pad=0)
        h = ad.leaky_relu(h, cfg.leaky_slope) if i + 1 == len(cfg.trunk_channels) \
            else _act(h, cfg.leaky_slope)
    return ad.conv3d(h, pt["out_w"], pt["out_b"], stride=1, pad=0)


def kl_standard_normal(mu: np.ndarray, logvar: np.ndarray) -> float:
    """Closed-form KL(N(mu, diag sigma^2) || N(0, I)) summed over entries:
    1/2 sum(mu^2 + sigma^2 - 1 - log sigma^2)."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar))


def _kl_term(mu: DiffTensor, logvar: DiffTensor) -> DiffTensor:
    """Mean-per-entry KL so beta trades off against a mean reconstruction
    error of comparable scale. Always >= 0."""
    sq = ad.mul(mu, mu)
    inner = ad.sub(ad.sub(ad.add(sq, ad.exp(logvar)), 1.0), logvar)
    return ad.smul(ad.mean(inner), 0.5)


# ---------------------------------------------------------------------------
# models

@dataclass
class VaeModel:
    params: dict
    config: AeConfig
    dims: tuple
    spacing: tuple

    def encode_mean(self, data: np.ndarray) -> np.ndarray:
        tape = Tape(np.float32)
        pt = {k: tape.constant(v) for k, v in self.params.items()}
        h = _encode_trunk(self.config, pt,
                          tape.constant(data[None, None].astype(np.float32)))
        return ad.conv3d(h, pt["mu_w"], pt["mu_b"], stride=1, pad=0).values[0]

    def decode(self, z: np.ndarray) -> np.ndarray:
        tape = Tape(np.float32)
        pt = {k: tape.constant(v) for k, v in self.params.items()}
        out = _decode_trunk(self.config, pt, tape.constant(z[None].astype(np.float32)))
        return out.values[0, 0]


@dataclass
class VqVaeModel:
    params: dict                      # includes "codebook" (K, E)
    config: AeConfig
    dims: tuple
    spacing: tuple

    def encode(self, data: np.ndarray) -> np.ndarray:
        tape = Tape(np.float32)
        pt = {k: tape.constant(v) for k, v in self.params.items()}
        h = _encode_trunk(self.config, pt,
                          tape.constant(data[None, None].astype(np.float32)))
        return ad.conv3d(h, pt["mu_w"], pt["mu_b"], stride=1, pad=0).values[0]

    def decode(self, zq: np.ndarray) -> np.ndarray:
        tape = Tape(np.float32)
        pt = {k: tape.constant(v) for k, v in self.params.items()}
        out = _decode_trunk(self.config, pt, tape.constant(zq[None].astype(np.float32)))
        return out.values[0, 0]


def vqvae_quantize(z_e: DiffTensor, codebook: DiffTensor):
    """Nearest-codebook-row lookup with straight-through backward.

    Returns (z_q_st, indices, codebook_loss, commitment_loss):
      * z_q_st carries the quantized values but routes reconstruction
        gradients straight to z_e (the codebook gets none from that path);
      * codebook_loss = ||sg(z_e) - z_q||^2 trains the rows;
      * commitment_loss = ||z_e - sg(z_q)||^2 pulls the encoder in.
    Ties go to the lowest row index.
    """
    K, E = codebook.shape
    if K == 0:
        raise EmptyCodebook("codebook has no rows")
    if z_e.shape[1] != E:
        raise DimsMismatch(f"latent channels {z_e.shape[1]} != codebook dim {E}")
    b = z_e.shape[0]
    spatial = z_e.shape[2:]
    flat = ad.reshape(ad.transpose(z_e, (0, 2, 3, 4, 1)), (-1, E))
    zv = flat.values
    cv = codebook.values
    d = (zv * zv).sum(axis=1, keepdims=True) - 2.0 * (zv @ cv.T) + (cv * cv).sum(axis=1)
    idx = np.argmin(d, axis=1)  # argmin returns the first (lowest) index on ties
    zq_flat = ad.gather_rows(codebook, idx)
    codebook_loss = ad.mse_loss(zq_flat, ad.stop_gradient(flat))
    commitment_loss = ad.mse_loss(flat, ad.stop_gradient(zq_flat))
    zq_st_flat = ad.add(flat, ad.stop_gradient(ad.sub(zq_flat, flat)))
    zq = ad.transpose(ad.reshape(zq_st_flat, (b, *spatial, E)), (0, 4, 1, 2, 3))
    return zq, idx.reshape(b, *spatial), codebook_loss, commitment_loss


def commit_beta_at(cfg: AeConfig, epoch: int) -> float:
    """Step schedule: beta_start at epoch 0, beta_max from ramp_epochs on,
    linear steps per epoch in between."""
    if cfg.commit_ramp_epochs <= 0 or epoch >= cfg.commit_ramp_epochs:
        return cfg.commit_beta_max
    frac = epoch / cfg.commit_ramp_epochs
    return cfg.commit_beta_start + (cfg.commit_beta_max - cfg.commit_beta_start) * frac


# ---------------------------------------------------------------------------
# training

def _dataset_arrays(dataset) -> tuple[list, tuple, tuple]:
    if len(dataset) == 0:
        raise EmptyDataset("empty training set")
    first = dataset[0][0] if isinstance(dataset[0], tuple) else dataset[0]
    dims, spacing = first.dims, first.spacing
    if any(d % 8 != 0 for d in dims):
        raise DimsMismatch(f"conv AEs need dims divisible by 8 (3 halvings), got {dims}")
    vols = []
    for item in dataset:
        v = item[0].apply_mask(item[1]) if isinstance(item, tuple) else item
        if v.dims != dims:
            raise DimsMismatch(f"{v.dims} vs {dims}")
        vols.append(v.data)
    return vols, dims, spacing


def _epoch_visibility(mask_cfg, dims, rng, n) -> list:
    if mask_cfg is None:
        return [None] * n
    return [sample_block_mask(mask_cfg, dims, rng).bits for _ in range(n)]


def _batch_recon_loss(recon, target, mode, vis, batch, dims):
    if mode == LossRegionMode.ALL:
        return ad.mse_loss(recon, target)
    w = np.stack([np.ones(dims, dtype=np.float32) if vis[i] is None
                  else vis[i].astype(np.float32) for i in batch])[:, None]
    if mode == LossRegionMode.HIDDEN:
        w = 1.0 - w
    return ad.weighted_mse_loss(recon, target, w)


def vae_train(dataset, cfg: AeConfig, mode: LossRegionMode = LossRegionMode.ALL,
              mask_cfg: MaskSamplerConfig | None = None):
    """Minimize recon-MSE (over the selected region) + beta * KL. When
    mask_cfg is given, inputs are visibility-masked per draw while the
    target stays the unmasked volume (the mask-robust retraining).

    Returns (VaeModel, history) with rows (epoch, total, recon, kl).
    """
    vols, dims, spacing = _dataset_arrays(dataset)
    n = len(vols)
    rng_init = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xAE0]))
    params = _trunk_init(rng_init, cfg, deterministic_encoder=False)
    opt = AdamWState.init(params)
    rng_order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xAE1]))
    rng_noise = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xAE2]))
    rng_mask = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xAE3]))
    history = []
    for epoch in range(cfg.epochs):
        order = rng_order.permutation(n)
        vis = _epoch_visibility(mask_cfg, dims, rng_mask, n)
        ep = {"total": [], "recon": [], "kl": []}
        for start in range(0, n, cfg.batch):
            batch = order[start:start + cfg.batch]
            tape = Tape(np.float32)
            pt = {k: tape.tensor(v) for k, v in params.items()}
            inputs = np.stack([vols[i] if vis[i] is None else vols[i] * vis[i]
                               for i in batch])[:, None]
            target = np.stack([vols[i] for i in batch])[:, None]
            h = _encode_trunk(cfg, pt, tape.constant(inputs))
            mu = ad.conv3d(h, pt["mu_w"], pt["mu_b"], stride=1, pad=0)
            logvar = ad.conv3d(h, pt["logvar_w"], pt["logvar_b"], stride=1, pad=0)
            noise = rng_noise.standard_normal(mu.shape).astype(np.float32)
            z = ad.gaussian_sample(mu, logvar, noise)
            recon = _decode_trunk(cfg, pt, z)
            rec = _batch_recon_loss(recon, target, mode, vis, batch, dims)
            kl = _kl_term(mu, logvar)
            loss = ad.add(rec, ad.smul(kl, cfg.beta))
            tape.backward(loss)
            total = float(loss.values)
            if not np.isfinite(total):
                raise NonFiniteLoss(f"VAE loss non-finite at epoch {epoch} "
                                    f"(recon={float(rec.values)}, kl={float(kl.values)})")
            ep["total"].append(total)
            ep["recon"].append(float(rec.values))
            ep["kl"].append(float(kl.values))
            adamw_step(params, {k: pt[k].grad for k in params}, opt,
                       lr=cfg.lr, weight_decay=cfg.weight_decay)
        history.append((epoch, float(np.mean(ep["total"])),
                        float(np.mean(ep["recon"])), float(np.mean(ep["kl"]))))
    return VaeModel(params, cfg, dims, spacing), history


def vqvae_train(dataset, cfg: AeConfig, mode: LossRegionMode = LossRegionMode.ALL,
                mask_cfg: MaskSamplerConfig | None = None):
    """VQ-VAE training: recon-MSE + codebook loss + scheduled commitment.

    Returns (VqVaeModel, history) with rows
    (epoch, total, recon, codebook, commit, utilization).
    """
    vols, dims, spacing = _dataset_arrays(dataset)
    n = len(vols)
    rng_init = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB00]))
    params = _trunk_init(rng_init, cfg, deterministic_encoder=True)

    # codebook rows seeded from first-sample encoder outputs (keeps rows on
    # the encoder's output scale so early utilization is non-trivial)
    probe = VqVaeModel(params, cfg, dims, spacing).encode(vols[0])
    vecs = probe.reshape(cfg.latent_channels, -1).T
    take = rng_init.integers(0, len(vecs), size=cfg.codebook_size)
    params["codebook"] = (vecs[take] + 0.05 * rng_init.standard_normal(
        (cfg.codebook_size, cfg.latent_channels))).astype(np.float32)

    opt = AdamWState.init(params)
    rng_order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB01]))
    rng_mask = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB03]))
    history = []
    for epoch in range(cfg.epochs):
        order = rng_order.permutation(n)
        vis = _epoch_visibility(mask_cfg, dims, rng_mask, n)
        beta = commit_beta_at(cfg, epoch)
        ep = {"total": [], "recon": [], "cb": [], "commit": []}
        used = set()
        for start in range(0, n, cfg.batch):
            batch = order[start:start + cfg.batch]
            tape = Tape(np.float32)
            pt = {k: tape.tensor(v) for k, v in params.items()}
            inputs = np.stack([vols[i] if vis[i] is None else vols[i] * vis[i]
                               for i in batch])[:, None]
            target = np.stack([vols[i] for i in batch])[:, None]
            h = _encode_trunk(cfg, pt, tape.constant(inputs))
            z_e = ad.conv3d(h, pt["mu_w"], pt["mu_b"], stride=1, pad=0)
            zq, idx, cb_loss, commit_loss = vqvae_quantize(z_e, pt["codebook"])
            used.update(np.unique(idx).tolist())
            recon = _decode_trunk(cfg, pt, zq)
            rec = _batch_recon_loss(recon, target, mode, vis, batch, dims)
            loss = ad.add(ad.add(rec, cb_loss), ad.smul(commit_loss, beta))
            tape.backward(loss)
            total = float(loss.values)
            if not np.isfinite(total):
                raise NonFiniteLoss(f"VQ-VAE loss non-finite at epoch {epoch}")
            ep["total"].append(total)
            ep["recon"].append(float(rec.values))
            ep["cb"].append(float(cb_loss.values))
            ep["commit"].append(float(commit_loss.values))
            adamw_step(params, {k: pt[k].grad for k in params}, opt,
                       lr=cfg.lr, weight_decay=cfg.weight_decay)
        history.append((epoch, float(np.mean(ep["total"])), float(np.mean(ep["recon"])),
                        float(np.mean(ep["cb"])), float(np.mean(ep["commit"])),
                        len(used) / cfg.codebook_size))
    return VqVaeModel(params, cfg, dims, spacing), history


# ---------------------------------------------------------------------------
# shared reconstruction entry point

def reconstruct(model, input_volume: Volume,
                visibility_mask: BinaryMask | None = None) -> Volume:
    """Decode a (masked) aligned volume back to a full prediction in [0,1].

    P returns the prototype unchanged; PCA projects onto its subspace; the
    AEs encode the masked input (VAE from the posterior mean) and decode.
    """
    if isinstance(model, PrototypeP):
        return model.prototype.copy()
    dims = tuple(model.dims)
    if input_volume.dims != dims:
        raise ModelInputDimsMismatch(f"input {input_volume.dims} vs model {dims}")
    data = input_volume.data
    if visibility_mask is not None:
        if visibility_mask.dims != input_volume.dims:
            raise ModelInputDimsMismatch(f"mask {visibility_mask.dims} vs {input_volume.dims}")
        data = data * visibility_mask.bits
    if isinstance(model, PcaModel):
        out = model.reconstruct_flat(data.reshape(-1)).reshape(dims)
    elif isinstance(model, VaeModel):
        out = model.decode(model.encode_mean(data))
    elif isinstance(model, VqVaeModel):
        z_e = model.encode(data)
        tape = Tape(np.float32)
        zq, _, _, _ = vqvae_quantize(tape.constant(z_e[None]),
                                     tape.constant(model.params["codebook"]))
        out = model.decode(zq.values[0])
    else:
        raise ModelInputDimsMismatch(f"unknown model type {type(model)!r}")
    return Volume(input_volume.dims, input_volume.spacing,
                  np.clip(out, 0.0, 1.0).astype(np.float32))
