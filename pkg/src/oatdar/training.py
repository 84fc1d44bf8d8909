"""Training loops for the three trainable blocks, with resumable
checkpoints.

All stochasticity in a stage (shuffles, timestep draws, corruption noise)
comes from a single generator whose state is checkpointed after every epoch,
so interrupt + resume reproduces the uninterrupted run bit for bit. Stage
streams derive from the dataset master seed.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import config_hash
from .dataset import DatasetManifest, attach_fdunet_outputs, load_images
from .diffusion import NoiseSchedule, make_linear_schedule
from .errors import NumericalError, PrerequisiteError
from .models import (CIPAutoencoder, CIPEncoder, ConditionalDenoiser,
                     DenoiserConfig, FDUNet, FDUNetConfig)
from .optim import OptimizerState, adam_update
from .patches import PatchGrid, split_patches
from .tensorfile import read_bundle, write_bundle

log = logging.getLogger(__name__)

_STAGE_IDS = {"fdunet": 11, "cip_fdunet": 12, "diffusion_fdunet": 13,
              "cip_lbp": 14, "diffusion_lbp": 15}


def stage_rng(master_seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((master_seed, 10_000 + _STAGE_IDS[stage])))


def normalize01(img: np.ndarray) -> np.ndarray:
    """Per-image min-max rescale to [0, 1]; constant images go to zeros."""
    lo = img.min()
    hi = img.max()
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def normalize01_batch(imgs: np.ndarray) -> np.ndarray:
    return np.stack([normalize01(im) for im in imgs])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: dict, opt: OptimizerState | None,
                    meta: dict, rng: np.random.Generator | None = None):
    arrays = {f"p.{k}": np.asarray(v) for k, v in params.items()}
    if opt is not None:
        arrays.update({f"o.{k}": v for k, v in opt.state_arrays().items()})
        meta = {**meta, "opt_step": opt.step,
                "learning_rate": opt.learning_rate,
                "adam_beta1": opt.beta1, "adam_beta2": opt.beta2}
    if rng is not None:
        meta = {**meta, "rng_state": rng.bit_generator.state}
    write_bundle(path, arrays, meta)
    return Path(path)


def load_checkpoint(path):
    arrays, meta = read_bundle(path)
    params = {k[2:]: v for k, v in arrays.items() if k.startswith("p.")}
    opt_arrays = {k[2:]: v for k, v in arrays.items() if k.startswith("o.")}
    return params, opt_arrays, meta


def _restore_rng(rng: np.random.Generator, meta: dict):
    state = dict(meta["rng_state"])
    state["state"] = {k: int(v) for k, v in state["state"].items()}
    rng.bit_generator.state = state


def _write_loss_log(run_dir, stage, losses):
    logs = Path(run_dir) / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    lines = ["epoch\tloss"] + [f"{i}\t{v!r}" for i, v in enumerate(losses)]
    (logs / f"{stage}_loss.tsv").write_text("\n".join(lines) + "\n")


def _epoch_batches(rng, n, batch_size):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s:s + batch_size]


def _finite_or_abort(loss, path, params, opt, meta, rng, stage):
    if np.isfinite(loss):
        return
    save_checkpoint(path, params, opt, {**meta, "aborted": True}, rng)
    raise NumericalError(f"{stage}: non-finite loss {loss}; "
                         f"checkpoint saved to {path}")


# ---------------------------------------------------------------------------
# initial-reconstruction enhancer
# ---------------------------------------------------------------------------


def train_fdunet(cfg: dict, run_dir, manifest: DatasetManifest,
                 resume: bool = False) -> Path:
    run_dir = Path(run_dir)
    data_dir = run_dir / "dataset"
    ckpt = run_dir / "checkpoints" / "fdunet.ckpt"
    model = FDUNet(FDUNetConfig.from_dict(cfg["fd_unet"]))
    tr = cfg["training"]
    opt = OptimizerState(learning_rate=tr["learning_rate"],
                         beta1=tr["adam_beta1"], beta2=tr["adam_beta2"])
    rng = stage_rng(cfg["dataset"]["master_seed"], "fdunet")
    start_epoch, losses = 0, []
    if resume and ckpt.is_dir():
        params, opt_arrays, meta = load_checkpoint(ckpt)
        model.load_state_arrays(params)
        opt.load_state_arrays(opt_arrays, meta["opt_step"])
        _restore_rng(rng, meta)
        start_epoch = meta["epoch"] + 1
        losses = list(meta["losses"])

    lbp = normalize01_batch(load_images(manifest, data_dir, "lbp", "train"))
    gt = load_images(manifest, data_dir, "phantom", "train")
    x_all = lbp[:, None].astype(np.float32)
    y_all = gt[:, None].astype(np.float32)
    n = x_all.shape[0]
    params = model.parameters()
    meta = {"kind": "fdunet", "config_hash": config_hash(cfg),
            "model_config": cfg["fd_unet"]}

    for epoch in range(start_epoch, tr["epochs"]):
        batch_losses = []
        for idx in _epoch_batches(rng, n, tr["batch_size"]):
            model.zero_grad()
            pred = model(Tensor(x_all[idx]))
            d = ad.sub(pred, Tensor(y_all[idx]))
            loss = ad.mean_(ad.mul(d, d))
            loss.backward()
            adam_update({k: t.data for k, t in params.items()},
                        {k: t.grad for k, t in params.items()}, opt)
            batch_losses.append(float(loss.data))
        epoch_loss = float(np.mean(batch_losses))
        _finite_or_abort(epoch_loss, ckpt, model.state_arrays(), opt,
                         {**meta, "epoch": epoch, "losses": losses},
                         rng, "fdunet")
        losses.append(epoch_loss)
        log.info("fdunet epoch %d/%d loss %.3e", epoch + 1, tr["epochs"],
                 epoch_loss)
        save_checkpoint(ckpt, model.state_arrays(), opt,
                        {**meta, "epoch": epoch, "losses": losses}, rng)
    if tr["epochs"] == 0 or not ckpt.is_dir():
        save_checkpoint(ckpt, model.state_arrays(), opt,
                        {**meta, "epoch": -1, "losses": losses}, rng)
    _write_loss_log(run_dir, "fdunet", losses)
    return ckpt


def load_fdunet(ckpt) -> FDUNet:
    params, _, meta = load_checkpoint(ckpt)
    model = FDUNet(FDUNetConfig.from_dict(meta["model_config"]))
    model.load_state_arrays(params)
    return model


def emit_fdunet_outputs(cfg: dict, run_dir, manifest: DatasetManifest,
                        batch: int = 64) -> DatasetManifest:
    """Run the trained enhancer over every entry and record the outputs."""
    run_dir = Path(run_dir)
    ckpt = run_dir / "checkpoints" / "fdunet.ckpt"
    if not ckpt.is_dir():
        raise PrerequisiteError("train fdunet before emitting its outputs")
    model = load_fdunet(ckpt)
    data_dir = run_dir / "dataset"
    lbp = normalize01_batch(load_images(manifest, data_dir, "lbp"))
    outs = []
    for s in range(0, lbp.shape[0], batch):
        xb = lbp[s:s + batch, None].astype(np.float32)
        outs.append(model(Tensor(xb)).data[:, 0])
    return attach_fdunet_outputs(manifest, data_dir, np.concatenate(outs))


# ---------------------------------------------------------------------------
# conditioning autoencoder
# ---------------------------------------------------------------------------


def _cond_field(condition_on: str) -> str:
    if condition_on not in ("fdunet", "lbp"):
        raise ValueError("condition_on must be 'fdunet' or 'lbp'")
    return condition_on


def _cond_patches(cfg, manifest, data_dir, condition_on, split="train"):
    field = _cond_field(condition_on)
    entries = manifest.split(split)
    if field == "fdunet" and any(e.fdunet == "-" for e in entries):
        raise PrerequisiteError(
            "conditioning on the enhancer requires its outputs; run "
            "'train fdunet' first or use --condition-on lbp")
    imgs = normalize01_batch(load_images(manifest, data_dir, field, split))
    grid = PatchGrid.for_image(imgs.shape[1:], cfg["patch"]["h"],
                               cfg["patch"]["w"])
    flat = []
    for im in imgs:
        for p in split_patches(im, grid):
            flat.append(p.ravel())
    return np.asarray(flat, dtype=np.float32), grid


def train_cip(cfg: dict, run_dir, manifest: DatasetManifest,
              condition_on: str = "fdunet", resume: bool = False) -> Path:
    run_dir = Path(run_dir)
    ckpt = run_dir / "checkpoints" / f"cip_{condition_on}.ckpt"
    ae = CIPAutoencoder(cfg["cip"]["layer_dims"], seed=cfg["cip"]["seed"])
    tr = cfg["training"]
    opt = OptimizerState(learning_rate=tr["learning_rate"],
                         beta1=tr["adam_beta1"], beta2=tr["adam_beta2"])
    rng = stage_rng(cfg["dataset"]["master_seed"], f"cip_{condition_on}")
    x_all, _ = _cond_patches(cfg, manifest, run_dir / "dataset", condition_on)
    if x_all.shape[0] == 0:
        raise PrerequisiteError("empty conditioning dataset")
    n = x_all.shape[0]
    params = ae.parameters()
    losses = []
    meta = {"kind": "cip", "condition_on": condition_on,
            "config_hash": config_hash(cfg),
            "layer_dims": list(cfg["cip"]["layer_dims"])}
    start_epoch = 0
    if resume and ckpt.is_dir():
        raise NotImplementedError("cip pretraining is cheap; rerun it")

    for epoch in range(start_epoch, tr["epochs"]):
        batch_losses = []
        for idx in _epoch_batches(rng, n, tr["batch_size"]):
            ae.zero_grad()
            xb = Tensor(x_all[idx])
            rec = ae(xb)
            d = ad.sub(rec, xb)
            loss = ad.mean_(ad.mul(d, d))
            loss.backward()
            adam_update({k: t.data for k, t in params.items()},
                        {k: t.grad for k, t in params.items()}, opt)
            batch_losses.append(float(loss.data))
        epoch_loss = float(np.mean(batch_losses))
        _finite_or_abort(epoch_loss, ckpt, ae.encoder.state_arrays(), None,
                         {**meta, "epoch": epoch, "losses": losses}, rng,
                         "cip")
        losses.append(epoch_loss)
        log.info("cip[%s] epoch %d/%d loss %.3e", condition_on, epoch + 1,
                 tr["epochs"], epoch_loss)
    # the decoder is scaffolding: persist the encoder only
    save_checkpoint(ckpt, {f"enc.{k}": t.data
                           for k, t in ae.encoder.parameters().items()},
                    None, {**meta, "epoch": tr["epochs"] - 1,
                           "losses": losses}, rng)
    _write_loss_log(run_dir, f"cip_{condition_on}", losses)
    return ckpt


def load_cip_encoder(ckpt) -> CIPEncoder:
    params, _, meta = load_checkpoint(ckpt)
    enc = CIPEncoder(meta["layer_dims"], np.random.default_rng(0))
    enc.load_state_arrays({k[4:]: v for k, v in params.items()
                           if k.startswith("enc.")})
    return enc


# ---------------------------------------------------------------------------
# conditional denoiser (joint with the conditioning encoder)
# ---------------------------------------------------------------------------


def schedule_from_config(cfg: dict) -> NoiseSchedule:
    s = cfg["schedule"]
    return make_linear_schedule(s["T"], s["beta1"], s["betaT"],
                                s["sigma_mode"])


def train_diffusion(cfg: dict, run_dir, manifest: DatasetManifest,
                    condition_on: str = "fdunet",
                    resume: bool = False) -> Path:
    run_dir = Path(run_dir)
    data_dir = run_dir / "dataset"
    ckpt = run_dir / "checkpoints" / f"denoiser_{condition_on}.ckpt"
    cip_ckpt = run_dir / "checkpoints" / f"cip_{condition_on}.ckpt"
    if not cip_ckpt.is_dir():
        raise PrerequisiteError(
            f"train cip --condition-on {condition_on} must run before the "
            f"denoiser (missing {cip_ckpt.name})")
    sched = schedule_from_config(cfg)
    den_cfg = DenoiserConfig.from_dict(cfg["denoiser"])
    model = ConditionalDenoiser(den_cfg)
    encoder = load_cip_encoder(cip_ckpt)
    if encoder.out_dim != den_cfg.cond_dim:
        raise PrerequisiteError("conditioning encoder output dim mismatch")
    tr = cfg["training"]
    opt = OptimizerState(learning_rate=tr["learning_rate"],
                         beta1=tr["adam_beta1"], beta2=tr["adam_beta2"])
    rng = stage_rng(cfg["dataset"]["master_seed"],
                    f"diffusion_{condition_on}")

    cond_flat, grid = _cond_patches(cfg, manifest, data_dir, condition_on)
    gt = load_images(manifest, data_dir, "phantom", "train")
    gt_patches = []
    for im in gt:
        for p in split_patches(im, grid):
            gt_patches.append(p)
    # model space is [-1, 1]
    x0_all = (np.asarray(gt_patches, dtype=np.float32)[:, None] * 2.0 - 1.0)
    n = x0_all.shape[0]
    if n != cond_flat.shape[0]:
        raise PrerequisiteError("conditioning/target patch count mismatch")

    params = {**{f"den.{k}": t for k, t in model.parameters().items()},
              **{f"cip.{k}": t for k, t in encoder.parameters().items()}}
    meta = {"kind": "denoiser", "condition_on": condition_on,
            "config_hash": config_hash(cfg),
            "denoiser_config": den_cfg.to_dict(),
            "cip_layer_dims": list(encoder.layer_dims),
            "schedule": cfg["schedule"],
            "patch": {"h": grid.patch_h, "w": grid.patch_w}}
    losses = []
    start_epoch = 0
    if resume and ckpt.is_dir():
        p_arrays, opt_arrays, m = load_checkpoint(ckpt)
        model.load_state_arrays({k[4:]: v for k, v in p_arrays.items()
                                 if k.startswith("den.")})
        encoder.load_state_arrays({k[4:]: v for k, v in p_arrays.items()
                                   if k.startswith("cip.")})
        opt.load_state_arrays(opt_arrays, m["opt_step"])
        _restore_rng(rng, m)
        start_epoch = m["epoch"] + 1
        losses = list(m["losses"])

    sqrt_ab = np.sqrt(sched.alpha_bar).astype(np.float32)
    sqrt_1mab = np.sqrt(1.0 - sched.alpha_bar).astype(np.float32)

    def all_arrays():
        return {k: t.data for k, t in params.items()}

    for epoch in range(start_epoch, tr["epochs"]):
        batch_losses = []
        for idx in _epoch_batches(rng, n, tr["batch_size"]):
            t_batch = rng.integers(1, sched.T + 1, size=idx.size)
            eps = rng.standard_normal((idx.size, 1, grid.patch_h,
                                       grid.patch_w), dtype=np.float32)
            x0 = x0_all[idx]
            xt = (sqrt_ab[t_batch][:, None, None, None] * x0
                  + sqrt_1mab[t_batch][:, None, None, None] * eps)
            model.zero_grad()
            encoder.zero_grad()
            cond_vec = encoder(Tensor(cond_flat[idx]))
            pred = model(Tensor(xt), cond_vec, t_batch)
            d = ad.sub(pred, Tensor(eps))
            loss = ad.mean_(ad.mul(d, d))
            loss.backward()
            adam_update(all_arrays(),
                        {k: t.grad for k, t in params.items()}, opt)
            batch_losses.append(float(loss.data))
        epoch_loss = float(np.mean(batch_losses))
        _finite_or_abort(epoch_loss, ckpt, all_arrays(), opt,
                         {**meta, "epoch": epoch, "losses": losses}, rng,
                         "diffusion")
        losses.append(epoch_loss)
        log.info("diffusion[%s] epoch %d/%d loss %.4f", condition_on,
                 epoch + 1, tr["epochs"], epoch_loss)
        save_checkpoint(ckpt, all_arrays(), opt,
                        {**meta, "epoch": epoch, "losses": losses}, rng)
    if tr["epochs"] == 0 or not ckpt.is_dir():
        save_checkpoint(ckpt, all_arrays(), opt,
                        {**meta, "epoch": -1, "losses": losses}, rng)
    _write_loss_log(run_dir, f"diffusion_{condition_on}", losses)
    return ckpt


def load_denoiser(ckpt):
    """Returns (denoiser, jointly tuned conditioning encoder, schedule)."""
    p_arrays, _, meta = load_checkpoint(ckpt)
    model = ConditionalDenoiser(DenoiserConfig.from_dict(
        meta["denoiser_config"]))
    model.load_state_arrays({k[4:]: v for k, v in p_arrays.items()
                             if k.startswith("den.")})
    encoder = CIPEncoder(meta["cip_layer_dims"], np.random.default_rng(0))
    encoder.load_state_arrays({k[4:]: v for k, v in p_arrays.items()
                               if k.startswith("cip.")})
    s = meta["schedule"]
    sched = make_linear_schedule(s["T"], s["beta1"], s["betaT"],
                                 s["sigma_mode"])
    return model, encoder, sched
