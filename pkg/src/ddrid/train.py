"""Two-stage training of the class-specific and residual reconstruction networks.

Stage one pretrains both autoencoders on plain reconstruction.  The mean
latent code of the class-specific encoder over the training subset becomes
the frozen centroid.  Stage two runs, per minibatch:

(a) draw ``m`` latents from N(centroid, sigma^2 I);
(b) one ascent step of the latent discriminator;
(c) one descent step of the class-specific network on
    one-class + adversarial + joint reconstruction loss;
(d) one descent step of the residual network on the joint reconstruction loss.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import ImageDataset
from .errors import ArgumentError, CheckpointError, NumericError, ShapeError, StateError
from .nn import checkpoint as ckpt
from .nn.layers import Network, NetworkParams, NetworkSpec, init_params, standard_specs

log = logging.getLogger(__name__)

D_CLAMP = 1e-7
NO_DECAY = ("gamma", "beta")


@dataclass
class TrainConfig:
    batch_size: int = 256
    weight_decay: float = 1e-6
    pretrain_epochs: int = 150
    finetune_epochs: int = 100
    lr_initial: float = 1e-4
    lr_after: float = 1e-5
    lr_switch_epoch: int = 50
    sigma: float = 0.1
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ArgumentError("batch_size must be >= 2")
        if self.pretrain_epochs < 1 or self.finetune_epochs < 1 or self.lr_switch_epoch < 1:
            raise ArgumentError("epoch counts must be >= 1")
        if not self.sigma > 0:
            raise ArgumentError("sigma must be > 0")
        if not 0 < self.lr_after <= self.lr_initial:
            raise ArgumentError("need 0 < lr_after <= lr_initial")
        if self.weight_decay < 0:
            raise ArgumentError("weight_decay must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Two-phase schedule; ``epoch`` counts from 0 within a stage."""
        return self.lr_initial if epoch < self.lr_switch_epoch else self.lr_after


@dataclass
class Centroid:
    z_c: np.ndarray  # float64
    decoded_template: np.ndarray | None = None  # (C, H, W)


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    one_class: float = math.nan
    lsc_disc: float = math.nan
    lsc_enc: float = math.nan
    recon: float = math.nan
    recon_c: float = math.nan
    recon_n: float = math.nan
    lr: float = math.nan


class Autoencoder:
    """Encoder followed by decoder, trained as one unit."""

    def __init__(self, encoder: Network, decoder: Network):
        self.encoder = encoder
        self.decoder = decoder

    def forward(self, x, mode="train", update_stats=True):
        z = self.encoder.forward(x, mode, update_stats)
        return z, self.decoder.forward(z, mode, update_stats)

    def backward(self, d_recon, d_latent=None):
        dec_grads, dz = self.decoder.backward(d_recon)
        if d_latent is not None:
            dz = dz + d_latent
        enc_grads, _ = self.encoder.backward(dz)
        return enc_grads, dec_grads

    @property
    def params(self) -> tuple[NetworkParams, NetworkParams]:
        return self.encoder.params, self.decoder.params


# --- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    t: int = 0
    m: list[dict[str, np.ndarray]] = field(default_factory=list)
    v: list[dict[str, np.ndarray]] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "AdamState":
        m = [{k: np.zeros_like(a) for k, a in d.items() if k in ("weight", "bias", "gamma", "beta")} for d in params.layers]
        v = [{k: np.zeros_like(a) for k, a in d.items()} for d in m]
        return cls(0, m, v)


def adam_update(
    params: NetworkParams,
    grads: NetworkParams,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam step with bias correction and decoupled weight decay.

    Batch-norm scale/shift are exempt from weight decay.
    """
    if len(grads.layers) != len(params.layers) or len(state.m) != len(params.layers):
        raise ShapeError("params, grads and optimizer state disagree on layer count")
    state.t += 1
    c1 = 1 - beta1**state.t
    c2 = 1 - beta2**state.t
    for p, g, m, v in zip(params.layers, grads.layers, state.m, state.v):
        if set(g) != set(m):
            raise ShapeError(f"gradient arrays {sorted(g)} do not match optimizer state {sorted(m)}")
        for name, grad in g.items():
            arr = p[name]
            if grad.shape != arr.shape or m[name].shape != arr.shape:
                raise ShapeError(f"{name}: grad {grad.shape} vs param {arr.shape}")
            m[name] *= beta1
            m[name] += (1 - beta1) * grad
            v[name] *= beta2
            v[name] += (1 - beta2) * grad * grad
            step = (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)
            if weight_decay and name not in NO_DECAY:
                arr -= (lr * weight_decay) * arr
            arr -= (lr * step).astype(arr.dtype)


# --- loss terms ----------------------------------------------------------------


def _sq_norms(diff: np.ndarray) -> np.ndarray:
    d = diff.reshape(len(diff), -1).astype(np.float64)
    return np.einsum("ij,ij->i", d, d)


def one_class_terms(z: np.ndarray, z_c: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared distance to the centroid and its gradient w.r.t. ``z``."""
    diff = z.astype(np.float64) - z_c
    m = len(z)
    return float(_sq_norms(diff).mean()), (2.0 / m) * diff


def reconstruction_terms(xc: np.ndarray, xn: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error of the summed reconstruction; gradient w.r.t. each branch."""
    diff = xc.astype(np.float64) + xn - x
    m = len(x)
    return float(_sq_norms(diff).mean()), (2.0 / m) * diff


def autoencoder_terms(recon: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
    diff = recon.astype(np.float64) - x
    return float(_sq_norms(diff).mean()), (2.0 / len(x)) * diff


def _clamped(p):
    p = p.astype(np.float64).reshape(-1)
    return np.clip(p, D_CLAMP, 1 - D_CLAMP), (p > D_CLAMP) & (p < 1 - D_CLAMP)


def log_term(p: np.ndarray) -> tuple[float, np.ndarray]:
    """mean log D and its gradient w.r.t. the (clamped) outputs."""
    pc, live = _clamped(p)
    grad = np.where(live, 1.0 / (len(pc) * pc), 0.0)
    return float(np.log(pc).mean()), grad.reshape(p.shape)


def log1m_term(p: np.ndarray) -> tuple[float, np.ndarray]:
    """mean log(1 - D) and its gradient w.r.t. the (clamped) outputs."""
    pc, live = _clamped(p)
    grad = np.where(live, -1.0 / (len(pc) * (1 - pc)), 0.0)
    return float(np.log1p(-pc).mean()), grad.reshape(p.shape)


def discriminator_terms(p_real: np.ndarray, p_fake: np.ndarray):
    """mean log D(real) + mean log(1 - D(fake)) and its gradients w.r.t. both outputs."""
    obj_r, d_real = log_term(p_real)
    obj_f, d_fake = log1m_term(p_fake)
    return obj_r + obj_f, d_real, d_fake


def encoder_adversarial_terms(p_fake: np.ndarray):
    """mean log(1 - D(E(x))) and its gradient w.r.t. the discriminator outputs."""
    return log1m_term(p_fake)


def _neg(grads: NetworkParams) -> NetworkParams:
    return NetworkParams([{k: -v for k, v in d.items()} for d in grads.layers])


# --- the joint model ---------------------------------------------------------------


class DualNetworks:
    """The two autoencoders plus the latent discriminator, bound to parameters."""

    def __init__(self, specs, enc_c, dec_c, enc_n, dec_n, disc):
        enc_spec, dec_spec, disc_spec = specs
        self.specs = specs
        self.rc = Autoencoder(Network(enc_spec, enc_c), Network(dec_spec, dec_c))
        self.rn = Autoencoder(Network(enc_spec, enc_n), Network(dec_spec, dec_n))
        self.disc = Network(disc_spec, disc)

    def forward_pair(self, x, update_stats=True):
        z, xc = self.rc.forward(x, "train", update_stats)
        _, xn = self.rn.forward(x, "train", update_stats)
        return z, xc, xn

    def disc_objective_grads(self, real, fake, update_stats=True):
        """Discriminator objective (to ascend) and its parameter gradients.

        Real and fake latents pass through batch norm as separate batches.
        """
        p_real = self.disc.forward(real, "train", update_stats)
        obj_real, d_real = log_term(p_real)
        grads_real, _ = self.disc.backward(d_real)
        p_fake = self.disc.forward(fake, "train", update_stats)
        obj_fake, d_fake = log1m_term(p_fake)
        grads_fake, _ = self.disc.backward(d_fake)
        total = NetworkParams(
            [{k: a[k] + b[k] for k in a} for a, b in zip(grads_real.layers, grads_fake.layers)]
        )
        return obj_real + obj_fake, total


def _param_sets(nets: DualNetworks):
    return {
        "encoder_c": nets.rc.encoder.params,
        "decoder_c": nets.rc.decoder.params,
        "encoder_n": nets.rn.encoder.params,
        "decoder_n": nets.rn.decoder.params,
        "discriminator": nets.disc.params,
    }


@dataclass
class TrainedModel:
    specs: tuple[NetworkSpec, NetworkSpec, NetworkSpec]
    encoder_c: NetworkParams
    decoder_c: NetworkParams
    encoder_n: NetworkParams
    decoder_n: NetworkParams
    discriminator: NetworkParams
    centroid: Centroid
    config: TrainConfig
    loss_history: list[EpochRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    optimizer_states: dict[str, AdamState] = field(default_factory=dict)
    score_kind: str | None = None
    meta: dict = field(default_factory=dict)

    def networks(self) -> DualNetworks:
        return DualNetworks(
            self.specs, self.encoder_c, self.decoder_c, self.encoder_n, self.decoder_n, self.discriminator
        )

    def param_sets(self) -> dict[str, NetworkParams]:
        return {
            "encoder_c": self.encoder_c,
            "decoder_c": self.decoder_c,
            "encoder_n": self.encoder_n,
            "decoder_n": self.decoder_n,
            "discriminator": self.discriminator,
        }

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, p in self.param_sets().items():
            h.update(name.encode())
            h.update(p.checksum().encode())
        h.update(self.centroid.z_c.tobytes())
        if self.centroid.decoded_template is not None:
            h.update(self.centroid.decoded_template.tobytes())
        return h.hexdigest()


# --- seeds -------------------------------------------------------------------------

_STREAMS = ("init_enc_c", "init_dec_c", "init_enc_n", "init_dec_n", "init_disc", "pretrain", "finetune")


def derive_seeds(seed: int) -> dict[str, int]:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: int(ss.generate_state(1)[0]) for name, ss in zip(_STREAMS, children)}


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) >= 2:
            yield np.sort(idx)


def _check_finite(value: float, stage: str, epoch: int, batch: int, what: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {what} in {stage} epoch {epoch} batch {batch}")


# --- stage one ---------------------------------------------------------------------


def pretrain(
    train_subset: ImageDataset,
    cfg: TrainConfig,
    specs=None,
    dataset_kind: str = "mnist",
    history: list[EpochRecord] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[tuple[NetworkParams, NetworkParams], tuple[NetworkParams, NetworkParams]]:
    """Train both autoencoders on plain reconstruction.

    Returns ``((encoder_c, decoder_c), (encoder_n, decoder_n))``.  Epoch
    records are appended to ``history`` when given.
    """
    if len(train_subset) == 0:
        raise ArgumentError("empty training subset")
    specs = specs or standard_specs(dataset_kind)
    enc_spec, dec_spec, _ = specs
    seeds = derive_seeds(cfg.seed)
    rc = Autoencoder(
        Network(enc_spec, init_params(enc_spec, seeds["init_enc_c"])),
        Network(dec_spec, init_params(dec_spec, seeds["init_dec_c"])),
    )
    rn = Autoencoder(
        Network(enc_spec, init_params(enc_spec, seeds["init_enc_n"])),
        Network(dec_spec, init_params(dec_spec, seeds["init_dec_n"])),
    )
    opt = {k: AdamState.zeros_like(p) for k, p in
           (("ec", rc.encoder.params), ("dc", rc.decoder.params), ("en", rn.encoder.params), ("dn", rn.decoder.params))}
    rng = np.random.default_rng(seeds["pretrain"])
    x_all = train_subset.images
    adam = dict(weight_decay=cfg.weight_decay, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)

    for epoch in range(cfg.pretrain_epochs):
        lr = cfg.lr_at(epoch)
        sums = np.zeros(2)
        count = 0
        for b, idx in enumerate(_batches(len(x_all), cfg.batch_size, rng)):
            x = x_all[idx]
            for j, (ae, ke, kd) in enumerate(((rc, "ec", "dc"), (rn, "en", "dn"))):
                _, recon = ae.forward(x)
                loss, d = autoencoder_terms(recon, x)
                _check_finite(loss, "pretrain", epoch, b, "reconstruction loss")
                ge, gd = ae.backward(d)
                adam_update(ae.encoder.params, ge, opt[ke], lr, **adam)
                adam_update(ae.decoder.params, gd, opt[kd], lr, **adam)
                sums[j] += loss * len(idx)
            count += len(idx)
        rec = EpochRecord(epoch, "pretrain", recon=float(sums.sum() / count),
                          recon_c=float(sums[0] / count), recon_n=float(sums[1] / count), lr=lr)
        log.info("pretrain epoch %d  R_C %.5f  R_N %.5f  lr %g", epoch, rec.recon_c, rec.recon_n, lr)
        if history is not None:
            history.append(rec)
        if on_epoch:
            on_epoch(rec)
    return rc.params, rn.params


def encode(encoder: Network, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Inference-mode latent codes, computed in chunks."""
    out = [encoder.forward(images[s : s + batch_size], "inference") for s in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0,) + encoder.spec.output_shape, encoder.dtype)


def compute_centroid(encoder_c, train_subset, batch_size: int = 512) -> Centroid:
    """Mean inference-mode latent code over the training subset (float64)."""
    images = train_subset.images if isinstance(train_subset, ImageDataset) else np.asarray(train_subset)
    if len(images) == 0:
        raise ArgumentError("cannot compute a centroid from an empty subset")
    z = encode(encoder_c, images, batch_size).astype(np.float64)
    return Centroid(z.mean(axis=0))


def one_class_loss(encoder_c: Network, batch: np.ndarray, z_c: np.ndarray, mode: str = "inference") -> float:
    if len(batch) == 0:
        raise ArgumentError("empty batch")
    return one_class_terms(encoder_c.forward(batch, mode, update_stats=False), z_c)[0]


def lsc_loss_components(
    discriminator: Network, encoder_c: Network, real_latents: np.ndarray, batch: np.ndarray, mode: str = "train"
) -> tuple[float, float]:
    """(discriminator objective, encoder objective) for one minibatch."""
    if len(real_latents) != len(batch):
        raise ArgumentError("real_latents and batch must have equal counts")
    z = encoder_c.forward(batch, mode, update_stats=False)
    p_real = discriminator.forward(real_latents, mode, update_stats=False)
    p_fake = discriminator.forward(z, mode, update_stats=False)
    disc_obj, _, _ = discriminator_terms(p_real, p_fake)
    enc_obj, _ = encoder_adversarial_terms(p_fake)
    return disc_obj, enc_obj


def reconstruction_loss(rc: Autoencoder, rn: Autoencoder, batch: np.ndarray, mode: str = "inference") -> float:
    if len(batch) == 0:
        raise ArgumentError("empty batch")
    _, xc = rc.forward(batch, mode, update_stats=False)
    _, xn = rn.forward(batch, mode, update_stats=False)
    return reconstruction_terms(xc, xn, batch)[0]


# --- stage two ---------------------------------------------------------------------


def finetune_step(
    nets: DualNetworks,
    opt: dict[str, AdamState],
    x: np.ndarray,
    real_latents: np.ndarray,
    z_c: np.ndarray,
    lr: float,
    cfg: TrainConfig,
    after_update: Callable[[str], None] | None = None,
) -> dict[str, float]:
    """One minibatch of updates (b), (c), (d); ``after_update`` is called with
    ``"disc"``, ``"rc"`` and ``"rn"`` right after each one."""
    adam = dict(weight_decay=cfg.weight_decay, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    z, xc, xn = nets.forward_pair(x)
    rec, d_rec = reconstruction_terms(xc, xn, x)

    # (b) ascend the discriminator objective
    disc_obj, g_disc = nets.disc_objective_grads(real_latents, z)
    adam_update(nets.disc.params, _neg(g_disc), opt["discriminator"], lr, **adam)
    if after_update:
        after_update("disc")

    # (c) class-specific network: one-class + adversarial + joint reconstruction
    oc, dz_oc = one_class_terms(z, z_c)
    p_fake = nets.disc.forward(z, "train", update_stats=False)
    enc_obj, dp = encoder_adversarial_terms(p_fake)
    _, dz_adv = nets.disc.backward(dp)
    g_ec, g_dc = nets.rc.backward(d_rec, dz_oc + dz_adv)

    # (d) residual network: joint reconstruction only, same forward pass
    g_en, g_dn = nets.rn.backward(d_rec)

    adam_update(nets.rc.encoder.params, g_ec, opt["encoder_c"], lr, **adam)
    adam_update(nets.rc.decoder.params, g_dc, opt["decoder_c"], lr, **adam)
    if after_update:
        after_update("rc")
    adam_update(nets.rn.encoder.params, g_en, opt["encoder_n"], lr, **adam)
    adam_update(nets.rn.decoder.params, g_dn, opt["decoder_n"], lr, **adam)
    if after_update:
        after_update("rn")
    return {"one_class": oc, "lsc_disc": disc_obj, "lsc_enc": enc_obj, "recon": rec}


def rc_objective_and_grads(nets: DualNetworks, x, z_c, update_stats=False):
    """Value and gradients of the class-specific update objective at the current
    parameters (no update).  Used to cross-check finetune gradients."""
    z, xc, xn = nets.forward_pair(x, update_stats)
    rec, d_rec = reconstruction_terms(xc, xn, x)
    oc, dz_oc = one_class_terms(z, z_c)
    p_fake = nets.disc.forward(z, "train", update_stats=False)
    enc_obj, dp = encoder_adversarial_terms(p_fake)
    _, dz_adv = nets.disc.backward(dp)
    g_ec, g_dc = nets.rc.backward(d_rec, dz_oc + dz_adv)
    g_en, g_dn = nets.rn.backward(d_rec)
    values = {"one_class": oc, "lsc_enc": enc_obj, "recon": rec}
    return values, {"encoder_c": g_ec, "decoder_c": g_dc, "encoder_n": g_en, "decoder_n": g_dn}


def latent_spread(encoder: Network, images: np.ndarray, z_c: np.ndarray) -> float:
    """Mean inference-mode squared distance of the encodings to ``z_c``."""
    z = encode(encoder, images).astype(np.float64)
    return float(_sq_norms(z - z_c).mean())


def sample_latents(rng: np.random.Generator, z_c: np.ndarray, sigma: float, m: int, dtype=np.float32) -> np.ndarray:
    return (z_c + sigma * rng.standard_normal((m, len(z_c)))).astype(dtype)


def finetune(
    params_c: tuple[NetworkParams, NetworkParams],
    params_n: tuple[NetworkParams, NetworkParams],
    centroid: Centroid,
    train_subset: ImageDataset,
    cfg: TrainConfig,
    specs=None,
    dataset_kind: str = "mnist",
    history: list[EpochRecord] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainedModel:
    """Joint finetuning; returns the trained model with its decoded template."""
    specs = specs or standard_specs(dataset_kind)
    seeds = derive_seeds(cfg.seed)
    disc = init_params(specs[2], seeds["init_disc"])
    nets = DualNetworks(specs, params_c[0], params_c[1], params_n[0], params_n[1], disc)
    opt = {name: AdamState.zeros_like(p) for name, p in _param_sets(nets).items()}
    z_c = centroid.z_c
    z_c_before = z_c.copy()
    rng = np.random.default_rng(seeds["finetune"])
    x_all = train_subset.images
    spread_before = latent_spread(nets.rc.encoder, x_all, z_c)
    history = [] if history is None else history
    warnings: list[str] = []

    for epoch in range(cfg.finetune_epochs):
        lr = cfg.lr_at(epoch)
        sums = dict(one_class=0.0, lsc_disc=0.0, lsc_enc=0.0, recon=0.0)
        disc_values = []
        count = 0
        for b, idx in enumerate(_batches(len(x_all), cfg.batch_size, rng)):
            real = sample_latents(rng, z_c, cfg.sigma, len(idx))
            losses = finetune_step(nets, opt, x_all[idx], real, z_c, lr, cfg)
            for key, value in losses.items():
                _check_finite(value, "finetune", epoch, b, key)
                sums[key] += value * len(idx)
            disc_values.append(losses["lsc_disc"])
            count += len(idx)
        rec = EpochRecord(epoch, "finetune", lr=lr, **{k: v / count for k, v in sums.items()})
        if len(disc_values) and max(disc_values) - min(disc_values) <= 1e-12:
            msg = f"finetune epoch {epoch}: discriminator objective saturated at {disc_values[0]:.6g}"
            warnings.append(msg)
            log.warning(msg)
        log.info(
            "finetune epoch %d  L_OC %.5f  L_LSC(d) %.4f  L_LSC(e) %.4f  L_R %.5f  lr %g",
            epoch, rec.one_class, rec.lsc_disc, rec.lsc_enc, rec.recon, lr,
        )
        history.append(rec)
        if on_epoch:
            on_epoch(rec)

    if not np.array_equal(z_c, z_c_before):
        raise StateError("centroid changed during finetuning")
    template = nets.rc.decoder.forward(z_c[None, :].astype(nets.rc.decoder.dtype), "inference")[0]
    model = TrainedModel(
        specs=specs,
        encoder_c=nets.rc.encoder.params,
        decoder_c=nets.rc.decoder.params,
        encoder_n=nets.rn.encoder.params,
        decoder_n=nets.rn.decoder.params,
        discriminator=nets.disc.params,
        centroid=Centroid(z_c, template),
        config=cfg,
        loss_history=history,
        warnings=warnings,
        optimizer_states=opt,
        meta={"latent_spread_before": spread_before,
              "latent_spread_after": latent_spread(nets.rc.encoder, x_all, z_c)},
    )
    for name, p in model.param_sets().items():
        if not p.all_finite():
            raise NumericError(f"non-finite parameters in {name} after finetuning")
    return model


def train_model(
    train_subset: ImageDataset,
    cfg: TrainConfig,
    specs=None,
    dataset_kind: str = "mnist",
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainedModel:
    """Pretrain, compute the centroid, finetune."""
    specs = specs or standard_specs(dataset_kind)
    history: list[EpochRecord] = []
    params_c, params_n = pretrain(train_subset, cfg, specs, history=history, on_epoch=on_epoch)
    centroid = compute_centroid(Network(specs[0], params_c[0]), train_subset)
    return finetune(params_c, params_n, centroid, train_subset, cfg, specs, history=history, on_epoch=on_epoch)


# --- persistence -------------------------------------------------------------------

LOSS_LOG_COLUMNS = ("epoch", "stage", "L_OC", "L_LSC_disc", "L_LSC_enc", "L_R", "learning_rate")


def _fmt(value: float) -> str:
    return "" if math.isnan(value) else repr(float(value))


def write_loss_log(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOSS_LOG_COLUMNS)
        for r in history:
            w.writerow([r.epoch, r.stage, _fmt(r.one_class), _fmt(r.lsc_disc), _fmt(r.lsc_enc), _fmt(r.recon), _fmt(r.lr)])


def save_model(model: TrainedModel, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    networks = {}
    for (name, params), spec in zip(
        model.param_sets().items(),
        (model.specs[0], model.specs[1], model.specs[0], model.specs[1], model.specs[2]),
    ):
        arrays.update(ckpt.network_arrays(name, params))
        networks[name] = ckpt.network_meta(spec)
        state = model.optimizer_states.get(name)
        if state is not None:
            for i, d in enumerate(state.m):
                for k, a in d.items():
                    arrays[f"adam_m/{name}/{i}/{k}"] = a.astype("<f4")
                    arrays[f"adam_v/{name}/{i}/{k}"] = state.v[i][k].astype("<f4")
    arrays["centroid/z_c"] = model.centroid.z_c.astype("<f8")
    if model.centroid.decoded_template is not None:
        arrays["centroid/decoded_template"] = model.centroid.decoded_template.astype("<f4")
    meta = {
        "networks": networks,
        "specs": {k: asdict_spec(s) for k, s in zip(("encoder", "decoder", "discriminator"), model.specs)},
        "train_config": asdict(model.config),
        "adam_steps": {k: s.t for k, s in model.optimizer_states.items()},
        "score_kind": model.score_kind,
        "warnings": model.warnings,
        "loss_history": [asdict(r) for r in model.loss_history],
        "meta": model.meta,
    }
    ckpt.write_container(path, arrays, _json_safe(meta))


def asdict_spec(spec: NetworkSpec) -> dict:
    return {"name": spec.name, "input_shape": list(spec.input_shape), "layers": [asdict(l) for l in spec.layers]}


def spec_from_dict(d: dict) -> NetworkSpec:
    from .nn.layers import LayerSpec

    return NetworkSpec(tuple(LayerSpec(**l) for l in d["layers"]), tuple(d["input_shape"]), d.get("name", ""))


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def load_model(path, specs=None) -> TrainedModel:
    """Read a checkpoint; ``specs`` (if given) must match the stored fingerprints."""
    arrays, meta = ckpt.read_container(path)
    try:
        stored_specs = tuple(spec_from_dict(meta["specs"][k]) for k in ("encoder", "decoder", "discriminator"))
        specs = specs or stored_specs
        order = (specs[0], specs[1], specs[0], specs[1], specs[2])
        names = ("encoder_c", "decoder_c", "encoder_n", "decoder_n", "discriminator")
        params = {n: ckpt.params_from_arrays(n, s, arrays, meta) for n, s in zip(names, order)}
        template = arrays.get("centroid/decoded_template")
        centroid = Centroid(arrays["centroid/z_c"].astype(np.float64), None if template is None else template.astype(np.float32))
        opt = {}
        for n in names:
            steps = meta.get("adam_steps", {}).get(n)
            if steps is None:
                continue
            state = AdamState.zeros_like(params[n])
            state.t = steps
            for i, d in enumerate(state.m):
                for k in d:
                    d[k] = arrays[f"adam_m/{n}/{i}/{k}"].astype(np.float32)
                    state.v[i][k] = arrays[f"adam_v/{n}/{i}/{k}"].astype(np.float32)
            opt[n] = state
        cfg = TrainConfig(**meta["train_config"])
        history = [
            EpochRecord(**{k: (math.nan if v is None else v) for k, v in r.items()}) for r in meta.get("loss_history", [])
        ]
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    if len(centroid.z_c) != specs[0].output_shape[0]:
        raise CheckpointError(f"{path}: centroid length does not match the encoder")
    return TrainedModel(
        specs=specs,
        centroid=centroid,
        config=cfg,
        loss_history=history,
        warnings=list(meta.get("warnings", [])),
        optimizer_states=opt,
        score_kind=meta.get("score_kind"),
        meta=meta.get("meta", {}),
        **params,
    )
