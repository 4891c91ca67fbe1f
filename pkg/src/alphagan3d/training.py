"""The adversarial training loop: per-iteration D -> C -> G/E updates,
loss logging, and binary checkpoints with byte-exact round trips.

Within one iteration the discriminator minimizes its critic objective,
the code discriminator its latent critic objective, and the generator
and encoder jointly minimize the selected generator loss; fresh prior
samples are drawn per phase and encoder codes are recomputed after
encoder updates.
"""
from __future__ import annotations

import io
import json
import struct
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from .errors import ContractError, FormatError, VersionError
from .losses import LossWeights
from .networks import AlphaGanBundle, load_preset, network_spec_from_text
from .optim import OptimizerConfig, make_optimizer
from .rng import SeedStream, named_streams
from .data.pipeline import AugmentationPolicy, augment

GENERATOR_LOSSES = ("l_g1", "l_g2", "l_g3")
PRESET_OPTIMIZER = {"adni_baseline": "adam", "sigmarat1": "adam",
                    "sigmarat2": "adamw"}
STREAM_NAMES = ("shuffle", "latent", "gp_d", "gp_c", "augment")
CHECKPOINT_MAGIC = b"AGAN"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("iteration", "L_D", "L_C", "L_G", "GP_D", "GP_C", "wallclock_ms")


class TrainingDivergedError(RuntimeError):
    """A loss term became NaN/Inf during training."""


@dataclass
class TrainingConfig:
    preset: str = "sigmarat2"
    loss: str = "l_g3"
    iterations: int = 200_000
    batch_size: int = 4
    latent_dim: int | None = None       # preset default when None
    width_mult: float = 1.0
    volume_shape: tuple = (64, 64, 64)
    optimizer: str | None = None        # preset default when None
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    weights: LossWeights | None = None  # preset default when None
    d_steps: int = 1
    c_steps: int = 1
    g_steps: int = 1
    seed: int = 0
    checkpoint_interval: int = 1000
    augmentation: AugmentationPolicy | None = None
    gdl_alpha: float = 1.0
    spec_overrides: dict | None = None  # role -> network spec text

    def __post_init__(self):
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2 (batch statistics "
                                "and interpolation pairing need it)")
        if self.iterations < 1:
            raise ContractError("iterations must be positive")
        if self.loss not in GENERATOR_LOSSES:
            raise ContractError(f"loss must be one of {GENERATOR_LOSSES}")
        if min(self.d_steps, self.c_steps, self.g_steps) < 1:
            raise ContractError("update ratio entries must be >= 1")

    def resolved(self) -> "TrainingConfig":
        out = self
        if out.weights is None:
            out = replace(out, weights=LossWeights.for_preset(out.preset))
        if out.optimizer is None:
            out = replace(out, optimizer=PRESET_OPTIMIZER.get(out.preset, "adam"))
        if out.latent_dim is None:
            bundle_default = {"adni_baseline": 1000}.get(out.preset, 500)
            out = replace(out, latent_dim=bundle_default)
        return out

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(learning_rate=self.learning_rate, beta1=self.beta1,
                               beta2=self.beta2, eps=self.eps,
                               weight_decay=self.weight_decay)


@dataclass
class TrainerState:
    optimizers: dict
    streams: dict[str, SeedStream]
    iteration: int = 0
    epoch_perm: list[int] = field(default_factory=list)
    epoch_pos: int = 0


def make_trainer_state(bundle: AlphaGanBundle, config: TrainingConfig) -> TrainerState:
    cfg = config.optimizer_config()
    kind = config.optimizer
    ge_params = {}
    for role in ("generator", "encoder"):
        for name, p in bundle.networks[role].parameters().items():
            ge_params[f"{role}/{name}"] = p
    optimizers = {
        "d": make_optimizer(kind, bundle.discriminator.parameters(), cfg),
        "c": make_optimizer(kind, bundle.code_discriminator.parameters(), cfg),
        "ge": make_optimizer(kind, ge_params, cfg),
    }
    streams = named_streams(config.seed, STREAM_NAMES)
    return TrainerState(optimizers=optimizers, streams=streams)


def _require_finite(name: str, value: float) -> float:
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss term {name!r}: {value}")
    return float(value)


def _sample_latents(state: TrainerState, n: int, latent_dim: int) -> ad.DiffTensor:
    return ad.constant(state.streams["latent"].normal((n, latent_dim)))


def _build_bundle(config: TrainingConfig) -> AlphaGanBundle:
    overrides = None
    if config.spec_overrides:
        overrides = {role: network_spec_from_text(text)
                     for role, text in config.spec_overrides.items()}
    return load_preset(config.preset, config.volume_shape,
                       latent_dim=config.latent_dim,
                       width_mult=config.width_mult, seed=config.seed,
                       spec_overrides=overrides)


def _encode_detached(bundle, x, training=True):
    with ad.no_grad():
        z = bundle.encoder(x, training=training)
    return z.detach()


def train_iteration(bundle: AlphaGanBundle, batch: np.ndarray,
                    config: TrainingConfig, state: TrainerState) -> dict:
    """One D -> C -> G/E update cycle on a preprocessed batch.

    Returns the loss record {L_D, L_C, L_G, GP_D, GP_C}.
    """
    config = config.resolved()
    w = config.weights
    x = ad.constant(np.ascontiguousarray(batch, dtype=np.float32))
    n = x.shape[0]
    record = {}

    bundle.set_trainable(generator=False, encoder=False, code_discriminator=False,
                         discriminator=True)
    for _ in range(config.d_steps):
        z_e = _encode_detached(bundle, x)
        z_r = _sample_latents(state, n, config.latent_dim)
        terms = losses.l_d_terms(bundle.discriminator, bundle.generator, x,
                                 z_e, z_r, w.lambda1, state.streams["gp_d"])
        record["L_D"] = _require_finite("L_D", terms["total"].item())
        record["GP_D"] = _require_finite("GP_D", terms["gp"].item())
        bundle.discriminator.zero_grad()
        ad.backward(terms["total"])
        state.optimizers["d"].step()
        bundle.discriminator.zero_grad()

    bundle.set_trainable(discriminator=False, code_discriminator=True)
    for _ in range(config.c_steps):
        z_e = _encode_detached(bundle, x)
        z_r = _sample_latents(state, n, config.latent_dim)
        terms = losses.l_c_terms(bundle.code_discriminator, z_e, z_r,
                                 w.lambda1, state.streams["gp_c"])
        record["L_C"] = _require_finite("L_C", terms["total"].item())
        record["GP_C"] = _require_finite("GP_C", terms["gp"].item())
        bundle.code_discriminator.zero_grad()
        ad.backward(terms["total"])
        state.optimizers["c"].step()
        bundle.code_discriminator.zero_grad()

    bundle.set_trainable(code_discriminator=False, generator=True, encoder=True)
    loss_fn = {"l_g1": losses.l_g1_terms, "l_g2": losses.l_g2_terms,
               "l_g3": losses.l_g3_terms}[config.loss]
    for _ in range(config.g_steps):
        z_r = _sample_latents(state, n, config.latent_dim)
        kwargs = {"gdl_alpha": config.gdl_alpha} if config.loss == "l_g3" else {}
        terms = loss_fn(bundle.discriminator, bundle.generator,
                        bundle.code_discriminator, bundle.encoder, x, z_r, w,
                        **kwargs)
        record["L_G"] = _require_finite("L_G", terms["total"].item())
        bundle.generator.zero_grad()
        bundle.encoder.zero_grad()
        ad.backward(terms["total"])
        state.optimizers["ge"].step()
        bundle.generator.zero_grad()
        bundle.encoder.zero_grad()

    bundle.set_trainable(discriminator=True, code_discriminator=True)
    state.iteration += 1
    return record


def _next_batch(dataset, config: TrainingConfig, state: TrainerState) -> np.ndarray:
    n = len(dataset)
    bs = config.batch_size
    if n < bs:
        idx = state.streams["shuffle"].integers(0, n, (bs,))
    else:
        idx = []
        while len(idx) < bs:
            if state.epoch_pos >= len(state.epoch_perm):
                state.epoch_perm = list(state.streams["shuffle"].permutation(n))
                state.epoch_pos = 0
            idx.append(state.epoch_perm[state.epoch_pos])
            state.epoch_pos += 1
    vols = []
    for i in idx:
        v = dataset[int(i)]
        if config.augmentation is not None:
            v = augment(v, config.augmentation, state.streams["augment"])
        vols.append(v)
    return np.stack(vols)[:, None, :, :, :]


def generate_volumes(bundle: AlphaGanBundle, count: int, stream: SeedStream,
                     batch_size: int = 8) -> list[np.ndarray]:
    """Sample prior codes and decode volumes in eval mode."""
    out = []
    while len(out) < count:
        n = min(batch_size, count - len(out))
        z = ad.constant(stream.normal((n, bundle.latent_dim)))
        with ad.no_grad():
            vols = bundle.generator(z, training=False)
        out.extend(np.asarray(vols.numpy()[i, 0]) for i in range(n))
    return out


def reconstruct_volumes(bundle: AlphaGanBundle, batch: np.ndarray) -> np.ndarray:
    """G(E(x)) in eval mode for a [N,1,D,H,W] batch."""
    with ad.no_grad():
        z = bundle.encoder(ad.constant(batch), training=False)
        rec = bundle.generator(z, training=False)
    return rec.numpy()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODE_FOR_KIND = {"f4": 0, "f8": 1, "i8": 2}


@dataclass
class Checkpoint:
    """Ordered name -> (numpy array | json-able dict) entry map."""

    entries: dict

    @property
    def meta(self) -> dict:
        return self.entries["meta"]

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        plen = len(prefix)
        return {k[plen:]: v for k, v in self.entries.items()
                if k.startswith(prefix) and isinstance(v, np.ndarray)}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(ckpt.entries)))
    for name, value in ckpt.entries.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        if isinstance(value, np.ndarray):
            arr = np.ascontiguousarray(value)
            kind = arr.dtype.newbyteorder("<").str.lstrip("<>|=")
            if kind not in _CODE_FOR_KIND:
                raise ContractError(f"checkpoint entry {name!r}: dtype {arr.dtype}")
            buf.write(struct.pack("<BB", 0, _CODE_FOR_KIND[kind]))
            buf.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                buf.write(struct.pack("<I", d))
            buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
        else:
            payload = json.dumps(value, sort_keys=True).encode("utf-8")
            buf.write(struct.pack("<B", 1))
            buf.write(struct.pack("<I", len(payload)))
            buf.write(payload)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    view = io.BytesIO(raw)

    def take(n, what):
        b = view.read(n)
        if len(b) != n:
            raise FormatError(f"{path}: truncated checkpoint ({what})")
        return b

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise VersionError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (kind,) = struct.unpack("<B", take(1, "kind"))
        if kind == 0:
            dtype_code, ndim = struct.unpack("<BB", take(2, "array header"))
            if dtype_code not in _DTYPE_CODES:
                raise FormatError(f"{path}: unknown dtype code {dtype_code}")
            shape = tuple(struct.unpack("<I", take(4, "dim"))[0]
                          for _ in range(ndim))
            dtype = _DTYPE_CODES[dtype_code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            data = take(nbytes, f"array {name}")
            entries[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
        elif kind == 1:
            (plen,) = struct.unpack("<I", take(4, "json length"))
            entries[name] = json.loads(take(plen, "json").decode("utf-8"))
        else:
            raise FormatError(f"{path}: unknown entry kind {kind}")
    return Checkpoint(entries=entries)


def checkpoint_from_state(bundle: AlphaGanBundle, config: TrainingConfig,
                          state: TrainerState) -> Checkpoint:
    from . import __version__

    config = config.resolved()
    entries = {}
    entries["meta"] = {
        "format": "alphagan3d-checkpoint",
        "tool_version": __version__,
        "preset": bundle.preset,
        "iteration": state.iteration,
        "latent_dim": bundle.latent_dim,
        "width_mult": bundle.width_mult,
        "volume_shape": list(bundle.volume_shape),
        "seed": config.seed,
        "loss": config.loss,
        "optimizer": config.optimizer,
        "learning_rate": config.learning_rate,
        "lambda1": config.weights.lambda1,
        "lambda2": config.weights.lambda2,
        "lambda3": config.weights.lambda3,
        "spec_overrides": config.spec_overrides or {},
    }
    for name, p in sorted(bundle.parameters().items()):
        entries[f"param/{name}"] = p.numpy()
    for name, b in sorted(bundle.buffers().items()):
        entries[f"buffer/{name}"] = np.asarray(b)
    for group, opt in state.optimizers.items():
        entries[f"opt/{group}/step"] = {"step": opt.state.step}
        for name in sorted(opt.state.m):
            entries[f"opt/{group}/m/{name}"] = opt.state.m[name]
            entries[f"opt/{group}/v/{name}"] = opt.state.v[name]
    for name, stream in state.streams.items():
        entries[f"rng/{name}"] = stream.state()
    entries["epoch"] = {"perm": [int(i) for i in state.epoch_perm],
                        "pos": state.epoch_pos}
    return Checkpoint(entries=entries)


def bundle_from_checkpoint(ckpt: Checkpoint) -> AlphaGanBundle:
    meta = ckpt.meta
    overrides = None
    if meta.get("spec_overrides"):
        overrides = {role: network_spec_from_text(text)
                     for role, text in meta["spec_overrides"].items()}
    bundle = load_preset(meta["preset"], tuple(meta["volume_shape"]),
                         latent_dim=meta["latent_dim"],
                         width_mult=meta["width_mult"], seed=meta["seed"],
                         spec_overrides=overrides)
    params = ckpt.arrays("param/")
    live = bundle.parameters()
    if set(params) != set(live):
        raise ContractError(
            f"checkpoint parameter names do not match preset {meta['preset']!r}")
    for name, arr in params.items():
        if live[name].shape != arr.shape:
            raise ContractError(f"checkpoint parameter {name!r} shape mismatch")
        live[name].data = arr.astype(live[name].dtype, copy=True)
    buffers = ckpt.arrays("buffer/")
    for role, net in bundle.networks.items():
        prefix = f"{role}/"
        net.load_buffers({k[len(prefix):]: v for k, v in buffers.items()
                          if k.startswith(prefix)})
    return bundle


def restore_trainer_state(ckpt: Checkpoint, bundle: AlphaGanBundle,
                          config: TrainingConfig) -> TrainerState:
    config = config.resolved()
    if config.preset != ckpt.meta["preset"]:
        raise ContractError(
            f"checkpoint preset {ckpt.meta['preset']!r} != configured "
            f"{config.preset!r}")
    state = make_trainer_state(bundle, config)
    for group, opt in state.optimizers.items():
        opt.state.step = int(ckpt.entries[f"opt/{group}/step"]["step"])
        for name in opt.state.m:
            opt.state.m[name] = ckpt.entries[f"opt/{group}/m/{name}"].copy()
            opt.state.v[name] = ckpt.entries[f"opt/{group}/v/{name}"].copy()
    for name, stream in state.streams.items():
        stream.set_state(ckpt.entries[f"rng/{name}"])
    state.iteration = int(ckpt.meta["iteration"])
    state.epoch_perm = list(ckpt.entries["epoch"]["perm"])
    state.epoch_pos = int(ckpt.entries["epoch"]["pos"])
    return state


# ---------------------------------------------------------------------------
# the outer loop
# ---------------------------------------------------------------------------

def run_training(dataset, config: TrainingConfig, out_dir,
                 resume_from=None) -> tuple[AlphaGanBundle, Path]:
    """Train on a list of preprocessed volumes, logging one CSV row per
    iteration and checkpointing at the configured interval.

    Returns the final bundle and the loss-log path.
    """
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    config = config.resolved()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "loss_log.csv"

    if len(dataset) < config.batch_size:
        warnings.warn(
            f"dataset size {len(dataset)} < batch size {config.batch_size}; "
            "sampling with replacement", RuntimeWarning, stacklevel=2)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        bundle = bundle_from_checkpoint(ckpt)
        state = restore_trainer_state(ckpt, bundle, config)
        log_mode = "a"
    else:
        bundle = _build_bundle(config)
        state = make_trainer_state(bundle, config)
        log_mode = "w"

    with open(log_path, log_mode, encoding="utf-8") as log:
        if log_mode == "w":
            log.write(f"# alphagan3d preset={config.preset} loss={config.loss} "
                      f"optimizer={config.optimizer} lr={config.learning_rate:g} "
                      f"batch={config.batch_size} latent={config.latent_dim} "
                      f"lambda1={config.weights.lambda1:g} "
                      f"lambda2={config.weights.lambda2:g} "
                      f"lambda3={config.weights.lambda3:g} seed={config.seed}\n")
            log.write(",".join(LOG_COLUMNS) + "\n")
        while state.iteration < config.iterations:
            start = time.perf_counter()
            batch = _next_batch(dataset, config, state)
            record = train_iteration(bundle, batch, config, state)
            ms = (time.perf_counter() - start) * 1000.0
            log.write(f"{state.iteration},{record['L_D']:.6f},"
                      f"{record['L_C']:.6f},{record['L_G']:.6f},"
                      f"{record['GP_D']:.6f},{record['GP_C']:.6f},{ms:.3f}\n")
            log.flush()
            if state.iteration % config.checkpoint_interval == 0 \
                    or state.iteration == config.iterations:
                save_checkpoint(checkpoint_from_state(bundle, config, state),
                                out_dir / f"checkpoint_{state.iteration:06d}.agan")
    save_checkpoint(checkpoint_from_state(bundle, config, state),
                    out_dir / "final.agan")
    return bundle, log_path
