"""Alternating minmax optimization with stepwise-linear lr decay.

Each step first updates both generators and both structure heads against the
weighted total objective with discriminators frozen, then updates the two
discriminators on real versus detached fake images. All randomness that
feeds a step is derived from (seed, epoch), so training is bit-reproducible
and resuming from a checkpoint replays the exact run.
"""
from __future__ import annotations

import math
import os
import re
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import losses
from .autodiff import Tensor, no_grad
from .dataset import LoaderConfig, UnpairedBatch, UnpairedLoader
from .losses import LossBreakdown, LossWeights
from .networks import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    StructureHead,
    read_tensor_archive,
    write_tensor_archive,
)

LOSS_CSV_HEADER = "epoch,step,lr,adv_g_OH,adv_g_HO,adv_d_H,adv_d_O,cycle,embedding,coronary,total_g"


class TrainingDivergedError(RuntimeError):
    """A loss term left the finite range; training aborts with its name."""


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int
    out_dir: str
    batch_size: int = 16
    lr_initial: float = 1e-4
    lr_decay_every: int = 2
    alpha: float = 10.0
    beta: float = 5.0
    gamma: float = 5.0
    seed: int = 0
    checkpoint_every: int = 10
    patch_size: int = 288
    flip_prob: float = 0.5
    base_width: int = 64
    n_resblocks: int = 5
    n_down: int = 3
    width_cap: int = 256
    disc_base_width: int = 64
    disc_n_layers: int = 3
    label_downsample: str = "nearest"
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_initial <= 0:
            raise ValueError("lr_initial must be > 0")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta, gamma=self.gamma)

    def generator_config(self, direction: str) -> GeneratorConfig:
        in_ch, out_ch = (1, 3) if direction == "o2h" else (3, 1)
        return GeneratorConfig(
            in_channels=in_ch,
            out_channels=out_ch,
            base_width=self.base_width,
            n_resblocks=self.n_resblocks,
            n_down=self.n_down,
            width_cap=self.width_cap,
            dtype=self.dtype,
        )

    def discriminator_config(self, domain: str) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            in_channels=3 if domain == "histology" else 1,
            base_width=self.disc_base_width,
            n_layers=self.disc_n_layers,
            dtype=self.dtype,
        )

    def loader_config(self) -> LoaderConfig:
        return LoaderConfig(
            patch_size=self.patch_size,
            batch_size=self.batch_size,
            flip_prob=self.flip_prob,
            shuffle_seed=self.seed,
        )


def config_from_mapping(mapping: dict) -> TrainingConfig:
    known = {f.name for f in fields(TrainingConfig)}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ValueError(f"unknown training config keys: {unknown}")
    return TrainingConfig(**mapping)


def lr_schedule(config: TrainingConfig, epoch: int) -> float:
    """Stepwise-linear decay: constant within each lr_decay_every window,
    dropping linearly so the rate would reach zero one window past the end."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    n_windows = math.ceil(config.epochs / config.lr_decay_every)
    return config.lr_initial * (1.0 - (epoch // config.lr_decay_every) / n_windows)


@dataclass
class LossRecord:
    epoch: int
    step: int
    learning_rate: float
    breakdown: LossBreakdown

    def csv_row(self) -> str:
        vals = [repr(float(v)) for v in self.breakdown.as_dict().values()]
        return f"{self.epoch},{self.step},{self.learning_rate!r}," + ",".join(vals)


class Adam:
    """Adaptive moment estimation over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data = p.data - (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], prefix: str, t: int) -> None:
        self.t = t
        for k in self.params:
            self.m[k] = np.array(tensors[f"{prefix}.m.{k}"], dtype=self.m[k].dtype)
            self.v[k] = np.array(tensors[f"{prefix}.v.{k}"], dtype=self.v[k].dtype)


class ModelBundle:
    """The six networks of the translation system."""

    def __init__(self, config: TrainingConfig):
        self.config = config
        seed = config.seed
        self.g_oh = Generator(config.generator_config("o2h"), seed=[seed, 0])
        self.g_ho = Generator(config.generator_config("h2o"), seed=[seed, 1])
        emb_ch = self.g_oh.config.embedding_channels
        dt = self.g_oh.config.np_dtype
        self.head_oh = StructureHead(emb_ch, seed=[seed, 2], dtype=dt)
        self.head_ho = StructureHead(emb_ch, seed=[seed, 3], dtype=dt)
        self.d_h = Discriminator(config.discriminator_config("histology"), seed=[seed, 4])
        self.d_o = Discriminator(config.discriminator_config("oct"), seed=[seed, 5])

    _NETS = ("g_oh", "g_ho", "head_oh", "head_ho", "d_h", "d_o")

    def generator_side_params(self) -> dict[str, Tensor]:
        out = {}
        for name in ("g_oh", "g_ho", "head_oh", "head_ho"):
            out.update(getattr(self, name).named_parameters(name + "."))
        return out

    def discriminator_side_params(self) -> dict[str, Tensor]:
        out = {}
        for name in ("d_h", "d_o"):
            out.update(getattr(self, name).named_parameters(name + "."))
        return out

    def all_params(self) -> dict[str, Tensor]:
        return {**self.generator_side_params(), **self.discriminator_side_params()}

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.all_params().items()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for name in self._NETS:
            getattr(self, name).load_state(
                {k[len(name) + 1 :]: v for k, v in tensors.items() if k.startswith(name + ".")}
            )


@dataclass
class TrainState:
    config: TrainingConfig
    model: ModelBundle
    opt_g: Adam
    opt_d: Adam
    epoch: int = 0


def init_state(config: TrainingConfig) -> TrainState:
    model = ModelBundle(config)
    return TrainState(
        config=config,
        model=model,
        opt_g=Adam(model.generator_side_params()),
        opt_d=Adam(model.discriminator_side_params()),
    )


def train_step(state: TrainState, batch: UnpairedBatch, weights: LossWeights, lr: float) -> LossBreakdown:
    """One alternating update; returns the losses measured before it."""
    model = state.model
    dtype = model.g_oh.config.np_dtype
    o = Tensor(np.ascontiguousarray(batch.oct_images, dtype=dtype))
    h = Tensor(np.ascontiguousarray(batch.hist_images, dtype=dtype))
    factor = model.g_oh.config.downscale
    mode = state.config.label_downsample
    labels_o = losses.downsample_labels(batch.oct_masks, factor, mode)
    labels_h = losses.downsample_labels(batch.hist_masks, factor, mode)

    # generator + structure-head update, discriminators frozen (their
    # parameters take no gradients here; scores still backpropagate into
    # the fake images)
    d_params = model.discriminator_side_params().values()
    for p in d_params:
        p.requires_grad = False
    try:
        fake_h, emb_o = model.g_oh(o)
        fake_o, emb_h = model.g_ho(h)
        rec_o, emb_fake_h = model.g_ho(fake_h)
        rec_h, emb_fake_o = model.g_oh(fake_o)
        adv_g_oh = losses.adversarial_loss_g(model.d_h(fake_h))
        adv_g_ho = losses.adversarial_loss_g(model.d_o(fake_o))
        cyc = losses.cycle_loss(o, rec_o, h, rec_h)
        emb = losses.embedding_loss(emb_fake_h, emb_o, emb_fake_o, emb_h)
        cor = losses.coronary_loss(model.head_oh(emb_o), labels_o, model.head_ho(emb_h), labels_h)
        total_g = losses.total_generator_loss(adv_g_oh, adv_g_ho, cyc, emb, cor, weights)

        state.opt_g.zero_grad()
        total_g.backward()
        state.opt_g.step(lr)
    finally:
        for p in d_params:
            p.requires_grad = True

    # discriminator update on real vs detached fake
    fake_h_const = fake_h.detach()
    fake_o_const = fake_o.detach()
    adv_d_h = losses.adversarial_loss_d(model.d_h(h), model.d_h(fake_h_const))
    adv_d_o = losses.adversarial_loss_d(model.d_o(o), model.d_o(fake_o_const))
    d_total = adv_d_h + adv_d_o

    state.opt_d.zero_grad()
    d_total.backward()
    state.opt_d.step(lr)

    breakdown = losses.make_breakdown(
        adv_g_oh.item(),
        adv_g_ho.item(),
        adv_d_h.item(),
        adv_d_o.item(),
        cyc.item(),
        emb.item(),
        cor.item(),
        weights,
    )
    for name, value in breakdown.as_dict().items():
        if not math.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss term {name} = {value}")
    return breakdown


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_RE = re.compile(r"^ckpt-(\d{6})\.json$")


def checkpoint_paths(out_dir: str, epoch: int) -> tuple[str, str]:
    stem = os.path.join(out_dir, f"ckpt-{epoch:06d}")
    return stem + ".json", stem + ".bin"


def latest_checkpoint(out_dir: str) -> str | None:
    if not os.path.isdir(out_dir):
        return None
    found = sorted(name for name in os.listdir(out_dir) if _CKPT_RE.match(name))
    return os.path.join(out_dir, found[-1]) if found else None


def save_checkpoint(state: TrainState, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    manifest_path, blob_path = checkpoint_paths(out_dir, state.epoch)
    tensors = dict(state.model.state())
    tensors.update(state.opt_g.state("opt_g"))
    tensors.update(state.opt_d.state("opt_d"))
    extra = {
        "epoch": state.epoch,
        "adam_t": {"g": state.opt_g.t, "d": state.opt_d.t},
        # loader randomness is derived from (seed, epoch); this records it
        "rng_state": {"scheme": "per-epoch-derived", "seed": state.config.seed, "next_epoch": state.epoch},
        "training_config": asdict(state.config),
    }
    write_tensor_archive(tensors, manifest_path, blob_path, extra=extra)
    return manifest_path


def load_checkpoint(manifest_path: str, config: TrainingConfig | None = None) -> TrainState:
    blob_path = os.path.splitext(manifest_path)[0] + ".bin"
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    tensors, meta = read_tensor_archive(manifest_path, blob_path)
    if config is None:
        config = config_from_mapping(meta["training_config"])
    state = init_state(config)
    state.model.load_state({k: v for k, v in tensors.items() if not k.startswith("opt_")})
    state.opt_g.load_state(tensors, "opt_g", t=meta["adam_t"]["g"])
    state.opt_d.load_state(tensors, "opt_d", t=meta["adam_t"]["d"])
    state.epoch = int(meta["epoch"])
    return state


# ---------------------------------------------------------------------------
# the loop


def train(config: TrainingConfig, manifest_path: str, resume: bool = False, log=print) -> str:
    """Run the schedule over the manifest; returns the final checkpoint path."""
    os.makedirs(config.out_dir, exist_ok=True)
    loader = UnpairedLoader(manifest_path, config.loader_config())
    log(
        f"training on {len(loader.oct_patches)} OCT / {len(loader.hist_patches)} histology patches, "
        f"{loader.steps_per_epoch} steps per epoch"
    )

    state = None
    if resume:
        latest = latest_checkpoint(config.out_dir)
        if latest is not None:
            state = load_checkpoint(latest, config)
            log(f"resumed from {latest} at epoch {state.epoch}")
    if state is None:
        state = init_state(config)

    csv_path = os.path.join(config.out_dir, "losses.csv")
    records = _read_loss_csv_rows(csv_path) if (resume and os.path.exists(csv_path)) else []
    records = [row for row in records if int(row.split(",", 1)[0]) < state.epoch]

    weights = config.weights
    for epoch in range(state.epoch, config.epochs):
        lr = lr_schedule(config, epoch)
        for step, batch in enumerate(loader.epoch_batches(epoch)):
            breakdown = train_step(state, batch, weights, lr)
            records.append(LossRecord(epoch, step, lr, breakdown).csv_row())
        state.epoch = epoch + 1
        _write_loss_csv(csv_path, records)
        if state.epoch % config.checkpoint_every == 0 and state.epoch < config.epochs:
            save_checkpoint(state, config.out_dir)
        last = records[-1].split(",")
        log(f"epoch {epoch + 1}/{config.epochs}: lr={lr:.3e} total_g={float(last[-1]):.4f}")
    final = save_checkpoint(state, config.out_dir)
    _write_loss_csv(csv_path, records)
    return final


def _write_loss_csv(path: str, rows: list[str]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(LOSS_CSV_HEADER + "\n")
        for row in rows:
            f.write(row + "\n")
    os.replace(tmp, path)


def _read_loss_csv_rows(path: str) -> list[str]:
    with open(path) as f:
        lines = [line.rstrip("\n") for line in f]
    return [line for line in lines[1:] if line]


# ---------------------------------------------------------------------------
# held-out diagnostics (used by the acceptance smoke run)


def structure_accuracy(model: ModelBundle, samples, label_mode: str = "nearest") -> float:
    """Pixel accuracy of both structure heads on their own domains."""
    from .autodiff import softmax
    from .phantom import Domain

    correct = total = 0
    factor = model.g_oh.config.downscale
    with no_grad():
        for sample in samples:
            if sample.domain is Domain.OCT:
                embedding = model.g_oh.encode(sample.image[None])
                logits = model.head_oh(embedding)
            else:
                embedding = model.g_ho.encode(sample.image[None])
                logits = model.head_ho(embedding)
            labels = losses.downsample_labels(sample.mask[None], factor, label_mode)
            pred = logits.data.argmax(axis=1)
            correct += int((pred == labels).sum())
            total += labels.size
    return correct / total


def cycle_l1(model: ModelBundle, samples) -> float:
    """Mean reconstruction error through the round trip, both directions."""
    from .phantom import Domain

    errors = []
    with no_grad():
        for sample in samples:
            x = sample.image[None].astype(model.g_oh.config.np_dtype)
            if sample.domain is Domain.OCT:
                fake, _ = model.g_oh(x)
                rec, _ = model.g_ho(fake.data)
            else:
                fake, _ = model.g_ho(x)
                rec, _ = model.g_oh(fake.data)
            errors.append(float(np.abs(rec.data - x).mean()))
    return float(np.mean(errors))
