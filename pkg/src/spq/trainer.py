"""Joint training of the feature extractor and the PQ codebooks.

One step: two views per item -> descriptors -> (soft) quantization ->
cross-view contrastive loss -> Adam update of encoder weights and codewords,
with a cosine-decayed learning rate.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import BinaryIO

import numpy as np

from . import pq_head
from .augment import AugmentConfig, sample_view
from .cqc_loss import CqcConfig, loss_and_grads
from .data import Dataset
from .encoder import Encoder, Passthrough, default_encoder, encoder_from_spec
from .errors import ConfigurationError, DegenerateInputError, FormatError, TrainingDivergedError
from .numerics import TRAIN_DTYPE, Rng, read_tensor, write_tensor
from .pq_head import CodebookSet, is_power_of_two

log = logging.getLogger(__name__)

MODES = ("joint", "head-only-passthrough")
ABLATIONS = ("spq", "spq_c", "spq_h", "spq_q")

# stream tags for the seeded RNG
_INIT, _SHUFFLE, _VIEW = 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 50
    base_lr: float = 1e-3
    tau_q: float = 0.2
    tau_cqc: float = 0.5
    M: int = 4
    K: int = 16
    D: int = 64
    mode: str = "joint"
    ablation: str = "spq"
    seed: int = 0
    include_positive_in_denominator: bool = False
    normalize_descriptors: bool = False
    codebook_init: str = "random"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.codebook_init not in ("random", "kmeans"):
            raise ConfigurationError(f"codebook_init must be random or kmeans, got {self.codebook_init!r}")
        if not is_power_of_two(self.K) or self.K < 2:
            raise ConfigurationError(f"K must be a power of two >= 2, got {self.K}")
        if self.effective_M < 1 or self.D % self.effective_M:
            raise ConfigurationError(f"D={self.D} must be divisible by M={self.effective_M}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.base_lr < 0 or self.tau_q <= 0 or self.tau_cqc <= 0:
            raise ConfigurationError("base_lr must be >= 0 and temperatures > 0")

    @property
    def effective_M(self) -> int:
        """Codebook count actually used; the flat-VQ ablation forces 1."""
        return 1 if self.ablation == "spq_q" else self.M

    @property
    def cqc(self) -> CqcConfig:
        return CqcConfig(self.tau_cqc, self.include_positive_in_denominator)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``, no restarts."""
    if total_steps <= 0:
        return base_lr
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: list[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, beta1, beta2, eps)


def adam_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigurationError("params, grads and Adam moments must align")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


@dataclass
class TrainState:
    config: TrainConfig
    encoder: Encoder
    codebooks: CodebookSet
    adam: AdamState
    epoch: int = 0
    step: int = 0
    loss_history: list[float] = field(default_factory=list)

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + [self.codebooks.codewords]

    def set_params(self, arrays: list[np.ndarray]) -> None:
        self.encoder.set_params(arrays[:-1])
        self.codebooks = CodebookSet(arrays[-1])

    def encode(self, inputs: np.ndarray, chunk: int = 512) -> np.ndarray:
        """Descriptors for raw inputs (no augmentation)."""
        inputs = np.asarray(inputs, dtype=TRAIN_DTYPE)
        outs = [self.encoder.forward(inputs[i : i + chunk])[0] for i in range(0, len(inputs), chunk)]
        x = np.concatenate(outs) if outs else np.zeros((0, self.encoder.output_dim))
        return _maybe_normalize(x, self.config)


def _maybe_normalize(x: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    if not cfg.normalize_descriptors:
        return x
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def init_state(
    cfg: TrainConfig, input_shape: tuple[int, ...] | None = None, init_data: np.ndarray | None = None
) -> TrainState:
    """Fresh parameters for ``cfg``.

    ``input_shape`` selects the encoder: ``(D,)`` or passthrough mode gives the
    identity encoder; ``(S, S, 3)`` the default conv stack for S x S images.
    ``init_data`` feeds the optional k-means codebook warm start.
    """
    rng = Rng(cfg.seed, _INIT)
    if cfg.mode == "head-only-passthrough":
        enc: Encoder = Passthrough(cfg.D)
    else:
        if input_shape is None or len(input_shape) != 3:
            raise ConfigurationError("joint mode needs an (H, W, 3) input shape")
        if input_shape[0] != input_shape[1] or input_shape[0] % 4:
            raise ConfigurationError(f"default encoder expects square inputs with side % 4 == 0, got {input_shape}")
        enc = default_encoder(cfg.D, rng.child(0), image_size=input_shape[0])
    M = cfg.effective_M
    cb = CodebookSet.random(M, cfg.K, cfg.D // M, rng.child(1))
    state = TrainState(cfg, enc, cb, AdamState.zeros_like([], cfg.beta1, cfg.beta2, cfg.eps))
    if cfg.codebook_init == "kmeans":
        if init_data is None:
            raise ConfigurationError("k-means codebook warm start needs init_data")
        from .evaluation import kmeans_pq_baseline

        desc = state.encode(init_data[: max(cfg.K, 2000)])
        state.codebooks = kmeans_pq_baseline(desc, M, cfg.K, iters=10, seed=cfg.seed)
    state.adam = AdamState.zeros_like(state.params(), cfg.beta1, cfg.beta2, cfg.eps)
    return state


def _quantize(state: TrainState, x: np.ndarray):
    cfg = state.config
    if cfg.ablation == "spq_h":
        z, idx = pq_head.hard_quantize(state.codebooks, x)
        return z, ("hard", idx)
    z, tape = pq_head.soft_quantize(state.codebooks, x, cfg.tau_q)
    return z, ("soft", tape)


def _quantize_backward(state: TrainState, ctx, grad_z: np.ndarray):
    kind, obj = ctx
    if kind == "hard":
        return pq_head.hard_quantize_backward(state.codebooks, obj, grad_z)
    return pq_head.soft_quantize_backward(obj, state.codebooks, grad_z)


def batch_gradients(state: TrainState, views: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Loss and parameter gradients for one interleaved batch of ``2 * N_B`` views."""
    cfg = state.config
    raw, enc_tape = state.encoder.forward(views)
    x = _maybe_normalize(raw, cfg)
    z, ctx = _quantize(state, x)
    if cfg.ablation == "spq_c":
        loss, g_a, g_t = loss_and_grads(z, z, cfg.cqc)
        g_z = g_a + g_t
        g_x = np.zeros_like(x)
    else:
        loss, g_x, g_z = loss_and_grads(x, z, cfg.cqc)
    g_cw, g_x_head = _quantize_backward(state, ctx, g_z)
    g_x = g_x + g_x_head
    if cfg.normalize_descriptors:
        n = np.linalg.norm(raw, axis=1, keepdims=True)
        g_x = (g_x - np.sum(g_x * x, axis=1, keepdims=True) * x) / n
    enc_grads = state.encoder.backward(enc_tape, g_x)
    return loss, enc_grads + [g_cw]


def _batch_views(
    state: TrainState, data: Dataset, ids: np.ndarray, aug: AugmentConfig | None
) -> np.ndarray:
    cfg = state.config
    if cfg.mode == "head-only-passthrough":
        if data.views is None:
            raise ConfigurationError("passthrough mode needs descriptor view pairs")
        v = data.views[ids]  # (N_B, 2, D)
        return v.reshape(2 * len(ids), -1)
    if data.images is None:
        raise ConfigurationError("joint mode needs images")
    aug = aug or AugmentConfig(output_size=data.images.shape[1:3])
    root = Rng(cfg.seed, _VIEW)
    out = []
    for item in ids:
        for view in (0, 1):
            out.append(sample_view(data.images[item], aug, root.child(state.epoch, int(item), view)))
    return np.stack(out)


def train_epoch(
    state: TrainState,
    data: Dataset,
    total_epochs: int | None = None,
    aug: AugmentConfig | None = None,
    log_rows: list | None = None,
) -> tuple[TrainState, float]:
    """Run one epoch in place; returns ``(state, mean_loss)``.

    Items are reshuffled from ``(seed, epoch)`` and the last partial batch is
    dropped. ``log_rows`` collects ``(epoch, step, lr, loss)`` per step.
    """
    cfg = state.config
    n = len(data)
    nb = cfg.batch_size
    if n < nb:
        raise ConfigurationError(f"dataset has {n} items, fewer than batch_size={nb}")
    steps_per_epoch = n // nb
    total_steps = steps_per_epoch * (total_epochs if total_epochs is not None else cfg.epochs)
    order = Rng(cfg.seed, _SHUFFLE).child(state.epoch).permutation(n)
    losses = []
    for b in range(steps_per_epoch):
        ids = order[b * nb : (b + 1) * nb]
        views = _batch_views(state, data, ids, aug)
        try:
            loss, grads = batch_gradients(state, views)
        except DegenerateInputError as exc:
            raise TrainingDivergedError(f"non-finite values at epoch {state.epoch} batch {b}: {exc}") from None
        if not math.isfinite(loss):
            gmax = max(float(np.max(np.abs(g))) if g.size else 0.0 for g in grads)
            raise TrainingDivergedError(
                f"non-finite loss at epoch {state.epoch} batch {b} (max |grad| = {gmax:g})"
            )
        lr = cosine_lr(min(state.step, total_steps), total_steps, cfg.base_lr)
        new_params, state.adam = adam_step(state.params(), grads, state.adam, lr)
        state.set_params(new_params)
        state.step += 1
        losses.append(loss)
        if log_rows is not None:
            log_rows.append((state.epoch, state.step, lr, loss))
    mean = float(np.mean(losses))
    state.epoch += 1
    state.loss_history.append(mean)
    return state, mean


def train(
    state: TrainState,
    data: Dataset,
    epochs: int | None = None,
    aug: AugmentConfig | None = None,
    log_path=None,
) -> TrainState:
    """Train until ``state.epoch`` reaches ``epochs`` (default ``config.epochs``)."""
    epochs = state.config.epochs if epochs is None else epochs
    rows: list = []
    while state.epoch < epochs:
        _, mean = train_epoch(state, data, total_epochs=epochs, aug=aug, log_rows=rows)
        log.info("epoch %d mean loss %.6f", state.epoch, mean)
    if log_path is not None:
        write_loss_log(log_path, rows)
    return state


def write_loss_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "lr", "loss"])
        for epoch, step, lr, loss in rows:
            w.writerow([epoch, step, repr(float(lr)), repr(float(loss))])


# --- SPQM checkpoint format ----------------------------------------------------

SPQM_MAGIC = b"SPQM"
SPQM_VERSION = 1


def _config_text(state: TrainState) -> str:
    items = {k: v for k, v in asdict(state.config).items()}
    items["encoder"] = state.encoder.spec()
    items["epoch"] = state.epoch
    items["step"] = state.step
    items["loss_history"] = ",".join(float(x).hex() for x in state.loss_history)
    return "".join(f"{k}={_fmt(v)}\n" for k, v in items.items())


def _fmt(v) -> str:
    if isinstance(v, float):
        return v.hex()
    return str(v)


def _parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def coerce_field(cls, name: str, raw: str):
    """Parse ``raw`` into the type of dataclass field ``name`` of ``cls``."""
    types = {f.name: f.type for f in fields(cls)}
    if name not in types:
        raise ConfigurationError(f"unknown key {name!r}")
    t = str(types[name])
    if t == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{name}: not a boolean: {raw!r}")
    try:
        if t == "int":
            return int(raw)
        if t == "float":
            return float.fromhex(raw) if raw.strip().lower().startswith(("0x", "-0x")) else float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{name}: {exc}") from None
    return raw


def write_checkpoint(fh: BinaryIO, state: TrainState) -> None:
    text = _config_text(state).encode("utf-8")
    fh.write(SPQM_MAGIC)
    fh.write(struct.pack("<H", SPQM_VERSION))
    fh.write(struct.pack("<I", len(text)))
    fh.write(text)
    enc = state.encoder.params()
    fh.write(struct.pack("<I", len(enc)))
    for p in enc:
        write_tensor(fh, p)
    write_tensor(fh, state.codebooks.codewords)
    fh.write(struct.pack("<Q", state.adam.step))
    for arr in state.adam.m + state.adam.v:
        write_tensor(fh, arr)


def read_checkpoint(fh: BinaryIO) -> TrainState:
    try:
        return _read_checkpoint(fh)
    except (KeyError, struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed SPQM checkpoint: {exc!r}") from None


def _read_checkpoint(fh: BinaryIO) -> TrainState:
    if fh.read(4) != SPQM_MAGIC:
        raise FormatError("bad SPQM magic")
    (version,) = struct.unpack("<H", fh.read(2))
    if version != SPQM_VERSION:
        raise FormatError(f"unsupported SPQM version {version}")
    (length,) = struct.unpack("<I", fh.read(4))
    raw = _parse_config_text(fh.read(length).decode("utf-8"))
    kwargs = {f.name: coerce_field(TrainConfig, f.name, raw[f.name]) for f in fields(TrainConfig)}
    cfg = TrainConfig(**kwargs)
    enc = encoder_from_spec(raw["encoder"])
    (n_enc,) = struct.unpack("<I", fh.read(4))
    enc_params = [read_tensor(fh) for _ in range(n_enc)]
    enc.set_params(enc_params)
    cb = CodebookSet(read_tensor(fh))
    (adam_step_count,) = struct.unpack("<Q", fh.read(8))
    n_params = n_enc + 1
    moments = [read_tensor(fh) for _ in range(2 * n_params)]
    if fh.read(1):
        raise FormatError("trailing bytes after SPQM checkpoint")
    adam = AdamState(moments[:n_params], moments[n_params:], adam_step_count, cfg.beta1, cfg.beta2, cfg.eps)
    history = [float.fromhex(x) for x in raw.get("loss_history", "").split(",") if x]
    return TrainState(cfg, enc, cb, adam, int(raw["epoch"]), int(raw["step"]), history)


def save_checkpoint(path, state: TrainState) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(fh, state)


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        return read_checkpoint(fh)
