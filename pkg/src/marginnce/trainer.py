"""Toy two-branch encoders, hand-rolled backprop, optimizers, experiment loops.

The forward path is: project image columns and audio vectors (linear, or one
tanh hidden layer), optionally unit-normalize, pool every pairwise response
map through the thresholded spatial average, and apply the margin contrastive
loss. The backward path chains the analytic gradients of each stage and is
checked end to end against finite differences.
"""
from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import kernels, metrics
from .avmap import NORM_FLOOR, PoolConfig
from .loss import LossConfig, margin_nce_grad, margin_nce_loss
from .metrics import EvalConfig
from .numerics import (
    ConfigError,
    DataError,
    DimensionError,
    NumericalFailure,
    RngStream,
    coerce,
    mix_seed,
)
from .synthdata import SynthConfig, make_split, make_train_test

_INIT_STREAM = 0x494E4954
_SHUFFLE_STREAM = 0x53485546

CHECKPOINT_FORMAT = "marginnce-checkpoint"
CHECKPOINT_VERSION = 1

_TRAIN_FIELDS = ("loss", "batch_size", "epochs", "learning_rate", "weight_decay",
                 "optimizer", "seed", "embed_dim", "hidden_dim", "normalize_output",
                 "tied_init")


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 64
    epochs: int = 20
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    embed_dim: int = 16
    hidden_dim: int | None = None
    normalize_output: bool = True
    tied_init: bool = False

    def validate(self, prefix: str = "train") -> None:
        self.loss.validate(f"{prefix}.loss")
        if self.batch_size < 1:
            raise ConfigError(f"{prefix}.batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"{prefix}.epochs must be >= 0, got {self.epochs}")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0.0:
            raise ConfigError(f"{prefix}.learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.weight_decay < 1.0:
            raise ConfigError(f"{prefix}.weight_decay must lie in [0, 1), got {self.weight_decay}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"{prefix}.optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.seed < 0:
            raise ConfigError(f"{prefix}.seed must be >= 0, got {self.seed}")
        if self.embed_dim < 1:
            raise ConfigError(f"{prefix}.embed_dim must be >= 1, got {self.embed_dim}")
        if self.hidden_dim is not None and self.hidden_dim < 1:
            raise ConfigError(f"{prefix}.hidden_dim must be >= 1 or null, got {self.hidden_dim}")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = {name: getattr(self, name) for name in _TRAIN_FIELDS}
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "train") -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(_TRAIN_FIELDS)
        if unknown:
            raise ConfigError(f"{prefix}: unknown field(s) {sorted(unknown)}")
        loss_raw = d.get("loss", {})
        if not isinstance(loss_raw, dict):
            raise ConfigError(f"{prefix}.loss must be an object")
        hidden = d.get("hidden_dim", cls.hidden_dim)
        if hidden is not None:
            hidden = coerce(prefix, "hidden_dim", hidden, int)
        cfg = cls(
            loss=LossConfig.from_dict(loss_raw, prefix=f"{prefix}.loss"),
            batch_size=coerce(prefix, "batch_size", d.get("batch_size", cls.batch_size), int),
            epochs=coerce(prefix, "epochs", d.get("epochs", cls.epochs), int),
            learning_rate=coerce(prefix, "learning_rate",
                                 d.get("learning_rate", cls.learning_rate), float),
            weight_decay=coerce(prefix, "weight_decay",
                                d.get("weight_decay", cls.weight_decay), float),
            optimizer=coerce(prefix, "optimizer", d.get("optimizer", cls.optimizer), str),
            seed=coerce(prefix, "seed", d.get("seed", cls.seed), int),
            embed_dim=coerce(prefix, "embed_dim", d.get("embed_dim", cls.embed_dim), int),
            hidden_dim=hidden,
            normalize_output=coerce(prefix, "normalize_output",
                                    d.get("normalize_output", cls.normalize_output), bool),
            tied_init=coerce(prefix, "tied_init",
                             d.get("tied_init", cls.tied_init), bool),
        )
        cfg.validate(prefix)
        return cfg


@dataclass
class ToyEncoder:
    """Linear (or one-hidden-layer tanh) projections for image columns and audio.

    With normalize_output=True both embeddings are unit-normalized, so pairwise
    response maps are cosine similarities; without it they are raw dot products.
    """

    w_v: np.ndarray
    w_a: np.ndarray
    u_v: np.ndarray | None = None
    u_a: np.ndarray | None = None
    normalize_output: bool = True

    @classmethod
    def create(cls, rng: RngStream, in_dim: int, out_dim: int,
               hidden_dim: int | None = None, normalize_output: bool = True,
               tied_init: bool = False):
        """Uniform 1/sqrt(fan_in) init. With tied_init the audio branch starts
        as a copy of the visual branch, so correct pairs respond from step 0
        and training refines the correspondence instead of bootstrapping it."""
        g = rng.generator()

        def init(rows, cols):
            bound = 1.0 / np.sqrt(cols)
            return g.uniform(-bound, bound, size=(rows, cols))

        if hidden_dim is None:
            w_v = init(out_dim, in_dim)
            w_a = w_v.copy() if tied_init else init(out_dim, in_dim)
            return cls(w_v=w_v, w_a=w_a, normalize_output=normalize_output)
        w_v = init(out_dim, hidden_dim)
        w_a = w_v.copy() if tied_init else init(out_dim, hidden_dim)
        u_v = init(hidden_dim, in_dim)
        u_a = u_v.copy() if tied_init else init(hidden_dim, in_dim)
        return cls(w_v=w_v, w_a=w_a, u_v=u_v, u_a=u_a,
                   normalize_output=normalize_output)

    @property
    def in_dim(self) -> int:
        return (self.u_v if self.u_v is not None else self.w_v).shape[1]

    @property
    def out_dim(self) -> int:
        return self.w_v.shape[0]

    def params(self) -> dict:
        out = {"w_v": self.w_v, "w_a": self.w_a}
        if self.u_v is not None:
            out["u_v"] = self.u_v
            out["u_a"] = self.u_a
        return out

    def copy(self) -> "ToyEncoder":
        return ToyEncoder(
            w_v=self.w_v.copy(), w_a=self.w_a.copy(),
            u_v=None if self.u_v is None else self.u_v.copy(),
            u_a=None if self.u_a is None else self.u_a.copy(),
            normalize_output=self.normalize_output)


def new_encoder(cfg: TrainConfig, in_dim: int) -> ToyEncoder:
    return ToyEncoder.create(RngStream(cfg.seed, _INIT_STREAM), in_dim,
                             cfg.embed_dim, cfg.hidden_dim, cfg.normalize_output,
                             cfg.tied_init)


# ---------------------------------------------------------------------------
# forward / backward


def _stack_batch(scenes):
    if not scenes:
        raise DimensionError("empty batch")
    image_shapes = {s.image.shape for s in scenes}
    audio_shapes = {s.audio.shape for s in scenes}
    if len(image_shapes) != 1 or len(audio_shapes) != 1:
        raise DimensionError(
            f"inconsistent scene shapes in batch: images {sorted(image_shapes)}, "
            f"audios {sorted(audio_shapes)}")
    grids = np.stack([s.image for s in scenes]).astype(np.float64)
    auds = np.stack([s.audio for s in scenes]).astype(np.float64)
    if grids.shape[1] != auds.shape[1]:
        raise DimensionError(
            f"channel mismatch: images have {grids.shape[1]}, audios have {auds.shape[1]}")
    return grids, auds


def _encode(enc: ToyEncoder, grids, auds):
    n, c, h, w = grids.shape
    x = grids.reshape(n, c, h * w)
    if enc.u_v is None:
        hv = ha = None
        zv = np.einsum("oc,ncp->nop", enc.w_v, x)
        za = auds @ enc.w_a.T
    else:
        hv = np.tanh(np.einsum("kc,ncp->nkp", enc.u_v, x))
        zv = np.einsum("ok,nkp->nop", enc.w_v, hv)
        ha = np.tanh(auds @ enc.u_a.T)
        za = ha @ enc.w_a.T
    return x, hv, zv, ha, za


def _normalize(z, axis):
    norms = np.sqrt((z * z).sum(axis=axis, keepdims=True))
    den = np.maximum(norms, NORM_FLOOR)
    return z / den, norms, den


def _normalize_backward(norms, den, unit, dunit, axis):
    # unit = z / max(|z|, floor): projector Jacobian above the floor, plain
    # scaling below it
    dot = (unit * dunit).sum(axis=axis, keepdims=True)
    return (dunit - np.where(norms > NORM_FLOOR, unit * dot, 0.0)) / den


def forward_batch(enc: ToyEncoder, scenes, loss_cfg: LossConfig = LossConfig(),
                  use_numba=None):
    """Encode a batch, pool all pairwise response maps, return (loss, cache)."""
    loss_cfg.validate()
    grids, auds = _stack_batch(scenes)
    if grids.shape[1] != enc.in_dim:
        raise DimensionError(
            f"encoder expects {enc.in_dim} input channels, batch has {grids.shape[1]}")
    x, hv, zv, ha, za = _encode(enc, grids, auds)
    if enc.normalize_output:
        vn, v_norms, v_den = _normalize(zv, axis=1)
        an, a_norms, a_den = _normalize(za, axis=1)
    else:
        vn, v_norms, v_den = zv, None, None
        an, a_norms, a_den = za, None, None
    s = kernels.pooled_similarity(vn, an, loss_cfg.pool.epsilon, loss_cfg.pool.beta,
                                  use_numba=use_numba)
    loss = margin_nce_loss(s, loss_cfg)
    cache = {
        "enc": enc, "loss_cfg": loss_cfg, "use_numba": use_numba,
        "x": x, "hv": hv, "ha": ha, "auds": auds,
        "vn": vn, "an": an, "v_norms": v_norms, "v_den": v_den,
        "a_norms": a_norms, "a_den": a_den, "s": s,
        "grid_shape": grids.shape,
    }
    return loss, cache


def backward_batch(cache) -> dict:
    """Parameter gradients for the batch captured by forward_batch."""
    enc: ToyEncoder = cache["enc"]
    cfg: LossConfig = cache["loss_cfg"]
    vn, an = cache["vn"], cache["an"]
    grad_s = margin_nce_grad(cache["s"], cfg)
    dvn, dan = kernels.pooled_similarity_backward(
        vn, an, cfg.pool.epsilon, cfg.pool.beta, grad_s,
        detach_weights=cfg.pool.detach_weights, use_numba=cache["use_numba"])
    if enc.normalize_output:
        dzv = _normalize_backward(cache["v_norms"], cache["v_den"], vn, dvn, axis=1)
        dza = _normalize_backward(cache["a_norms"], cache["a_den"], an, dan, axis=1)
    else:
        dzv, dza = dvn, dan
    x, hv, ha, auds = cache["x"], cache["hv"], cache["ha"], cache["auds"]
    if enc.u_v is None:
        return {"w_v": np.einsum("nop,ncp->oc", dzv, x), "w_a": dza.T @ auds}
    grads = {"w_v": np.einsum("nop,nkp->ok", dzv, hv), "w_a": dza.T @ ha}
    dhv = np.einsum("ok,nop->nkp", enc.w_v, dzv)
    grads["u_v"] = np.einsum("nkp,ncp->kc", (1.0 - hv * hv) * dhv, x)
    dha = dza @ enc.w_a
    grads["u_a"] = ((1.0 - ha * ha) * dha).T @ auds
    return grads


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    """Plain gradient descent with fully decoupled weight decay.

    Decay is applied as theta *= (1 - weight_decay) each step, independent of
    the learning rate, so a zero learning rate still exhibits pure decay drift.
    """

    name = "sgd"

    def __init__(self, learning_rate: float, weight_decay: float = 0.0):
        self.learning_rate = float(learning_rate)
        self.weight_decay = float(weight_decay)

    def step(self, params: dict, grads: dict) -> None:
        for key, p in params.items():
            if self.weight_decay:
                p *= 1.0 - self.weight_decay
            p -= self.learning_rate * grads[key]

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state: dict) -> None:
        pass


class Adam:
    """Bias-corrected Adam with the same decoupled weight decay as Sgd.

    Update, in this order per step t: decay, then
        m = beta1 m + (1-beta1) g,    v = beta2 v + (1-beta2) g^2
        theta -= lr * (m / (1-beta1^t)) / (sqrt(v / (1-beta2^t)) + eps)
    """

    name = "adam"
    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, learning_rate: float, weight_decay: float = 0.0):
        self.learning_rate = float(learning_rate)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for key, p in params.items():
            g = grads[key]
            m = self.m.setdefault(key, np.zeros_like(p))
            v = self.v.setdefault(key, np.zeros_like(p))
            m[...] = self.BETA1 * m + (1.0 - self.BETA1) * g
            v[...] = self.BETA2 * v + (1.0 - self.BETA2) * (g * g)
            m_hat = m / (1.0 - self.BETA1 ** self.t)
            v_hat = v / (1.0 - self.BETA2 ** self.t)
            if self.weight_decay:
                p *= 1.0 - self.weight_decay
            p -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.EPS)

    def state_dict(self) -> dict:
        out = {"t": self.t}
        for key, arr in self.m.items():
            out[f"m__{key}"] = arr
        for key, arr in self.v.items():
            out[f"v__{key}"] = arr
        return out

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state.get("t", 0))
        self.m = {k[3:]: np.array(v) for k, v in state.items() if k.startswith("m__")}
        self.v = {k[3:]: np.array(v) for k, v in state.items() if k.startswith("v__")}


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate, cfg.weight_decay)
    if cfg.optimizer == "sgd":
        return Sgd(cfg.learning_rate, cfg.weight_decay)
    raise ConfigError(f"train.optimizer must be 'adam' or 'sgd', got {cfg.optimizer!r}")


# ---------------------------------------------------------------------------
# training / evaluation


def train(enc: ToyEncoder, scenes, cfg: TrainConfig, *, optimizer=None,
          start_epoch: int = 0, history=None, use_numba=None):
    """Run epochs of shuffled batches; returns (trained copy, per-epoch mean loss).

    Each epoch's shuffle comes from its own (seed, epoch) substream, so
    resuming at start_epoch with the saved optimizer replays the exact
    schedule an uninterrupted run would have used.
    """
    cfg.validate()
    if not scenes:
        raise ConfigError("train: empty training set")
    enc = enc.copy()
    opt = optimizer if optimizer is not None else make_optimizer(cfg)
    params = enc.params()
    hist = list(history) if history else []
    shuffle_base = RngStream(cfg.seed, _SHUFFLE_STREAM)
    n = len(scenes)
    for epoch in range(start_epoch, cfg.epochs):
        order = shuffle_base.derive(epoch).generator().permutation(n)
        losses = []
        batch_index = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:  # a singleton tail carries no contrastive signal
                continue
            batch = [scenes[int(k)] for k in idx]
            try:
                loss, cache = forward_batch(enc, batch, cfg.loss, use_numba=use_numba)
            except NumericalFailure as exc:
                raise NumericalFailure(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}: {exc}")
            if not np.isfinite(loss):
                raise NumericalFailure(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}")
            grads = backward_batch(cache)
            opt.step(params, grads)
            losses.append(loss)
            batch_index += 1
        hist.append(float(np.mean(losses)) if losses else float("nan"))
    return enc, hist


def embed_scenes(enc: ToyEncoder, scenes):
    grids, auds = _stack_batch(scenes)
    if grids.shape[1] != enc.in_dim:
        raise DimensionError(
            f"encoder expects {enc.in_dim} input channels, batch has {grids.shape[1]}")
    _, _, zv, _, za = _encode(enc, grids, auds)
    if enc.normalize_output:
        zv = _normalize(zv, axis=1)[0]
        za = _normalize(za, axis=1)[0]
    return zv, za, grids.shape


def response_maps(enc: ToyEncoder, scenes):
    """Per-scene self response maps (the localization prediction), (n, h, w)."""
    vn, an, (n, _, h, w) = embed_scenes(enc, scenes)
    return np.einsum("ncp,nc->np", vn, an).reshape(n, h, w)


@dataclass(frozen=True)
class EvalResult:
    retrieval_accuracy: float
    ciou_at_half: float
    auc_percent: float
    cious: tuple


def evaluate(enc: ToyEncoder, scenes, pool: PoolConfig = PoolConfig(),
             eval_cfg: EvalConfig = EvalConfig(), use_numba=None) -> EvalResult:
    """Retrieval accuracy over the full test similarity matrix plus cIoU/AUC of
    the self response maps against the planted regions."""
    if not scenes:
        raise DataError("evaluate: empty test set")
    pool.validate()
    eval_cfg.validate()
    vn, an, (n, _, h, w) = embed_scenes(enc, scenes)
    s = kernels.pooled_similarity(vn, an, pool.epsilon, pool.beta, use_numba=use_numba)
    retrieval = float(np.mean(s.argmax(axis=1) == np.arange(n)))
    maps = np.einsum("ncp,nc->np", vn, an).reshape(n, h, w)
    shape = (h * eval_cfg.upsample, w * eval_cfg.upsample)
    cious = tuple(
        metrics.evaluate_prediction(maps[i], [scenes[i].gt_region], shape, eval_cfg)
        for i in range(n))
    return EvalResult(
        retrieval_accuracy=retrieval,
        ciou_at_half=metrics.ciou_at_half(cious),
        auc_percent=100.0 * metrics.eval_curve(cious, eval_cfg.auc_step).auc,
        cious=cious)


# ---------------------------------------------------------------------------
# experiment runners


@dataclass(frozen=True)
class RunRecord:
    margin: float
    seed: int
    retrieval_accuracy: float
    ciou_at_half: float
    auc: float
    final_loss: float
    status: str = "ok"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(margin=float(d["margin"]), seed=int(d["seed"]),
                   retrieval_accuracy=float(d["retrieval_accuracy"]),
                   ciou_at_half=float(d["ciou_at_half"]), auc=float(d["auc"]),
                   final_loss=float(d["final_loss"]), status=str(d["status"]))


@dataclass(frozen=True)
class MarginAggregate:
    margin: float
    n_runs: int
    retrieval_mean: float
    retrieval_std: float
    ciou_at_half_mean: float
    ciou_at_half_std: float
    auc_mean: float
    auc_std: float


@dataclass(frozen=True)
class ExperimentReport:
    runs: tuple
    aggregates: tuple

    def aggregate_for(self, margin: float) -> MarginAggregate:
        for agg in self.aggregates:
            if agg.margin == margin:
                return agg
        raise KeyError(f"no aggregate for margin {margin}")


@dataclass(frozen=True)
class SweepSetup:
    """Everything a single experiment run needs besides (margin, seed)."""

    synth: SynthConfig
    train: TrainConfig
    eval: EvalConfig = field(default_factory=EvalConfig)
    test_samples_per_class: int | None = None


def _run_configs(setup: SweepSetup, margin: float, seed: int):
    synth = setup.synth.replace(seed=mix_seed(setup.synth.seed, seed))
    loss_cfg = dataclasses.replace(setup.train.loss, margin=float(margin))
    train_cfg = setup.train.replace(seed=int(seed), loss=loss_cfg)
    return synth, train_cfg


def _failed_record(margin, seed, exc) -> RunRecord:
    nan = float("nan")
    return RunRecord(margin=float(margin), seed=int(seed), retrieval_accuracy=nan,
                     ciou_at_half=nan, auc=nan, final_loss=nan,
                     status=f"failed: {exc}")


def sweep_run(margin: float, seed: int, setup: SweepSetup, use_numba=None) -> RunRecord:
    """One (margin, seed) experiment: fresh data and encoder, train, evaluate."""
    synth, tcfg = _run_configs(setup, margin, seed)
    rng = RngStream(synth.seed)
    train_set, test_set = make_train_test(synth, rng, setup.test_samples_per_class)
    enc = new_encoder(tcfg, synth.latent_dim)
    try:
        enc, hist = train(enc, train_set, tcfg, use_numba=use_numba)
    except NumericalFailure as exc:
        return _failed_record(margin, seed, exc)
    res = evaluate(enc, test_set, tcfg.loss.pool, setup.eval, use_numba=use_numba)
    return RunRecord(margin=float(margin), seed=int(seed),
                     retrieval_accuracy=res.retrieval_accuracy,
                     ciou_at_half=res.ciou_at_half, auc=res.auc_percent,
                     final_loss=hist[-1] if hist else float("nan"))


def aggregate_runs(runs) -> ExperimentReport:
    """Order-independent aggregation: sorted merge by (margin, seed), per-margin
    mean and population std over runs with status ok."""
    runs = tuple(sorted(runs, key=lambda r: (r.margin, r.seed)))
    aggregates = []
    for margin in sorted({r.margin for r in runs}):
        ok = [r for r in runs if r.margin == margin and r.status == "ok"]
        if ok:
            ret = np.array([r.retrieval_accuracy for r in ok])
            cio = np.array([r.ciou_at_half for r in ok])
            auc = np.array([r.auc for r in ok])
            aggregates.append(MarginAggregate(
                margin=margin, n_runs=len(ok),
                retrieval_mean=float(ret.mean()), retrieval_std=float(ret.std()),
                ciou_at_half_mean=float(cio.mean()), ciou_at_half_std=float(cio.std()),
                auc_mean=float(auc.mean()), auc_std=float(auc.std())))
        else:
            nan = float("nan")
            aggregates.append(MarginAggregate(margin, 0, nan, nan, nan, nan, nan, nan))
    return ExperimentReport(runs=runs, aggregates=tuple(aggregates))


def margin_sweep(margins, seeds, setup: SweepSetup, use_numba=None) -> ExperimentReport:
    """One run per (margin, seed) on closed-set data, aggregated per margin."""
    margins = list(margins)
    seeds = list(seeds)
    if not margins or not seeds:
        raise ConfigError("margin_sweep: margins and seeds must be non-empty")
    runs = [sweep_run(m, s, setup, use_numba=use_numba) for m in margins for s in seeds]
    return aggregate_runs(runs)


def open_set_run(margin: float, seed: int, setup: SweepSetup, heard_classes,
                 unheard_classes, use_numba=None):
    """One open-set run; returns (heard-test record, unheard-test record)."""
    synth, tcfg = _run_configs(setup, margin, seed)
    rng = RngStream(synth.seed)
    train_set, heard_test, unheard_test = make_split(
        synth, heard_classes, unheard_classes, rng, setup.test_samples_per_class)
    enc = new_encoder(tcfg, synth.latent_dim)
    try:
        enc, hist = train(enc, train_set, tcfg, use_numba=use_numba)
    except NumericalFailure as exc:
        return _failed_record(margin, seed, exc), _failed_record(margin, seed, exc)
    final_loss = hist[-1] if hist else float("nan")
    records = []
    for test_set in (heard_test, unheard_test):
        res = evaluate(enc, test_set, tcfg.loss.pool, setup.eval, use_numba=use_numba)
        records.append(RunRecord(
            margin=float(margin), seed=int(seed),
            retrieval_accuracy=res.retrieval_accuracy,
            ciou_at_half=res.ciou_at_half, auc=res.auc_percent,
            final_loss=final_loss))
    return records[0], records[1]


def open_set_eval(heard_classes, unheard_classes, margins, seeds,
                  setup: SweepSetup, use_numba=None):
    """Per-margin reports on heard-test and unheard-test sets separately."""
    from .synthdata import validate_class_split

    margins = list(margins)
    seeds = list(seeds)
    if not margins or not seeds:
        raise ConfigError("open_set_eval: margins and seeds must be non-empty")
    validate_class_split(setup.synth.num_classes, heard_classes, unheard_classes)
    heard_runs = []
    unheard_runs = []
    for margin in margins:
        for seed in seeds:
            rec_h, rec_u = open_set_run(margin, seed, setup, heard_classes,
                                        unheard_classes, use_numba=use_numba)
            heard_runs.append(rec_h)
            unheard_runs.append(rec_u)
    return aggregate_runs(heard_runs), aggregate_runs(unheard_runs)


# ---------------------------------------------------------------------------
# checkpoint / report files


def save_checkpoint(path, enc: ToyEncoder, cfg: TrainConfig, epochs_done: int,
                    optimizer, history) -> None:
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "train": cfg.to_dict(), "epochs_done": int(epochs_done),
            "optimizer": optimizer.name, "history": [float(v) for v in history],
            "normalize_output": enc.normalize_output,
            "hidden": enc.u_v is not None}
    arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    for key, arr in enc.params().items():
        arrays[f"param__{key}"] = arr
    for key, val in optimizer.state_dict().items():
        arrays[f"opt__{key}"] = np.asarray(val)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".npz")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Returns (encoder, TrainConfig, epochs_done, optimizer, history)."""
    with np.load(path, allow_pickle=False) as data:
        try:
            meta = json.loads(str(data["meta"]))
        except (KeyError, json.JSONDecodeError):
            raise DataError(f"{path}: not a checkpoint file")
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path}: not a checkpoint file")
        cfg = TrainConfig.from_dict(meta["train"])
        enc = ToyEncoder(
            w_v=np.array(data["param__w_v"]), w_a=np.array(data["param__w_a"]),
            u_v=np.array(data["param__u_v"]) if meta["hidden"] else None,
            u_a=np.array(data["param__u_a"]) if meta["hidden"] else None,
            normalize_output=bool(meta["normalize_output"]))
        opt = make_optimizer(cfg)
        opt.load_state_dict({key[5:]: data[key] for key in data.files
                             if key.startswith("opt__")})
        history = [float(v) for v in meta["history"]]
        return enc, cfg, int(meta["epochs_done"]), opt, history


_REPORT_RUN_HEADER = "margin,seed,retrieval_accuracy,ciou_at_half,auc,final_loss,status"
_REPORT_AGG_HEADER = ("margin,n_runs,retrieval_mean,retrieval_std,"
                      "ciou_at_half_mean,ciou_at_half_std,auc_mean,auc_std")


def report_to_csv(report: ExperimentReport, config_hash: str, title: str) -> str:
    lines = [f"# marginnce {title}", f"# config_sha256: {config_hash}",
             _REPORT_RUN_HEADER]
    for r in report.runs:
        lines.append(",".join([repr(r.margin), str(r.seed),
                               repr(r.retrieval_accuracy), repr(r.ciou_at_half),
                               repr(r.auc), repr(r.final_loss),
                               r.status.replace(",", ";")]))
    lines.append("# aggregates")
    lines.append(_REPORT_AGG_HEADER)
    for a in report.aggregates:
        lines.append(",".join([repr(a.margin), str(a.n_runs),
                               repr(a.retrieval_mean), repr(a.retrieval_std),
                               repr(a.ciou_at_half_mean), repr(a.ciou_at_half_std),
                               repr(a.auc_mean), repr(a.auc_std)]))
    return "\n".join(lines) + "\n"


def report_from_csv(text: str) -> ExperimentReport:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    if not lines or lines[0] != _REPORT_RUN_HEADER:
        raise DataError("not a sweep report")
    runs = []
    for ln in lines[1:]:
        if ln == _REPORT_AGG_HEADER:
            break
        parts = ln.split(",")
        runs.append(RunRecord(
            margin=float(parts[0]), seed=int(parts[1]),
            retrieval_accuracy=float(parts[2]), ciou_at_half=float(parts[3]),
            auc=float(parts[4]), final_loss=float(parts[5]), status=parts[6]))
    return aggregate_runs(runs)


def plot_data_csv(report: ExperimentReport, config_hash: str) -> str:
    """Margin-versus-metric table (mean and std) for external plotting."""
    lines = ["# marginnce sweep plot data", f"# config_sha256: {config_hash}",
             _REPORT_AGG_HEADER]
    for a in report.aggregates:
        lines.append(",".join([repr(a.margin), str(a.n_runs),
                               repr(a.retrieval_mean), repr(a.retrieval_std),
                               repr(a.ciou_at_half_mean), repr(a.ciou_at_half_std),
                               repr(a.auc_mean), repr(a.auc_std)]))
    return "\n".join(lines) + "\n"
