"""Training drivers: synchronous multi-task training, single-task and ablation
modes, and the three-stage asynchronous procedure (coarse pretraining,
pseudo-label pretraining, fine-tuning).

Sequences are cut into consecutive windows of ``window`` days starting at day
0; every window starts from a zero recurrent state. A window is used for
training when it overlaps the training range, with losses restricted to
labels inside that range.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import mso
from .data_io import Dataset, Partition, make_partition, sparsify
from .errors import ConfigError, ValidationError
from .evaluation import rmse_masked
from .model import MSGLModel, ModelConfig, TASKS, THETA, block_diag
from .stream_graph import CrossScaleMap

log = logging.getLogger(__name__)

# mode -> (tasks with a loss, whether FSL sees the interpolated coarse embedding)
MODES = {
    "msgl": (("c", "cr", "f"), True),
    "csl": (("c",), False),
    "crsl": (("cr",), False),
    "fsl": (("f",), False),
    "no-csl": (("cr", "f"), True),
    "no-crsl": (("c", "f"), True),
}


@dataclass
class TrainConfig:
    hidden: int = 64
    heads: int = 4
    input_dropout: float = 0.5
    recurrent_dropout: float = 0.2
    csl_dropout: float = 0.1
    lr: float = 0.005
    lr_decay: float = 0.7
    decay_epochs: tuple = (40, 50)
    epochs: int = 60
    pretrain_epochs: int = 60
    csl_epochs: int = 60
    patience: int = 30
    window: int = 200
    batch_windows: int = 1
    shuffle_windows: bool = False
    model_seeds: tuple = (1, 2, 3)
    mask_seeds: tuple = (42, 61, 71)
    fine_fraction: float = 1.0
    mode: str = "msgl"
    optimizer: str = "mso"
    seed: int = 1
    fused: bool = True

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.model_seeds = tuple(int(s) for s in self.model_seeds)
        self.mask_seeds = tuple(int(s) for s in self.mask_seeds)
        if self.mode not in MODES and self.mode != "async":
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.optimizer not in ("mso", "plain"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.window < 2:
            raise ConfigError("window must be >= 2")
        if self.batch_windows < 1:
            raise ConfigError("batch_windows must be >= 1")
        if self.epochs < 1 or self.pretrain_epochs < 0 or self.csl_epochs < 0:
            raise ConfigError("epoch counts must be positive (pretraining may be 0)")
        if any(e >= self.epochs for e in self.decay_epochs):
            raise ConfigError(f"decay epochs {self.decay_epochs} must be < epochs {self.epochs}")
        if self.patience > self.epochs:
            raise ConfigError("patience must be <= epochs")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not 0 < self.fine_fraction <= 1:
            raise ConfigError("fine_fraction must be in (0, 1]")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        d = asdict(self)
        for k in ("decay_epochs", "model_seeds", "mask_seeds"):
            d[k] = list(d[k])
        return d

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-indexed ``epoch``: cut after each decay epoch has passed."""
        passed = sum(1 for e in self.decay_epochs if epoch > e)
        return self.lr * self.lr_decay ** passed

    def model_config(self, n_features: int, seed: int | None = None) -> ModelConfig:
        return ModelConfig(n_features=n_features, hidden=self.hidden, heads=self.heads,
                           input_dropout=self.input_dropout,
                           recurrent_dropout=self.recurrent_dropout,
                           csl_dropout=self.csl_dropout,
                           seed=self.seed if seed is None else seed)


@dataclass
class RunHistory:
    mode: str
    losses: list = field(default_factory=list)  # per epoch: {task: mean loss}
    val_rmse: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    alpha: list = field(default_factory=list)  # per step: {task: weight}
    best_epoch: int = 0
    best_val: float = float("inf")
    stages: dict = field(default_factory=dict)

    def to_dict(self):
        return {"mode": self.mode, "losses": self.losses, "val_rmse": self.val_rmse,
                "lr": self.lr, "alpha": self.alpha, "best_epoch": self.best_epoch,
                "best_val": self.best_val,
                "stages": {k: v.to_dict() for k, v in self.stages.items()}}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


# -- windows and forward passes --------------------------------------------------


def windows(T: int, length: int) -> list[tuple[int, int]]:
    return [(a, min(a + length, T)) for a in range(0, T, length)]


def batch_windows(spans, size: int, rng=None) -> list[list[tuple[int, int]]]:
    """Group windows into batches of up to ``size`` equal-length windows.

    Order is chronological, or a permutation drawn from ``rng``.
    """
    order = list(range(len(spans))) if rng is None else list(rng.permutation(len(spans)))
    by_len: dict[int, list] = {}
    for i in order:
        a, b = spans[i]
        by_len.setdefault(b - a, []).append(spans[i])
    out = []
    for group in by_len.values():
        out.extend(group[j:j + size] for j in range(0, len(group), size))
    return out


def stack_windows(arr, spans):
    """Concatenate day slices of ``arr`` [T, n, ...] along the node axis."""
    if len(spans) == 1:
        a, b = spans[0]
        return arr[a:b]
    return np.concatenate([arr[a:b] for a, b in spans], axis=1)


class _Panels:
    """Model inputs of a dataset, precomputed once."""

    def __init__(self, ds: Dataset):
        self.X_c = np.ascontiguousarray(ds.features("coarse"))
        self.X_f = np.ascontiguousarray(ds.features("fine"))
        self.A_c = ds.coarse.adjacency
        self.A_f = ds.fine.adjacency
        self.D = ds.cross.d_matrix
        self.Y_c = np.where(ds.mask_c, ds.Y_c, 0.0)
        self.Y_f = np.where(ds.mask_f, ds.Y_f, 0.0)
        self.M_c = ds.mask_c
        self.M_f = ds.mask_f


def predict(model: MSGLModel, ds: Dataset | _Panels, mode: str = "msgl",
            window: int = 200, tasks=None) -> dict[str, np.ndarray]:
    """Evaluation-mode predictions over the full date range, per task head."""
    P = ds if isinstance(ds, _Panels) else _Panels(ds)
    loss_tasks, cross = MODES["msgl" if mode == "async" else mode]
    tasks = loss_tasks if tasks is None else tuple(tasks)
    T = P.X_c.shape[0]
    out = {t: [] for t in tasks}
    for a, b in windows(T, window):
        pred = model.forward(P.X_c[a:b], P.X_f[a:b], P.A_c, P.A_f, P.D, tasks=tasks,
                             cross=cross, training=False)
        for t in tasks:
            out[t].append(pred[t].data)
    return {t: np.concatenate(v, axis=0) for t, v in out.items()}


def fine_prediction(preds: dict, cross: CrossScaleMap | None = None) -> np.ndarray:
    """The fine-scale output of a run: FSL if trained, else CrSL, else remapped CSL."""
    if "f" in preds:
        return preds["f"]
    if "cr" in preds:
        return preds["cr"]
    if cross is None:
        raise ValidationError("coarse-only predictions need a cross-scale map")
    return remap_coarse_to_fine(preds["c"], cross)


def remap_coarse_to_fine(Y_c: np.ndarray, cross: CrossScaleMap) -> np.ndarray:
    """Copy each coarse series to the fine reaches coincident with it."""
    Y_c = np.asarray(Y_c)
    if Y_c.ndim != 2 or Y_c.shape[1] != len(cross.coarse_ids):
        raise ValidationError(f"coarse predictions {Y_c.shape} vs {len(cross.coarse_ids)} coarse reaches")
    return Y_c[:, cross.coincidence_index()]


def _val_rmse(model, P: _Panels, part: Partition, mode: str, window: int, cross_map) -> float:
    tasks, _ = MODES[mode]
    a, b = part.val
    # only windows overlapping the validation range are needed
    spans = [(s, e) for s, e in windows(P.X_c.shape[0], window) if s < b and e > a]
    lo, hi = spans[0][0], spans[-1][1]
    preds = {t: [] for t in tasks}
    for s, e in spans:
        out = model.forward(P.X_c[s:e], P.X_f[s:e], P.A_c, P.A_f, P.D, tasks=tasks,
                            cross=MODES[mode][1], training=False)
        for t in tasks:
            preds[t].append(out[t].data)
    preds = {t: np.concatenate(v)[a - lo: b - lo] for t, v in preds.items()}
    if mode == "csl":
        return rmse_masked(preds["c"], P.Y_c[a:b], P.M_c[a:b])
    return rmse_masked(fine_prediction(preds, cross_map), P.Y_f[a:b], P.M_f[a:b])


# -- training -------------------------------------------------------------------------


def _check_labels(P: _Panels, part: Partition, mode: str, train_range):
    tasks, _ = MODES[mode]
    sl = slice(*train_range)
    vs = part.slice("val")
    if "c" in tasks and not P.M_c[sl].any():
        raise ConfigError("no coarse labels in the training range")
    if ("cr" in tasks or "f" in tasks) and not P.M_f[sl].any():
        raise ConfigError("no fine labels in the training range")
    val_mask = P.M_c[vs] if mode == "csl" else P.M_f[vs]
    if not val_mask.any():
        raise ConfigError("no validation labels for early stopping")


def train_msgl(ds: Dataset, config: TrainConfig, partition: Partition | None = None,
               model: MSGLModel | None = None, mode: str | None = None,
               seed: int | None = None, epochs: int | None = None,
               train_range: tuple | None = None) -> tuple[MSGLModel, RunHistory]:
    """Train in ``mode`` (default ``config.mode``) and return the best-validation model.

    ``model`` warm-starts from existing parameters; otherwise a new model is
    initialized from ``seed`` (default ``config.seed``). ``train_range``
    overrides the partition's training days (pseudo-label pretraining fits
    on train and validation days together).
    """
    mode = mode or config.mode
    if mode not in MODES:
        raise ConfigError(f"train_msgl cannot run mode {mode!r}")
    seed = config.seed if seed is None else seed
    epochs = config.epochs if epochs is None else epochs
    part = partition or make_partition(ds.T)
    P = _Panels(ds)
    a, b = part.train if train_range is None else train_range
    _check_labels(P, part, mode, (a, b))
    tasks, cross = MODES[mode]
    if model is None:
        model = MSGLModel(config.model_config(P.X_c.shape[2], seed))
    else:
        model = model.copy()

    train_w = [(s, e) for s, e in windows(ds.T, config.window) if s < b and e > a]
    in_train = np.zeros(ds.T, bool)
    in_train[a:b] = True
    Mc = P.M_c & in_train[:, None]
    Mf = P.M_f & in_train[:, None]

    ops = {}

    def graph_ops(g):
        if g not in ops:
            ops[g] = (block_diag(P.A_c, g), block_diag(P.A_f, g), block_diag(P.D, g))
        return ops[g]

    theta_names = list(THETA)
    theta_shapes = [model.params[k].shape for k in theta_names]
    head_names = {t: model.names(t) for t in TASKS}

    hist = RunHistory(mode)
    best_state = model.state()
    best_val, best_epoch = float("inf"), 0
    for epoch in range(1, epochs + 1):
        lr = config.lr_at(epoch)
        sums = {t: 0.0 for t in tasks}
        order_rng = np.random.default_rng([seed, epoch]) if config.shuffle_windows else None
        batches = batch_windows(train_w, config.batch_windows, order_rng)
        for step, spans in enumerate(batches):
            rng = np.random.default_rng([seed, epoch, step])
            Yf = stack_windows(P.Y_f, spans)
            Mf_b = stack_windows(Mf, spans)
            labels = {"c": (stack_windows(P.Y_c, spans), stack_windows(Mc, spans)),
                      "cr": (Yf, Mf_b), "f": (Yf, Mf_b)}
            active = [t for t in tasks if labels[t][1].any()]
            if not active:
                continue
            A_c, A_f, D = graph_ops(len(spans))
            with ad.Tape() as tape:
                preds = model.forward(stack_windows(P.X_c, spans), stack_windows(P.X_f, spans),
                                      A_c, A_f, D, tasks=tasks, cross=cross, training=True,
                                      rng=rng, fused=config.fused, groups=len(spans))
                losses = {t: ad.masked_mse(preds[t], *labels[t]) for t in active}
            per_task = {}
            for t in active:
                g = ad.backward(tape, losses[t], wrt=list(model.params.values()))
                per_task[t] = {k: g[p.id] for k, p in model.params.items()}
                sums[t] += float(losses[t].data)
            grads = mso.TaskGradients.from_grads(theta_names, theta_shapes, per_task, head_names)
            alpha = mso.step(model, grads, lr, config.optimizer)
            hist.alpha.append({t: float(w) for t, w in zip(grads.theta, alpha)})
        hist.losses.append({t: v / max(len(batches), 1) for t, v in sums.items()})
        hist.lr.append(lr)
        val = _val_rmse(model, P, part, mode, config.window, ds.cross)
        hist.val_rmse.append(val)
        if val < best_val:
            best_val, best_epoch = val, epoch
            best_state = model.state()
        elif epoch - best_epoch >= config.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    model.load_state(best_state)
    hist.best_epoch, hist.best_val = best_epoch, best_val
    return model, hist


def train_csl_standalone(ds: Dataset, config: TrainConfig, partition: Partition | None = None,
                         seed: int | None = None, epochs: int | None = None):
    """Graph embedding plus coarse head only, early-stopped on coarse validation RMSE."""
    if not ds.mask_c.any():
        raise ConfigError("no coarse labels")
    return train_msgl(ds, config, partition, mode="csl", seed=seed, epochs=epochs)


def build_d_mapping(ds: Dataset, csl_model: MSGLModel, part: Partition, window: int) -> Dataset:
    """Pseudo-labelled dataset: coarse labels are CSL predictions, fine labels
    their remap to coincident fine reaches, both dense over the pretraining range."""
    Y_c = predict(csl_model, ds, "csl", window)["c"]
    Y_f = remap_coarse_to_fine(Y_c, ds.cross)
    a, b = part.pretrain_range()
    m_c = np.zeros(Y_c.shape, bool)
    m_c[a:b] = True
    m_f = np.zeros(Y_f.shape, bool)
    m_f[a:b] = True
    return ds.with_labels(Y_c=Y_c, mask_c=m_c, Y_f=Y_f, mask_f=m_f)


def train_async_msgl(ds: Dataset, config: TrainConfig, partition: Partition | None = None,
                     seed: int | None = None) -> tuple[MSGLModel, RunHistory]:
    """Coarse pretraining, pseudo-label multi-task pretraining, then fine-tuning."""
    seed = config.seed if seed is None else seed
    part = partition or make_partition(ds.T)
    hist = RunHistory("async")
    model = None
    if config.pretrain_epochs > 0:
        csl_model, h1 = train_csl_standalone(ds, config, part, seed=seed,
                                             epochs=max(config.csl_epochs, 1))
        hist.stages["csl"] = h1
        mapped = build_d_mapping(ds, csl_model, part, config.window)
        # validation during pretraining scores the pseudo labels on validation days
        model, h2 = train_msgl(mapped, config, part, model=csl_model, mode="msgl", seed=seed,
                               epochs=config.pretrain_epochs, train_range=part.pretrain_range())
        hist.stages["pretrain"] = h2
    model, h3 = train_msgl(ds, config, part, model=model, mode="msgl", seed=seed)
    hist.stages["finetune"] = h3
    hist.losses, hist.val_rmse, hist.lr, hist.alpha = h3.losses, h3.val_rmse, h3.lr, h3.alpha
    hist.best_epoch, hist.best_val = h3.best_epoch, h3.best_val
    return model, hist


def train(ds: Dataset, config: TrainConfig, partition: Partition | None = None,
          mode: str | None = None, seed: int | None = None):
    mode = mode or config.mode
    if mode == "async":
        return train_async_msgl(ds, config, partition, seed=seed)
    return train_msgl(ds, config, partition, mode=mode, seed=seed)


# -- replicate grid -----------------------------------------------------------------


@dataclass
class Replicate:
    mode: str
    model_seed: int
    mask_seed: int
    model: MSGLModel
    history: RunHistory
    fine_pred: np.ndarray  # [T, N] over the full date range

    @property
    def tag(self):
        return f"ms{self.model_seed}_ks{self.mask_seed}"


def sparsified(ds: Dataset, part: Partition, fraction: float, mask_seed: int) -> Dataset:
    """Fine labels thinned to ``fraction`` in the train and validation ranges."""
    if fraction >= 1.0:
        return ds
    return sparsify(ds, part, fraction, mask_seed)


def run_replicate(ds: Dataset, part: Partition, config: TrainConfig, mode: str,
                  model_seed: int, mask_seed: int) -> Replicate:
    data = sparsified(ds, part, config.fine_fraction, mask_seed)
    model, hist = train(data, config, part, mode=mode, seed=model_seed)
    preds = predict(model, data, mode, config.window)
    return Replicate(mode, model_seed, mask_seed, model, hist,
                     fine_prediction(preds, data.cross))


def replicate_grid(ds: Dataset, part: Partition, config: TrainConfig, mode: str | None = None,
                   seeds=None):
    """Run every (model seed, mask seed) pair; yields ``Replicate`` records in order."""
    mode = mode or config.mode
    if seeds is None:
        seeds = [(m, k) for m in config.model_seeds for k in config.mask_seeds]
    for m, k in seeds:
        yield run_replicate(ds, part, config, mode, m, k)
