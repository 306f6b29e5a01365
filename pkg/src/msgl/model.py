"""Shared RGrN graph embedding and the coarse / cross-scale / fine heads.

Parameter names::

    theta   Wx [F,4h]  Wh [h,4h]  b [4h]  Wg [h,h]  bg [h]      (shared)
    c.*     W [h,1] b [1]                                         (CSL)
    cr.*    Wq Wk Wv Wo [h,h] + biases, gamma beta [2h], W [2h,1] b [1]   (CrSL)
    f.*     Wres [2h,2h] bres, gamma beta [2h], W [2h,1] b [1]    (FSL)

Gate blocks along the 4h axis are ordered (i, f, o, c~).
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import ConfigError, DimensionError, ValidationError

TASKS = ("c", "cr", "f")
THETA = ("Wx", "Wh", "b", "Wg", "bg")


@dataclass
class ModelConfig:
    n_features: int = 7
    hidden: int = 64
    heads: int = 4
    input_dropout: float = 0.5
    recurrent_dropout: float = 0.2
    csl_dropout: float = 0.1
    bn_momentum: float = 0.9
    seed: int = 1
    dtype: str = "float64"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.n_features < 1 or self.hidden < 1:
            raise ConfigError("n_features and hidden must be positive")
        for name in ("input_dropout", "recurrent_dropout", "csl_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {p}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _shapes(F, h):
    h2 = 2 * h
    return {
        "Wx": (F, 4 * h), "Wh": (h, 4 * h), "b": (4 * h,), "Wg": (h, h), "bg": (h,),
        "c.W": (h, 1), "c.b": (1,),
        "cr.Wq": (h, h), "cr.bq": (h,), "cr.Wk": (h, h), "cr.bk": (h,),
        "cr.Wv": (h, h), "cr.bv": (h,), "cr.Wo": (h, h), "cr.bo": (h,),
        "cr.gamma": (h2,), "cr.beta": (h2,), "cr.W": (h2, 1), "cr.b": (1,),
        "f.Wres": (h2, h2), "f.bres": (h2,), "f.gamma": (h2,), "f.beta": (h2,),
        "f.W": (h2, 1), "f.b": (1,),
    }


def param_group(name: str) -> str:
    return name.split(".", 1)[0] if "." in name else "theta"


def glorot(rng, shape, dtype=np.float64):
    fan_in, fan_out = shape
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


class MSGLModel:
    """Parameters plus batch-norm running statistics of one MSGL network."""

    def __init__(self, config: ModelConfig | None = None, **overrides):
        if config is None:
            config = ModelConfig(**overrides)
        elif overrides:
            config = ModelConfig(**{**asdict(config), **overrides})
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in _shapes(config.n_features, config.hidden).items():
            if name.endswith("gamma"):
                val = np.ones(shape, dtype=dtype)
            elif len(shape) == 2:
                val = glorot(rng, shape, dtype)
            else:
                val = np.zeros(shape, dtype=dtype)
            self.params[name] = Tensor(val, requires_grad=True, name=name)
        h2 = 2 * config.hidden
        self.bn = {"cr": BatchNormState(h2, dtype), "f": BatchNormState(h2, dtype)}

    # -- parameter bookkeeping ------------------------------------------------

    def names(self, group: str | None = None) -> list[str]:
        return [k for k in self.params if group is None or param_group(k) == group]

    def theta(self):
        return [self.params[k] for k in THETA]

    def get(self, name) -> np.ndarray:
        return self.params[name].data

    def set(self, name, value):
        value = np.asarray(value, dtype=self.params[name].data.dtype)
        if value.shape != self.params[name].shape:
            raise DimensionError(f"{name}: expected {self.params[name].shape}, got {value.shape}")
        self.params[name].data = value

    def state(self) -> dict[str, np.ndarray]:
        out = {k: t.data.copy() for k, t in self.params.items()}
        for head, st in self.bn.items():
            out[f"bn.{head}.mean"] = st.running_mean.copy()
            out[f"bn.{head}.var"] = st.running_var.copy()
        return out

    def load_state(self, state: dict):
        for k in self.params:
            self.set(k, state[k])
        for head, st in self.bn.items():
            st.running_mean = np.array(state[f"bn.{head}.mean"], dtype=st.running_mean.dtype)
            st.running_var = np.array(state[f"bn.{head}.var"], dtype=st.running_var.dtype)

    def copy(self) -> "MSGLModel":
        other = MSGLModel(self.config)
        other.load_state(self.state())
        return other

    # -- forward pieces -------------------------------------------------------

    def graph_embed(self, X, A, training=False, rng=None, fused=True):
        """Unroll the RGrN over ``X`` [T, nodes, F] from a zero state -> [T, nodes, h]."""
        cfg = self.config
        X = ad.as_tensor(X)
        if X.ndim != 3 or X.shape[2] != cfg.n_features:
            raise DimensionError(f"graph_embed: X shape {X.shape}, expected [T, nodes, {cfg.n_features}]")
        if X.shape[0] < 1:
            raise DimensionError("graph_embed: empty time axis")
        A = np.asarray(A.data if isinstance(A, Tensor) else A, dtype=X.data.dtype)
        n = X.shape[1]
        if A.shape != (n, n):
            raise DimensionError(f"graph_embed: A shape {A.shape} for {n} nodes")
        rmask = None
        if training:
            if rng is None:
                raise ValidationError("training mode needs a random generator")
            X = ad.dropout(X, cfg.input_dropout, rng)
            p = cfg.recurrent_dropout
            if p > 0:
                rmask = (rng.random((n, cfg.hidden)) >= p).astype(X.data.dtype) / (1.0 - p)
        if fused:
            return ad.rgrn_sequence(X, *self.theta(), A, rmask=rmask)
        return graph_embed_composed(X, A, self.theta(), rmask)

    def csl_head(self, H_c, training=False, rng=None):
        p = self.params
        H = ad.dropout(H_c, self.config.csl_dropout, rng, training=training)
        return _dense_out(H, p["c.W"], p["c.b"])

    def attention(self, H, groups: int = 1):
        """Multi-head self-attention across the node axis, separately per step.

        With ``groups`` > 1 the node axis holds that many stacked, independent
        graphs of equal size and attention stays within each one.
        """
        p = self.params
        T, n, h = H.shape
        if n % groups:
            raise DimensionError(f"attention: {n} nodes not divisible into {groups} groups")
        g, m = groups, n // groups
        k = self.config.heads
        dh = h // k

        def split(W, b):
            Z = ad.add(ad.matmul(H, p[W]), p[b])
            return ad.transpose(ad.reshape(Z, (T, g, m, k, dh)), (0, 1, 3, 2, 4))

        Q, K, V = split("cr.Wq", "cr.bq"), split("cr.Wk", "cr.bk"), split("cr.Wv", "cr.bv")
        # scaling Q instead of the scores touches n times fewer entries
        scores = ad.matmul(ad.scale(Q, 1.0 / np.sqrt(dh)), ad.transpose(K, (0, 1, 2, 4, 3)))
        ctx = ad.matmul(ad.softmax_last_axis(scores), V)
        ctx = ad.reshape(ad.transpose(ctx, (0, 1, 3, 2, 4)), (T, n, h))
        return ad.add(ad.matmul(ctx, p["cr.Wo"]), p["cr.bo"])

    def crsl_head(self, H_cr, training=False, groups: int = 1):
        p = self.params
        Hc = ad.concat_last_axis(H_cr, self.attention(ad.as_tensor(H_cr), groups))
        Hn = ad.batchnorm(Hc, p["cr.gamma"], p["cr.beta"], self.bn["cr"], training,
                          momentum=self.config.bn_momentum)
        return _dense_out(Hn, p["cr.W"], p["cr.b"])

    def fsl_head(self, H_f, H_cr, training=False):
        p = self.params
        H_f, H_cr = ad.as_tensor(H_f), ad.as_tensor(H_cr)
        if H_f.shape != H_cr.shape:
            raise DimensionError(f"fsl_head: H_f {H_f.shape} vs H_cr {H_cr.shape}")
        H = ad.concat_last_axis(H_f, H_cr)
        R = ad.relu(ad.add(ad.matmul(H, p["f.Wres"]), p["f.bres"]))
        Hn = ad.batchnorm(ad.add(H, R), p["f.gamma"], p["f.beta"], self.bn["f"], training,
                          momentum=self.config.bn_momentum)
        return _dense_out(Hn, p["f.W"], p["f.b"])

    def forward(self, X_c, X_f, A_c, A_f, D, tasks=TASKS, cross=True, training=False,
                rng=None, fused=True, groups: int = 1) -> dict[str, Tensor]:
        """Predictions for the requested ``tasks``; ``cross=False`` feeds FSL a zero H_cr.

        ``groups`` > 1 means several equal-length windows stacked on the node
        axis, with block-diagonal ``A_c``, ``A_f`` and ``D`` (see ``stack_windows``).
        """
        out = {}
        need_coarse = "c" in tasks or "cr" in tasks or ("f" in tasks and cross)
        H_c = H_cr = None
        if need_coarse:
            H_c = self.graph_embed(X_c, A_c, training, rng, fused)
        if "c" in tasks:
            out["c"] = self.csl_head(H_c, training, rng)
        if "cr" in tasks or ("f" in tasks and cross):
            H_cr = cross_scale_interpolate(H_c, D)
        if "cr" in tasks:
            out["cr"] = self.crsl_head(H_cr, training, groups)
        if "f" in tasks:
            H_f = self.graph_embed(X_f, A_f, training, rng, fused)
            if H_cr is None:
                H_cr = Tensor(np.zeros(H_f.shape, dtype=H_f.data.dtype))
            out["f"] = self.fsl_head(H_f, H_cr, training)
        return out

    # -- persistence ----------------------------------------------------------

    def save(self, path, meta: dict | None = None):
        save_checkpoint(path, self, meta)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)


def _dense_out(H, W, b):
    Y = ad.add(ad.matmul(H, W), b)
    return ad.reshape(Y, Y.shape[:-1])


def block_diag(A, copies: int) -> np.ndarray:
    """``copies`` copies of ``A`` on the diagonal (A itself when copies == 1)."""
    return A if copies == 1 else np.kron(np.eye(copies), A)


def cross_scale_interpolate(H_c, D):
    """H_cr[t] = D @ H_c[t] for every step: [T, M, h] x [N, M] -> [T, N, h]."""
    H_c = ad.as_tensor(H_c)
    D = ad.as_tensor(D)
    if H_c.ndim != 3 or D.ndim != 2 or D.shape[1] != H_c.shape[1]:
        raise DimensionError(f"cross_scale_interpolate: H_c {H_c.shape}, D {D.shape}")
    return ad.matmul(D, H_c)


def rgrn_step(x_t, s_prev, h_prev, A, theta, rmask=None):
    """One RGrN cell step built from primitive ops; returns (s_t, h_t)."""
    Wx, Wh, b, Wg, bg = theta
    h = ad.as_tensor(Wh).shape[0]
    x_t, s_prev, h_prev = ad.as_tensor(x_t), ad.as_tensor(s_prev), ad.as_tensor(h_prev)
    n = x_t.shape[0]
    if s_prev.shape != (n, h) or h_prev.shape != (n, h) or np.shape(A) != (n, n):
        raise DimensionError(
            f"rgrn_step: x {x_t.shape}, s {s_prev.shape}, h {h_prev.shape}, A {np.shape(A)}")
    if rmask is not None:
        h_prev = ad.hadamard(h_prev, rmask)
    z = ad.add(ad.add(ad.matmul(x_t, Wx), ad.matmul(h_prev, Wh)), b)
    ig = ad.sigmoid(ad.getitem(z, (slice(None), slice(0, h))))
    fg = ad.sigmoid(ad.getitem(z, (slice(None), slice(h, 2 * h))))
    og = ad.sigmoid(ad.getitem(z, (slice(None), slice(2 * h, 3 * h))))
    cand = ad.tanh(ad.getitem(z, (slice(None), slice(3 * h, 4 * h))))
    q = ad.tanh(ad.add(ad.matmul(s_prev, Wg), bg))
    m = ad.add(s_prev, ad.matmul(A, q))
    s = ad.add(ad.hadamard(fg, m), ad.hadamard(ig, cand))
    return s, ad.hadamard(og, ad.tanh(s))


def graph_embed_composed(X, A, theta, rmask=None):
    """Reference unroll using ``rgrn_step``; slower than the fused kernel."""
    X = ad.as_tensor(X)
    T, n, _ = X.shape
    h = ad.as_tensor(theta[1]).shape[0]
    A = Tensor(np.asarray(A, dtype=X.data.dtype))
    s = Tensor(np.zeros((n, h), dtype=X.data.dtype))
    hs = s
    outs = []
    for t in range(T):
        s, hs = rgrn_step(ad.getitem(X, t), s, hs, A, theta, rmask)
        outs.append(hs)
    return ad.stack(outs, axis=0)


# -- checkpoints ------------------------------------------------------------
#
# A checkpoint is a numpy .npz archive: one array per parameter name, batch-norm
# statistics under "bn.<head>.mean" / "bn.<head>.var", and "__meta__", a JSON
# string holding {"model_config": {...}, **meta}. Members are written in sorted
# order with a fixed timestamp so identical models give identical bytes.


def save_checkpoint(path, model: MSGLModel, meta: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"model_config": asdict(model.config), **(meta or {})}
    arrays = model.state()
    arrays["__meta__"] = np.array(json.dumps(payload, sort_keys=True))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)),
                        buf.getvalue())


def load_checkpoint(path) -> tuple[MSGLModel, dict]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        model = MSGLModel(ModelConfig.from_dict(meta.pop("model_config")))
        model.load_state({k: z[k] for k in z.files if k != "__meta__"})
    return model, meta
