"""The five-block CNN forgery classifier: parameters, forward/backward, checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import BatchNormParams, ConvParams, RmsPropState, ShapeError

CHECKPOINT_MAGIC = b"FGL1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed, truncated, or incompatible checkpoint files."""


@dataclass(frozen=True)
class ArchConfig:
    input_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64, 128, 128)
    fc_hidden: int = 256
    in_channels: int = 3
    # the published classifier has exactly five conv blocks; toy models used
    # in tests switch this off to build shallower stacks
    strict: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.strict and len(self.widths) != 5:
            raise ValueError(f"expected exactly 5 conv blocks, got {len(self.widths)}")
        if not self.widths or min(self.widths) < 1 or self.fc_hidden < 1:
            raise ValueError("widths and fc_hidden must be positive")
        if self.input_size % (2 ** len(self.widths)) or self.input_size <= 0:
            raise ValueError(f"input_size {self.input_size} must be a positive multiple "
                             f"of 2**{len(self.widths)}")

    @property
    def n_blocks(self) -> int:
        return len(self.widths)

    @property
    def feature_size(self) -> int:
        """Spatial size of the last conv block's output, before its pool."""
        return self.input_size // 2 ** (self.n_blocks - 1)

    @property
    def flat_dim(self) -> int:
        side = self.input_size // 2 ** self.n_blocks
        return self.widths[-1] * side * side

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**{**d, "widths": tuple(d["widths"])})


@dataclass
class BlockCache:
    x: np.ndarray
    cols: np.ndarray
    z: np.ndarray
    bn: T.BatchNormCache | None
    pre_relu: np.ndarray
    post_relu: np.ndarray
    argmax: np.ndarray


@dataclass
class ActivationCache:
    blocks: list[BlockCache]
    flat: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray
    mode: str

    @property
    def feature_maps(self) -> np.ndarray:
        """Post-ReLU output of the last conv block (the Grad-CAM tap)."""
        return self.blocks[-1].post_relu


@dataclass
class Model:
    arch: ArchConfig
    params: dict[str, np.ndarray]
    opt_state: dict[str, RmsPropState] = field(default_factory=dict)
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    # ---- parameter views -------------------------------------------------
    def conv(self, i: int) -> ConvParams:
        return ConvParams(self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"],
                          stride=1, padding=1)

    def bn(self, i: int) -> BatchNormParams:
        p = self.params
        return BatchNormParams(p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                               p[f"bn{i}.running_mean"], p[f"bn{i}.running_var"],
                               momentum=self.bn_momentum, epsilon=self.bn_epsilon)

    def learnable_names(self) -> list[str]:
        return [k for k in self.params if ".running_" not in k]

    @property
    def dtype(self):
        return self.params["conv0.weight"].dtype

    def astype(self, dtype) -> "Model":
        return Model(self.arch, {k: v.astype(dtype) for k, v in self.params.items()},
                     opt_state={}, epoch=self.epoch, history=list(self.history),
                     bn_momentum=self.bn_momentum, bn_epsilon=self.bn_epsilon)

    def copy(self) -> "Model":
        opt = {k: RmsPropState(v.s.copy(), v.decay, v.learning_rate, v.epsilon)
               for k, v in self.opt_state.items()}
        return Model(self.arch, {k: v.copy() for k, v in self.params.items()}, opt,
                     self.epoch, [dict(h) for h in self.history],
                     self.bn_momentum, self.bn_epsilon)

    # ---- forward ---------------------------------------------------------
    def forward(self, x: np.ndarray, mode: str = "infer", update_stats: bool = True):
        """Run the network; returns ``(logits, cache)`` with one logit per sample."""
        a = self.arch
        if x.ndim != 4 or x.shape[1:] != (a.in_channels, a.input_size, a.input_size):
            raise ShapeError(f"batch shape {x.shape} does not match model input "
                             f"(n, {a.in_channels}, {a.input_size}, {a.input_size})")
        x = x.astype(self.dtype, copy=False)
        blocks = []
        h = x
        for i in range(a.n_blocks):
            conv = self.conv(i)
            cols = T.im2col(h, 3, 3, 1, 1)
            z = T.conv2d_from_cols(cols, conv, h.shape)
            bn_params = self.bn(i)
            pre, bn_cache = T.batchnorm(z, bn_params, mode, update_stats=update_stats)
            if mode == "train" and update_stats:
                self.params[f"bn{i}.running_mean"] = bn_params.running_mean
                self.params[f"bn{i}.running_var"] = bn_params.running_var
            post = T.relu(pre)
            pooled, argmax = T.maxpool2(post)
            blocks.append(BlockCache(h, cols, z, bn_cache, pre, post, argmax))
            h = pooled
        logits, flat, hidden_pre, hidden = self._head_from_pooled(h)
        return logits, ActivationCache(blocks, flat, hidden_pre, hidden, mode)

    def _head_from_pooled(self, pooled: np.ndarray):
        p = self.params
        flat = pooled.reshape(pooled.shape[0], -1)
        hidden_pre = T.linear(flat, p["fc1.weight"], p["fc1.bias"])
        hidden = T.relu(hidden_pre)
        logits = T.linear(hidden, p["fc2.weight"], p["fc2.bias"])[:, 0]
        return logits, flat, hidden_pre, hidden

    def head_forward(self, feature_maps: np.ndarray) -> np.ndarray:
        """Logits as a function of the last block's post-ReLU feature maps."""
        pooled, _ = T.maxpool2(feature_maps.astype(self.dtype, copy=False))
        return self._head_from_pooled(pooled)[0]

    # ---- backward --------------------------------------------------------
    def backward(self, cache: ActivationCache, dlogits: np.ndarray, stop_at_features: bool = False,
                 wrt_input: bool = False):
        """Backpropagate ``dlogits`` (d objective / d logit, one per sample).

        Returns a dict of parameter gradients (plus ``"input"`` when
        ``wrt_input``), or with ``stop_at_features`` the gradient at the last
        block's post-ReLU feature maps.
        """
        p = self.params
        dt = self.dtype
        dz = np.asarray(dlogits, dtype=dt).reshape(-1, 1)
        grads: dict[str, np.ndarray] = {}
        dh, grads["fc2.weight"], grads["fc2.bias"] = T.linear_backward(cache.hidden, p["fc2.weight"], dz)
        dh = T.relu_backward(cache.hidden_pre, dh)
        dflat, grads["fc1.weight"], grads["fc1.bias"] = T.linear_backward(cache.flat, p["fc1.weight"], dh)
        last = cache.blocks[-1]
        dpooled = dflat.reshape(last.argmax.shape)
        for i in reversed(range(self.arch.n_blocks)):
            b = cache.blocks[i]
            dpost = T.maxpool2_backward(b.argmax, dpooled)
            if stop_at_features:
                return dpost
            dpre = T.relu_backward(b.pre_relu, dpost)
            if cache.mode == "train":
                dz4, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = T.batchnorm_backward(b.bn, dpre)
            else:
                bn = self.bn(i)
                inv_std = (1.0 / np.sqrt(bn.running_var + bn.epsilon)).astype(dt).reshape(1, -1, 1, 1)
                dz4 = dpre * bn.gamma.reshape(1, -1, 1, 1) * inv_std
                xhat = (b.z - bn.running_mean.reshape(1, -1, 1, 1)) * inv_std
                grads[f"bn{i}.gamma"] = (dpre * xhat).sum(axis=(0, 2, 3))
                grads[f"bn{i}.beta"] = dpre.sum(axis=(0, 2, 3))
            dx, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = T.conv2d_backward(
                b.x, self.conv(i), dz4, cols=b.cols)
            dpooled = dx
        if wrt_input:
            grads["input"] = dpooled
        return grads

    def predict_logits(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size], "infer")[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, self.dtype)

    # ---- optimisation ----------------------------------------------------
    def init_optimizer(self, learning_rate: float = 1e-4, decay: float = 0.9,
                       epsilon: float = 1e-8) -> None:
        self.opt_state = {k: RmsPropState.like(self.params[k], decay=decay,
                                               learning_rate=learning_rate, epsilon=epsilon)
                          for k in self.learnable_names()}

    def apply_gradients(self, grads: dict[str, np.ndarray]) -> None:
        for name, state in self.opt_state.items():
            T.rmsprop_step(self.params[name], grads[name].astype(self.dtype, copy=False), state)


def model_init(arch: ArchConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Glorot-uniform weights, zero biases, unit gamma, zero beta."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def glorot(shape, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape).astype(dtype)

    c_in = arch.in_channels
    for i, c_out in enumerate(arch.widths):
        params[f"conv{i}.weight"] = glorot((c_out, c_in, 3, 3), c_in * 9, c_out * 9)
        params[f"conv{i}.bias"] = np.zeros(c_out, dtype)
        params[f"bn{i}.gamma"] = np.ones(c_out, dtype)
        params[f"bn{i}.beta"] = np.zeros(c_out, dtype)
        params[f"bn{i}.running_mean"] = np.zeros(c_out, dtype)
        params[f"bn{i}.running_var"] = np.ones(c_out, dtype)
        c_in = c_out
    params["fc1.weight"] = glorot((arch.flat_dim, arch.fc_hidden), arch.flat_dim, arch.fc_hidden)
    params["fc1.bias"] = np.zeros(arch.fc_hidden, dtype)
    params["fc2.weight"] = glorot((arch.fc_hidden, 1), arch.fc_hidden, 1)
    params["fc2.bias"] = np.zeros(1, dtype)
    model = Model(arch, params)
    model.init_optimizer()
    return model


# --------------------------------------------------------------------------
# checkpoint I/O
# --------------------------------------------------------------------------

def _tensor_items(model: Model):
    for name, arr in model.params.items():
        yield f"param/{name}", arr
    for name, st in model.opt_state.items():
        yield f"rmsprop/{name}", st.s


def save_checkpoint(model: Model, path) -> None:
    directory, payloads, offset = [], [], 0
    for name, arr in _tensor_items(model):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset,
                          "nbytes": len(data)})
        payloads.append(data)
        offset += len(data)
    rms = next(iter(model.opt_state.values()), None)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "arch": model.arch.to_dict(),
        "epoch": model.epoch,
        "history": model.history,
        "batchnorm": {"momentum": model.bn_momentum, "epsilon": model.bn_epsilon},
        "rmsprop": None if rms is None else {"learning_rate": rms.learning_rate,
                                             "decay": rms.decay, "epsilon": rms.epsilon},
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(payloads))


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    if len(raw) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('format_version')} "
                              f"!= supported {CHECKPOINT_VERSION}")
    body = raw[12 + hlen:]
    expected = sum(t["nbytes"] for t in header["tensors"])
    if len(body) != expected:
        raise CheckpointError(f"{path}: payload is {len(body)} bytes, expected {expected} (truncated?)")

    params, opt = {}, {}
    rms = header["rmsprop"] or {}
    for t in header["tensors"]:
        arr = np.frombuffer(body, dtype="<f4", count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=t["offset"]).astype(np.float32).reshape(t["shape"])
        kind, name = t["name"].split("/", 1)
        if kind == "param":
            params[name] = arr
        else:
            opt[name] = RmsPropState(arr, **rms)
    bn = header.get("batchnorm", {})
    return Model(ArchConfig.from_dict(header["arch"]), params, opt, header["epoch"],
                 header["history"], bn_momentum=bn.get("momentum", 0.9),
                 bn_epsilon=bn.get("epsilon", 1e-5))
