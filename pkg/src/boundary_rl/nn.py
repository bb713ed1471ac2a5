"""Minimal dense/conv network core with reverse-mode gradients and Adam.

Everything is float64 and deterministic: same params and input give
bitwise-identical outputs, and training runs reproduce checkpoints
byte-for-byte. Layers are described by plain dicts so architectures
serialize directly into checkpoint headers.

Supported layer kinds:
    {"kind": "conv", "out_channels": F, "kernel": k, "stride": s,
     "padding": "valid" | "same"}          input (N, C, H, W)
    {"kind": "dense", "units": U}          input (N, D)
    {"kind": "relu"} {"kind": "sigmoid"} {"kind": "flatten"}
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = b"BRL-CKPT-v1\n"


class ShapeError(ValueError):
    """Raised when tensors do not match the architecture."""


class CheckpointError(ValueError):
    """Raised for unreadable or mismatched checkpoint files."""


@dataclass
class Network:
    arch: tuple            # tuple of layer dicts
    input_shape: tuple     # per-sample shape, e.g. (C, H, W) or (D,)
    params: dict           # name -> float64 ndarray
    layer_shapes: tuple    # per-sample output shape after each layer

    @property
    def output_shape(self) -> tuple:
        return self.layer_shapes[-1] if self.layer_shapes else self.input_shape

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def set_params(self, params: dict) -> None:
        for k in self.params:
            self.params[k][...] = params[k]


def _conv_out(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        size = size + kernel - 1
    return (size - kernel) // stride + 1


def _infer_shapes(arch, input_shape):
    shapes = []
    shape = tuple(input_shape)
    for idx, layer in enumerate(arch):
        kind = layer["kind"]
        if kind == "conv":
            if len(shape) != 3:
                raise ShapeError(f"layer {idx}: conv needs (C, H, W), got {shape}")
            k, s = layer["kernel"], layer["stride"]
            if layer["padding"] == "same" and (s != 1 or k % 2 == 0):
                raise ShapeError("same padding requires stride 1 and odd kernel")
            h = _conv_out(shape[1], k, s, layer["padding"])
            w = _conv_out(shape[2], k, s, layer["padding"])
            if h <= 0 or w <= 0:
                raise ShapeError(f"layer {idx}: conv output collapsed to {h}x{w}")
            shape = (layer["out_channels"], h, w)
        elif kind == "dense":
            if len(shape) != 1:
                raise ShapeError(f"layer {idx}: dense needs flat input, got {shape}")
            shape = (layer["units"],)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind in ("relu", "sigmoid"):
            pass
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        shapes.append(shape)
    return tuple(shapes)


def init_network(arch, input_shape, rng) -> Network:
    """Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
    arch = tuple(dict(layer) for layer in arch)
    shapes = _infer_shapes(arch, input_shape)
    params = {}
    shape = tuple(input_shape)
    for idx, layer in enumerate(arch):
        if layer["kind"] == "conv":
            c_in = shape[0]
            f, k = layer["out_channels"], layer["kernel"]
            fan_in, fan_out = c_in * k * k, f * k * k
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"layer{idx}/W"] = rng.uniform(-limit, limit, (f, c_in, k, k))
            params[f"layer{idx}/b"] = np.zeros(f)
        elif layer["kind"] == "dense":
            d_in, d_out = shape[0], layer["units"]
            limit = np.sqrt(6.0 / (d_in + d_out))
            params[f"layer{idx}/W"] = rng.uniform(-limit, limit, (d_in, d_out))
            params[f"layer{idx}/b"] = np.zeros(d_out)
        shape = shapes[idx]
    return Network(arch=arch, input_shape=tuple(input_shape), params=params,
                   layer_shapes=shapes)


# ---------------------------------------------------------------------------
# forward / backward


def _im2col(x, kernel, stride):
    # x: (N, C, H, W) -> cols (N*Ho*Wo, C*k*k), plus (Ho, Wo)
    windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
    return np.ascontiguousarray(cols), ho, wo


def forward(net: Network, x: np.ndarray):
    """Run a batch through the network.

    x: (N, *input_shape). Returns (output, cache); pass the cache to
    backward() for gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ShapeError(
            f"input shape {x.shape[1:]} does not match network "
            f"input {net.input_shape}"
        )
    caches = []
    out = x
    for idx, layer in enumerate(net.arch):
        kind = layer["kind"]
        if kind == "conv":
            w = net.params[f"layer{idx}/W"]
            b = net.params[f"layer{idx}/b"]
            k, s, pad = layer["kernel"], layer["stride"], layer["padding"]
            if pad == "same":
                p = (k - 1) // 2
                xp = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
            else:
                xp = out
            cols, ho, wo = _im2col(xp, k, s)
            f = w.shape[0]
            y = cols @ w.reshape(f, -1).T + b
            n = out.shape[0]
            y = y.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
            caches.append(("conv", cols, xp.shape, ho, wo))
            out = y
        elif kind == "dense":
            w = net.params[f"layer{idx}/W"]
            b = net.params[f"layer{idx}/b"]
            caches.append(("dense", out))
            out = out @ w + b
        elif kind == "relu":
            mask = out > 0
            caches.append(("relu", mask))
            out = out * mask
        elif kind == "sigmoid":
            y = 1.0 / (1.0 + np.exp(-out))
            caches.append(("sigmoid", y))
            out = y
        elif kind == "flatten":
            caches.append(("flatten", out.shape))
            out = out.reshape(out.shape[0], -1)
    return out, caches


def backward(net: Network, caches, output_grad: np.ndarray):
    """Backpropagate output_grad; returns (param gradients, input gradient)."""
    if len(caches) != len(net.arch):
        raise ShapeError("cache does not match this network")
    grads = {}
    dy = np.asarray(output_grad, dtype=np.float64)
    for idx in range(len(net.arch) - 1, -1, -1):
        layer = net.arch[idx]
        cache = caches[idx]
        kind = layer["kind"]
        if kind == "conv":
            _, cols, xp_shape, ho, wo = cache
            w = net.params[f"layer{idx}/W"]
            f = w.shape[0]
            k, s, pad = layer["kernel"], layer["stride"], layer["padding"]
            dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, f)
            grads[f"layer{idx}/W"] = (dy_mat.T @ cols).reshape(w.shape)
            grads[f"layer{idx}/b"] = dy_mat.sum(axis=0)
            dcols = (dy_mat @ w.reshape(f, -1)).reshape(
                xp_shape[0], ho, wo, xp_shape[1], k, k
            )
            dxp = np.zeros(xp_shape)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki : ki + s * ho : s, kj : kj + s * wo : s] += (
                        dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                    )
            if pad == "same":
                p = (k - 1) // 2
                dy = dxp[:, :, p : xp_shape[2] - p, p : xp_shape[3] - p]
            else:
                dy = dxp
        elif kind == "dense":
            _, x_in = cache
            w = net.params[f"layer{idx}/W"]
            grads[f"layer{idx}/W"] = x_in.T @ dy
            grads[f"layer{idx}/b"] = dy.sum(axis=0)
            dy = dy @ w.T
        elif kind == "relu":
            dy = dy * cache[1]
        elif kind == "sigmoid":
            y = cache[1]
            dy = dy * y * (1.0 - y)
        elif kind == "flatten":
            dy = dy.reshape(cache[1])
    return grads, dy


# ---------------------------------------------------------------------------
# losses and probability helpers

BCE_EPS = 1e-7


def bce_loss(prob, label):
    """Binary cross-entropy and its derivative w.r.t. the probability.

    Probabilities are clamped to [BCE_EPS, 1-BCE_EPS] before the logs, so
    saturated predictions stay finite. Works elementwise on arrays.
    """
    p = np.clip(np.asarray(prob, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(label, dtype=np.float64)
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    dloss_dprob = (p - y) / (p * (1.0 - p))
    if np.isscalar(prob) or np.ndim(prob) == 0:
        return float(loss), float(dloss_dprob)
    return loss, dloss_dprob


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(params: dict, grads: dict, state: AdamState):
    """Standard bias-corrected Adam update, applied in place.

    Returns (params, state) for call-site chaining; both are the same
    objects that were passed in.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape}"
                             f" for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# checkpoints: magic line, JSON header, little-endian float64 blob


def save_checkpoint(path, nets: dict, meta: dict | None = None) -> None:
    header = {
        "format": "boundary-rl-checkpoint",
        "version": 1,
        "meta": meta or {},
        "nets": {},
    }
    blobs = []
    for name in sorted(nets):
        net = nets[name]
        order = sorted(net.params)
        header["nets"][name] = {
            "arch": list(net.arch),
            "input_shape": list(net.input_shape),
            "params": [
                {"name": k, "shape": list(net.params[k].shape)} for k in order
            ],
        }
        blobs.extend(net.params[k].astype("<f8").tobytes() for k in order)
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Returns (nets: dict[str, Network], meta: dict)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a boundary-rl checkpoint")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len))
        nets = {}
        for name in sorted(header["nets"]):
            net_info = header["nets"][name]
            arch = tuple(dict(layer) for layer in net_info["arch"])
            input_shape = tuple(net_info["input_shape"])
            params = {}
            for entry in net_info["params"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                raw = f.read(8 * count)
                if len(raw) != 8 * count:
                    raise CheckpointError(f"truncated checkpoint {path}")
                params[entry["name"]] = (
                    np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
                )
            expected = _infer_shapes(arch, input_shape)
            nets[name] = Network(arch=arch, input_shape=input_shape,
                                 params=params, layer_shapes=expected)
    return nets, header["meta"]
