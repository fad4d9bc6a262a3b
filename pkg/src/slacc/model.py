"""A small conv net cut into a client part and a server part, in plain numpy.

Client: (3x3 conv, stride 1, same padding -> ReLU) x 3.
Server: 2x2 average pool -> flatten -> dense -> ReLU -> dense -> softmax CE.

Everything runs in float64. Parameters live in plain dicts of arrays so that
averaging, SGD and checkpointing are one-liners.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Direction, SmashedData, atomic_write, read_tensor, write_tensor

Params = dict[str, np.ndarray]


# -- layer primitives -------------------------------------------------------------

def conv3x3_forward(x, w, b):
    """Returns output and the padded input needed for backprop."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # [B, Ci, H, W, 3, 3]
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # [B, H, W, Co]
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out), xp


def conv3x3_backward(dout, xp, w):
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))
    dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))  # [Co, Ci, 3, 3]
    db = dout.sum(axis=(0, 2, 3))
    dpad = np.pad(dout, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dcols = sliding_window_view(dpad, (3, 3), axis=(2, 3))  # [B, Co, H, W, 3, 3]
    dx = np.tensordot(dcols, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))  # [B, H, W, Ci]
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), dw, db


def avgpool2_forward(x):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(dout):
    return np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) / 4.0


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


# -- models -----------------------------------------------------------------------

class ClientModel:
    def __init__(self, params: Params):
        self.params = params

    @classmethod
    def init(cls, seed: int = 0, in_channels: int = 1, widths=(8, 8, 8)) -> "ClientModel":
        rng = np.random.default_rng([seed, 1])
        params = {}
        c_in = in_channels
        for i, c_out in enumerate(widths, start=1):
            params[f"conv{i}.w"] = he_uniform(rng, (c_out, c_in, 3, 3), c_in * 9)
            params[f"conv{i}.b"] = np.zeros(c_out)
            c_in = c_out
        return cls(params)

    @property
    def num_layers(self) -> int:
        return len(self.params) // 2

    @property
    def out_channels(self) -> int:
        return self.params[f"conv{self.num_layers}.w"].shape[0]

    def copy(self) -> "ClientModel":
        return ClientModel({k: v.copy() for k, v in self.params.items()})


class ServerModel:
    def __init__(self, params: Params):
        self.params = params

    @classmethod
    def init(cls, seed: int = 0, in_features: int = 1568, hidden: int = 128, classes: int = 10) -> "ServerModel":
        rng = np.random.default_rng([seed, 2])
        return cls({
            "fc1.w": he_uniform(rng, (in_features, hidden), in_features),
            "fc1.b": np.zeros(hidden),
            "fc2.w": he_uniform(rng, (hidden, classes), hidden),
            "fc2.b": np.zeros(classes),
        })

    @property
    def num_classes(self) -> int:
        return self.params["fc2.b"].shape[0]

    def copy(self) -> "ServerModel":
        return ServerModel({k: v.copy() for k, v in self.params.items()})


def _client_layers(params: Params, x):
    caches = []
    h = np.asarray(x, dtype=np.float64)
    for i in range(1, len(params) // 2 + 1):
        w = params[f"conv{i}.w"]
        if h.shape[1] != w.shape[1]:
            raise ValueError(f"conv{i} expects {w.shape[1]} input channels, got {h.shape[1]}")
        z, xp = conv3x3_forward(h, w, params[f"conv{i}.b"])
        caches.append((xp, z))
        h = np.maximum(z, 0.0)
    return h, caches


def _client_grads(params: Params, caches, dh) -> Params:
    grads = {}
    for i in range(len(caches), 0, -1):
        xp, z = caches[i - 1]
        dz = dh * (z > 0)
        dh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv3x3_backward(dz, xp, params[f"conv{i}.w"])
    return grads


def _server_pass(params: Params, a, labels):
    if a.shape[2] % 2 or a.shape[3] % 2:
        raise ValueError("spatial dims must be even for 2x2 pooling")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= params["fc2.b"].shape[0]:
        raise ValueError("label out of range")
    pooled = avgpool2_forward(a)
    flat = pooled.reshape(a.shape[0], -1)
    z1 = flat @ params["fc1.w"] + params["fc1.b"]
    h1 = np.maximum(z1, 0.0)
    logits = h1 @ params["fc2.w"] + params["fc2.b"]
    loss, dlogits = softmax_cross_entropy(logits, labels)
    grads = {
        "fc2.w": h1.T @ dlogits,
        "fc2.b": dlogits.sum(axis=0),
    }
    dz1 = (dlogits @ params["fc2.w"].T) * (z1 > 0)
    grads["fc1.w"] = flat.T @ dz1
    grads["fc1.b"] = dz1.sum(axis=0)
    dflat = dz1 @ params["fc1.w"].T
    da = avgpool2_backward(dflat.reshape(pooled.shape))
    return loss, da, grads


def client_forward(m: ClientModel, batch, round: int = 0) -> tuple[SmashedData, list]:
    """Activations at the cut layer, plus the cache :func:`client_backward` reuses."""
    h, caches = _client_layers(m.params, batch)
    return SmashedData(h, round, Direction.ACTIVATIONS), caches


def server_forward_backward(m: ServerModel, s: SmashedData, labels):
    if s.direction != Direction.ACTIVATIONS:
        raise ValueError("server expects activations")
    loss, da, grads = _server_pass(m.params, s.tensor, labels)
    return loss, SmashedData(da, s.round, Direction.GRADIENTS), grads


def client_backward(m: ClientModel, batch, grad_s: SmashedData, caches=None) -> Params:
    if grad_s.direction != Direction.GRADIENTS:
        raise ValueError("client backward expects gradients")
    if caches is None:
        _, caches = _client_layers(m.params, batch)
    return _client_grads(m.params, caches, grad_s.tensor)


def sgd_step(params: Params, grads: Params, lr: float) -> Params:
    return {k: p - lr * grads[k] for k, p in params.items()}


def average_params(all_params: list[Params]) -> Params:
    n = len(all_params)
    return {k: sum(p[k] for p in all_params) / n for k in all_params[0]}


def predict(client: ClientModel, server: ServerModel, x) -> np.ndarray:
    h, _ = _client_layers(client.params, x)
    flat = avgpool2_forward(h).reshape(h.shape[0], -1)
    h1 = np.maximum(flat @ server.params["fc1.w"] + server.params["fc1.b"], 0.0)
    return h1 @ server.params["fc2.w"] + server.params["fc2.b"]


def monolithic_loss_and_grads(client: ClientModel, server: ServerModel, x, labels):
    """Whole-network loss and gradients without any cut-layer boundary."""
    h, caches = _client_layers(client.params, x)
    loss, dh, sgrads = _server_pass(server.params, h, labels)
    return loss, _client_grads(client.params, caches, dh), sgrads


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(directory, client: ClientModel, server: ServerModel, seed: int, round: int) -> None:
    directory = Path(directory)
    manifest = {"seed": seed, "round": round, "tensors": []}
    for side, params in (("client", client.params), ("server", server.params)):
        for name, arr in params.items():
            fname = f"{side}.{name}.slt"
            write_tensor(directory / fname, arr)
            manifest["tensors"].append({"name": f"{side}.{name}", "shape": list(arr.shape), "file": fname})
    atomic_write(directory / "manifest.json", json.dumps(manifest, indent=2))


def load_checkpoint(directory) -> tuple[ClientModel, ServerModel, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    client, server = {}, {}
    for entry in manifest["tensors"]:
        side, name = entry["name"].split(".", 1)
        (client if side == "client" else server)[name] = read_tensor(directory / entry["file"])
    return ClientModel(client), ServerModel(server), manifest
