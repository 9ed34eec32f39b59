"""Deep linear networks and the user/item embedding model."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, InvalidInputError


@dataclass
class DeepLinearNet:
    """Layers ``W_1 ... W_N`` with ``W_i`` of shape ``(d_i, d_{i-1})``.

    The end product is ``W_N @ ... @ W_1``. ``bias`` (optional) is added to
    the end product and is never penalised; it is either a full
    ``(d_N, d_0)`` matrix or a length ``d_N`` vector broadcast over columns.
    """

    layers: list
    seed: int | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("a network needs at least one layer", "dims")
        self.layers = [np.asarray(w, dtype=float) for w in self.layers]
        for i in range(1, len(self.layers)):
            if self.layers[i].shape[1] != self.layers[i - 1].shape[0]:
                raise InvalidInputError(
                    f"layer {i + 1} has {self.layers[i].shape[1]} columns but layer {i} "
                    f"has {self.layers[i - 1].shape[0]} rows"
                )
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=float)
            if self.bias.shape not in (self.shape, (self.shape[0],)):
                raise InvalidInputError(f"bias shape {self.bias.shape} does not fit {self.shape}")

    @property
    def depth(self):
        return len(self.layers)

    @property
    def dims(self):
        return (self.layers[0].shape[1],) + tuple(w.shape[0] for w in self.layers)

    @property
    def shape(self):
        return (self.layers[-1].shape[0], self.layers[0].shape[1])

    @property
    def params(self):
        """Parameter arrays in optimizer order (layers, then bias)."""
        return self.layers + ([self.bias] if self.bias is not None else [])

    def copy(self):
        return DeepLinearNet(
            [w.copy() for w in self.layers],
            seed=self.seed,
            bias=None if self.bias is None else self.bias.copy(),
        )

    def predict_matrix(self):
        w = end_product(self)
        if self.bias is None:
            return w
        if self.bias.ndim == 1:
            return w + self.bias[:, None]
        return w + self.bias


def init_gaussian(dims, std=1e-3, seed=0, bias=None) -> DeepLinearNet:
    """I.i.d. N(0, std^2) layers for the dimension chain ``d_0, ..., d_N``.

    ``bias`` may be None, ``"matrix"`` or ``"vector"``; biases start at zero.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ConfigError(f"dims needs at least two entries, got {dims}", "dims")
    if any(d < 1 for d in dims):
        raise ConfigError(f"dims must be positive, got {dims}", "dims")
    if not std > 0:
        raise ConfigError(f"init std must be positive, got {std}", "init_std")
    rng = np.random.default_rng(seed)
    layers = [rng.normal(0.0, std, size=(dims[i + 1], dims[i])) for i in range(len(dims) - 1)]
    if bias is None:
        b = None
    elif bias == "matrix":
        b = np.zeros((dims[-1], dims[0]))
    elif bias == "vector":
        b = np.zeros(dims[-1])
    else:
        raise ConfigError(f"unknown bias kind {bias!r}", "bias")
    return DeepLinearNet(layers, seed=seed, bias=b)


def _prefix_products(layers):
    """``prefix[j] = W_j ... W_1`` (``prefix[0]`` is None for identity)."""
    out = [None]
    acc = None
    for w in layers:
        acc = w if acc is None else w @ acc
        out.append(acc)
    return out


def end_product(net: DeepLinearNet):
    return _prefix_products(net.layers)[-1]


def layer_gradients(net: DeepLinearNet, grad_w):
    """dL/dW_j = (W_N...W_{j+1})^T  dL/dW  (W_{j-1}...W_1)^T for every layer."""
    grad_w = np.asarray(grad_w, dtype=float)
    if grad_w.shape != net.shape:
        raise InvalidInputError(f"gradient shape {grad_w.shape} != end-product shape {net.shape}")
    layers = net.layers
    prefix = _prefix_products(layers)
    grads = [None] * len(layers)
    # left accumulates (W_N ... W_{j+1})^T grad_w, walking j downward
    left = grad_w
    for j in range(len(layers) - 1, -1, -1):
        right = prefix[j]
        grads[j] = left if right is None else left @ right.T
        left = layers[j].T @ left
    return grads


@dataclass
class EmbeddingModel:
    """Biased dot-product model for explicit ratings."""

    user_embed: np.ndarray
    item_embed: np.ndarray
    user_bias: np.ndarray = field(default=None)
    item_bias: np.ndarray = field(default=None)
    global_bias: float = 0.0

    def __post_init__(self):
        self.user_embed = np.asarray(self.user_embed, dtype=float)
        self.item_embed = np.asarray(self.item_embed, dtype=float)
        if self.user_embed.shape[1] != self.item_embed.shape[1]:
            raise InvalidInputError("user and item embeddings must share a dimension")
        if self.user_bias is None:
            self.user_bias = np.zeros(self.user_embed.shape[0])
        if self.item_bias is None:
            self.item_bias = np.zeros(self.item_embed.shape[0])
        self.user_bias = np.asarray(self.user_bias, dtype=float)
        self.item_bias = np.asarray(self.item_bias, dtype=float)

    @property
    def n_users(self):
        return self.user_embed.shape[0]

    @property
    def n_items(self):
        return self.item_embed.shape[0]

    @classmethod
    def init(cls, n_users, n_items, k, std=0.1, seed=0, global_bias=0.0):
        rng = np.random.default_rng(seed)
        return cls(
            rng.normal(0.0, std, (n_users, k)),
            rng.normal(0.0, std, (n_items, k)),
            global_bias=global_bias,
        )

    @property
    def params(self):
        # global bias kept as a 0-d array so optimizers can update it in place
        if not isinstance(self.global_bias, np.ndarray):
            self.global_bias = np.array(float(self.global_bias))
        return [self.user_embed, self.item_embed, self.user_bias, self.item_bias, self.global_bias]


def _check_pairs(model, users, items):
    users = np.asarray(users, dtype=int)
    items = np.asarray(items, dtype=int)
    if users.shape != items.shape:
        raise InvalidInputError("users and items must have the same length")
    if users.size and (users.min() < 0 or users.max() >= model.n_users):
        raise InvalidInputError("user index out of range")
    if items.size and (items.min() < 0 or items.max() >= model.n_items):
        raise InvalidInputError("item index out of range")
    return users, items


def predict_ratings(model: EmbeddingModel, users, items):
    users, items = _check_pairs(model, users, items)
    dots = np.einsum("ij,ij->i", model.user_embed[users], model.item_embed[items])
    return float(model.global_bias) + model.user_bias[users] + model.item_bias[items] + dots


def embedding_loss_and_grads(model, users, items, ratings, penalty=None, lam_user=0.0, lam_item=0.0):
    """Sum of squared errors plus optional spectral penalties on the embeddings.

    Returns ``(loss, grads)`` with ``grads`` aligned with ``model.params``.
    """
    from .penalties import penalty_gradient

    users, items = _check_pairs(model, users, items)
    ratings = np.asarray(ratings, dtype=float)
    resid = predict_ratings(model, users, items) - ratings
    loss = float(resid @ resid)
    g = 2.0 * resid
    g_user = np.zeros_like(model.user_embed)
    g_item = np.zeros_like(model.item_embed)
    np.add.at(g_user, users, g[:, None] * model.item_embed[items])
    np.add.at(g_item, items, g[:, None] * model.user_embed[users])
    g_ub = np.bincount(users, weights=g, minlength=model.n_users)
    g_ib = np.bincount(items, weights=g, minlength=model.n_items)
    g_glob = np.array(g.sum())
    if penalty is not None and penalty.kind != "none":
        if lam_user > 0:
            ev = penalty_gradient(penalty, model.user_embed)
            loss += lam_user * ev.value
            g_user += lam_user * ev.gradient
        if lam_item > 0:
            ev = penalty_gradient(penalty, model.item_embed)
            loss += lam_item * ev.value
            g_item += lam_item * ev.gradient
    return loss, [g_user, g_item, g_ub, g_ib, g_glob]


_MAGIC = b"DLNNCKPT"


def save_checkpoint(net: DeepLinearNet, path):
    """Write ``net`` as: magic, u32 header length, JSON header, float64 data.

    The header records dims, depth, seed and bias kind; layer matrices (then
    the bias, if any) follow as little-endian row-major float64.
    """
    bias_kind = None if net.bias is None else ("vector" if net.bias.ndim == 1 else "matrix")
    header = json.dumps(
        {"dims": list(net.dims), "depth": net.depth, "seed": net.seed, "bias": bias_kind}
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in net.params:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C"))


def load_checkpoint(path) -> DeepLinearNet:
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise InvalidInputError(f"{path} is not a network checkpoint")
    off = len(_MAGIC)
    (hlen,) = struct.unpack("<I", raw[off : off + 4])
    off += 4
    header = json.loads(raw[off : off + hlen])
    off += hlen
    dims = header["dims"]
    shapes = [(dims[i + 1], dims[i]) for i in range(header["depth"])]
    if header["bias"] == "matrix":
        shapes.append((dims[-1], dims[0]))
    elif header["bias"] == "vector":
        shapes.append((dims[-1],))
    arrays = []
    for shp in shapes:
        count = int(np.prod(shp))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shp).copy())
        off += 8 * count
    if off != len(raw):
        raise InvalidInputError(f"{path}: {len(raw) - off} trailing bytes")
    bias = arrays[header["depth"]] if header["bias"] else None
    return DeepLinearNet(arrays[: header["depth"]], seed=header["seed"], bias=bias)
