"""
Layer kinds and their forward/backward kernels.

Every layer operates on a batch: activations carry a leading batch axis, and
`LayerSpec.in_shape` / `out_shape` record the per-sample shape inferred by the
owning graph. Backward rules are written out by hand for each kind.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- conv2d(name, c_in, c_out, k, stride, padding, rng, inputs): Conv2d layer with He-normal weights
- linear(name, c_in, c_out, rng, inputs): Linear layer with He-normal weights
- batchnorm(name, c, inputs): BatchNorm layer with unit scale and zero shift
- relu(name, inputs) / avgpool(name, kernel, inputs) / softmax(name, inputs): weightless layers
- residual_add(name, inputs): n-ary elementwise sum
- gate(name, inputs, logit): importance gate sigmoid(logit) * x
- infer_shape(layer, in_shapes): Output shape for the given input shapes
- validate_weights(layer): Check weight shapes against kind parameters
- layer_forward(layer, inputs, train): Forward kernel returning (output, cache)
- layer_backward(layer, cache, grad_out): Backward kernel returning (input grads, param grads)
- im2col(x, k, stride, padding, pad_value): Patch matrix of a batched image tensor
- col2im(cols, x_shape, k, stride, padding): Adjoint of im2col
- sigmoid(z): Numerically stable logistic function

DATA CLASSES:
-------------
- LayerSpec: One node of a model graph
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from tsdplab.utils.logging import TSDPShapeError, TSDPValidationError

CONV2D = "Conv2d"
LINEAR = "Linear"
BATCHNORM = "BatchNorm"
RELU = "ReLU"
AVGPOOL = "AvgPool"
RESIDUAL_ADD = "ResidualAdd"
SOFTMAX = "Softmax"
GATE = "Gate"

LAYER_KINDS = (CONV2D, LINEAR, BATCHNORM, RELU, AVGPOOL, RESIDUAL_ADD, SOFTMAX, GATE)
WEIGHTED_KINDS = (CONV2D, LINEAR)
NONLINEAR_KINDS = (RELU, AVGPOOL, RESIDUAL_ADD, SOFTMAX, GATE)

TRAINABLE = {
    CONV2D: ("weight", "bias"),
    LINEAR: ("weight", "bias"),
    BATCHNORM: ("gamma", "beta"),
    GATE: ("logit",),
}
BUFFERS = {BATCHNORM: ("running_mean", "running_var")}

Shape = Tuple[int, ...]


@dataclass
class LayerSpec:
    """One node of a model graph."""

    name: str
    kind: str
    params: Dict[str, Any] = field(default_factory=dict)
    weights: Dict[str, np.ndarray] = field(default_factory=dict)
    inputs: List[str] = field(default_factory=list)
    frozen: bool = False
    in_shape: Optional[Shape] = None
    out_shape: Optional[Shape] = None

    @property
    def is_weighted(self) -> bool:
        return self.kind in WEIGHTED_KINDS

    @property
    def is_nonlinear(self) -> bool:
        return self.kind in NONLINEAR_KINDS

    @property
    def trainable_names(self) -> Tuple[str, ...]:
        return TRAINABLE.get(self.kind, ())


def sigmoid(z: Any) -> Any:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _he(rng: Optional[np.random.Generator], shape: Shape, fan_in: int) -> np.ndarray:
    if rng is None:
        rng = np.random.default_rng(0)
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def conv2d(
    name: str,
    c_in: int,
    c_out: int,
    k: int,
    stride: int = 1,
    padding: int = 0,
    rng: Optional[np.random.Generator] = None,
    inputs: Optional[List[str]] = None,
) -> LayerSpec:
    return LayerSpec(
        name=name,
        kind=CONV2D,
        params={"c_in": c_in, "c_out": c_out, "k": k, "stride": stride,
                "padding": padding},
        weights={
            "weight": _he(rng, (c_out, c_in, k, k), c_in * k * k),
            "bias": np.zeros(c_out),
        },
        inputs=list(inputs or []),
    )


def linear(
    name: str,
    c_in: int,
    c_out: int,
    rng: Optional[np.random.Generator] = None,
    inputs: Optional[List[str]] = None,
) -> LayerSpec:
    return LayerSpec(
        name=name,
        kind=LINEAR,
        params={"c_in": c_in, "c_out": c_out},
        weights={"weight": _he(rng, (c_out, c_in), c_in), "bias": np.zeros(c_out)},
        inputs=list(inputs or []),
    )


def batchnorm(
    name: str, c: int, inputs: Optional[List[str]] = None, eps: float = 1e-5,
    momentum: float = 0.1,
) -> LayerSpec:
    return LayerSpec(
        name=name,
        kind=BATCHNORM,
        params={"c_in": c, "eps": eps, "momentum": momentum},
        weights={
            "gamma": np.ones(c),
            "beta": np.zeros(c),
            "running_mean": np.zeros(c),
            "running_var": np.ones(c),
        },
        inputs=list(inputs or []),
    )


def relu(name: str, inputs: Optional[List[str]] = None) -> LayerSpec:
    return LayerSpec(name=name, kind=RELU, inputs=list(inputs or []))


def avgpool(name: str, kernel: int = 0, inputs: Optional[List[str]] = None) -> LayerSpec:
    """Average pooling with stride = kernel; kernel 0 pools globally."""
    return LayerSpec(name=name, kind=AVGPOOL, params={"kernel": kernel},
                     inputs=list(inputs or []))


def residual_add(name: str, inputs: List[str]) -> LayerSpec:
    return LayerSpec(name=name, kind=RESIDUAL_ADD, inputs=list(inputs))


def softmax(name: str, inputs: Optional[List[str]] = None) -> LayerSpec:
    return LayerSpec(name=name, kind=SOFTMAX, inputs=list(inputs or []))


def gate(name: str, inputs: Optional[List[str]] = None, logit: float = 0.0) -> LayerSpec:
    return LayerSpec(name=name, kind=GATE, weights={"logit": np.array([logit])},
                     inputs=list(inputs or []))


def validate_weights(layer: LayerSpec) -> None:
    """Check weight shapes against the layer's kind parameters."""
    p, w = layer.params, layer.weights
    expected: Dict[str, Shape] = {}
    if layer.kind == CONV2D:
        expected = {"weight": (p["c_out"], p["c_in"], p["k"], p["k"]),
                    "bias": (p["c_out"],)}
    elif layer.kind == LINEAR:
        expected = {"weight": (p["c_out"], p["c_in"]), "bias": (p["c_out"],)}
    elif layer.kind == BATCHNORM:
        c = p["c_in"]
        expected = {n: (c,) for n in ("gamma", "beta", "running_mean", "running_var")}
    elif layer.kind == GATE:
        expected = {"logit": (1,)}
    elif layer.kind not in LAYER_KINDS:
        raise TSDPValidationError(f"Unknown layer kind '{layer.kind}' on {layer.name}")
    elif w:
        raise TSDPValidationError(f"{layer.kind} layer {layer.name} carries no weights")

    for pname, shape in expected.items():
        if pname not in w:
            raise TSDPValidationError(f"Layer {layer.name} is missing weight '{pname}'")
        if tuple(w[pname].shape) != shape:
            raise TSDPValidationError(
                f"Layer {layer.name} weight '{pname}' has shape "
                f"{tuple(w[pname].shape)}, expected {shape}"
            )


def _edge_error(layer: LayerSpec, src: str, msg: str) -> TSDPShapeError:
    return TSDPShapeError(f"Shape mismatch on edge {src} -> {layer.name}: {msg}",
                          edge=(src, layer.name))


def infer_shape(layer: LayerSpec, in_shapes: Sequence[Shape]) -> Shape:
    """Per-sample output shape of `layer` for the given per-sample input shapes."""
    src = layer.inputs[0] if layer.inputs else "input"
    if layer.kind != RESIDUAL_ADD and len(in_shapes) != 1:
        raise TSDPValidationError(f"{layer.kind} layer {layer.name} takes one input")
    shape = tuple(in_shapes[0])
    p = layer.params

    if layer.kind == CONV2D:
        if len(shape) != 3 or shape[0] != p["c_in"]:
            raise _edge_error(layer, src, f"expected ({p['c_in']}, h, w), got {shape}")
        k, s, pad = p["k"], p.get("stride", 1), p.get("padding", 0)
        ho = (shape[1] + 2 * pad - k) // s + 1
        wo = (shape[2] + 2 * pad - k) // s + 1
        if ho < 1 or wo < 1:
            raise _edge_error(layer, src, f"kernel {k} larger than input {shape}")
        return (p["c_out"], ho, wo)
    if layer.kind == LINEAR:
        if int(np.prod(shape)) != p["c_in"]:
            raise _edge_error(layer, src, f"expected {p['c_in']} features, got {shape}")
        return (p["c_out"],)
    if layer.kind == BATCHNORM:
        if shape[0] != p["c_in"]:
            raise _edge_error(layer, src, f"expected {p['c_in']} channels, got {shape}")
        return shape
    if layer.kind == AVGPOOL:
        if len(shape) != 3:
            raise _edge_error(layer, src, f"pooling needs (c, h, w), got {shape}")
        k = p.get("kernel", 0)
        if k == 0:
            return (shape[0], 1, 1)
        if shape[1] % k or shape[2] % k:
            raise _edge_error(layer, src, f"pool kernel {k} does not tile {shape}")
        return (shape[0], shape[1] // k, shape[2] // k)
    if layer.kind == RESIDUAL_ADD:
        for other, name in zip(in_shapes[1:], layer.inputs[1:]):
            if tuple(other) != shape:
                raise _edge_error(layer, name, f"{tuple(other)} != {shape}")
        return shape
    if layer.kind == SOFTMAX:
        if len(shape) != 1:
            raise _edge_error(layer, src, f"softmax needs a vector, got {shape}")
        return shape
    return shape


def im2col(
    x: np.ndarray, k: int, stride: int = 1, padding: int = 0, pad_value: Any = 0
) -> np.ndarray:
    """
    Patch matrix of shape (n*h_out*w_out, c*k*k).

    Column order is (channel, row, col), matching `weight.reshape(c_out, -1)`.
    Integer input stays integer.
    """
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                   constant_values=pad_value)
    n, c = x.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def col2im(
    cols: np.ndarray, x_shape: Shape, k: int, stride: int = 1, padding: int = 0
) -> np.ndarray:
    """Scatter-add patch gradients back to image layout (adjoint of im2col)."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    patches = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                patches[:, :, :, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def _bn_axes(x: np.ndarray) -> Tuple[Tuple[int, ...], Shape]:
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    return (0,), (1, -1)


def layer_forward(
    layer: LayerSpec, inputs: List[np.ndarray], train: bool = False
) -> Tuple[np.ndarray, Dict[str, Any]]:
    """
    Run one layer.

    In training mode a non-frozen BatchNorm normalizes with batch statistics
    and updates its running statistics in place.
    """
    x = inputs[0]
    w = layer.weights
    kind = layer.kind

    if kind == CONV2D:
        k, s, pad = layer.params["k"], layer.params.get("stride", 1), \
            layer.params.get("padding", 0)
        cols = im2col(x, k, s, pad)
        wm = w["weight"].reshape(w["weight"].shape[0], -1)
        n = x.shape[0]
        ho = (x.shape[2] + 2 * pad - k) // s + 1
        wo = (x.shape[3] + 2 * pad - k) // s + 1
        y = (cols @ wm.T + w["bias"]).reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), {"cols": cols, "x_shape": x.shape}

    if kind == LINEAR:
        flat = x.reshape(x.shape[0], -1)
        return flat @ w["weight"].T + w["bias"], {"flat": flat, "x_shape": x.shape}

    if kind == BATCHNORM:
        axes, bshape = _bn_axes(x)
        eps = layer.params.get("eps", 1e-5)
        use_batch = train and not layer.frozen
        if use_batch:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            mom = layer.params.get("momentum", 0.1)
            m = x.size // x.shape[1]
            unbiased = var * m / max(m - 1, 1)
            w["running_mean"] *= 1.0 - mom
            w["running_mean"] += mom * mean
            w["running_var"] *= 1.0 - mom
            w["running_var"] += mom * unbiased
        else:
            mean, var = w["running_mean"], w["running_var"]
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        y = xhat * w["gamma"].reshape(bshape) + w["beta"].reshape(bshape)
        return y, {"xhat": xhat, "inv_std": inv_std, "batch": use_batch}

    if kind == RELU:
        mask = x > 0
        return x * mask, {"mask": mask}

    if kind == AVGPOOL:
        kp = layer.params.get("kernel", 0)
        if kp == 0:
            return x.mean(axis=(2, 3), keepdims=True), {"x_shape": x.shape}
        n, c, h, wd = x.shape
        y = x.reshape(n, c, h // kp, kp, wd // kp, kp).mean(axis=(3, 5))
        return y, {"x_shape": x.shape}

    if kind == RESIDUAL_ADD:
        y = inputs[0].copy()
        for other in inputs[1:]:
            y = y + other
        return y, {"n": len(inputs)}

    if kind == SOFTMAX:
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        sm = e / e.sum(axis=1, keepdims=True)
        return sm, {"y": sm}

    if kind == GATE:
        a = float(sigmoid(w["logit"])[0])
        return a * x, {"x": x, "alpha": a}

    raise TSDPValidationError(f"Unknown layer kind '{kind}' on {layer.name}")


def layer_backward(
    layer: LayerSpec, cache: Dict[str, Any], grad_out: np.ndarray
) -> Tuple[List[np.ndarray], Dict[str, np.ndarray]]:
    """Gradients w.r.t. the layer inputs and its trainable parameters."""
    w = layer.weights
    kind = layer.kind
    g = grad_out

    if kind == CONV2D:
        k, s, pad = layer.params["k"], layer.params.get("stride", 1), \
            layer.params.get("padding", 0)
        c_out = w["weight"].shape[0]
        gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dw = (gm.T @ cache["cols"]).reshape(w["weight"].shape)
        db = gm.sum(axis=0)
        dcols = gm @ w["weight"].reshape(c_out, -1)
        dx = col2im(dcols, cache["x_shape"], k, s, pad)
        return [dx], {"weight": dw, "bias": db}

    if kind == LINEAR:
        dw = g.T @ cache["flat"]
        db = g.sum(axis=0)
        dx = (g @ w["weight"]).reshape(cache["x_shape"])
        return [dx], {"weight": dw, "bias": db}

    if kind == BATCHNORM:
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        axes, bshape = _bn_axes(xhat)
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * w["gamma"].reshape(bshape)
        if cache["batch"]:
            m = xhat.size // xhat.shape[1]
            dx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return [dx], {"gamma": dgamma, "beta": dbeta}

    if kind == RELU:
        return [g * cache["mask"]], {}

    if kind == AVGPOOL:
        n, c, h, wd = cache["x_shape"]
        kp = layer.params.get("kernel", 0)
        if kp == 0:
            return [np.broadcast_to(g / (h * wd), (n, c, h, wd)).copy()], {}
        up = np.repeat(np.repeat(g, kp, axis=2), kp, axis=3)
        return [up / (kp * kp)], {}

    if kind == RESIDUAL_ADD:
        return [g] * cache["n"], {}

    if kind == SOFTMAX:
        sm = cache["y"]
        dx = sm * (g - (g * sm).sum(axis=1, keepdims=True))
        return [dx], {}

    if kind == GATE:
        a = cache["alpha"]
        dlogit = np.array([float((g * cache["x"]).sum()) * a * (1.0 - a)])
        return [a * g], {"logit": dlogit}

    raise TSDPValidationError(f"Unknown layer kind '{kind}' on {layer.name}")
