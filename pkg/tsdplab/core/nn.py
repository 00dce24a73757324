"""
Minimal deterministic neural-network engine.

A `ModelGraph` is a DAG of `LayerSpec` nodes kept in topological (list) order.
The graph input is the pseudo-node "input"; the graph output is the last
layer. Inference never mutates a model, so a shared model may be queried from
many threads. Training works on a private deep copy.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- forward(model, x): Output per the model's output mode
- apply_output_mode(model, raw): Map raw graph output to the output mode
- check_input(model, x): Validate input shape, adding a batch axis to single samples
- loss_and_grads(model, x, y, train, input_grad): Mean cross-entropy and gradients
- train_sgd(model, images, labels, cfg, penalty, trainable, progress): SGD training
- grad_wrt_input(model, x, y): Per-sample cross-entropy gradient w.r.t. x
- pgd_attack(model, x, y, eps, steps, step_size): L-inf PGD adversarial examples
- predict_logits(model, x) / predict_proba(model, x) / predict_labels(model, x)
- accuracy(model, images, labels): Fraction of correct argmax predictions
- param_checksum(model, names): SHA-256 over parameter bytes
- build_toy_cnn(in_channels, side, n_classes, widths, seed, ...): Conv blocks + GAP + fc
- build_mlp(sizes, seed): Linear/ReLU stack

PRIVATE FUNCTIONS (Internal Implementation):
-------------------------------------------
- _run(model, x, train): Forward pass keeping activations and caches
- _backward(model, acts, caches, grad_out): Reverse pass over the graph
- _output_grad(model, raw, y): Loss and gradient at the graph output

DATA CLASSES:
-------------
- ModelGraph: Ordered layer graph with output mode
- TrainConfig: SGD hyper-parameters
"""

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from tsdplab.core.layers import (
    LINEAR,
    SOFTMAX,
    LayerSpec,
    Shape,
    avgpool,
    batchnorm,
    conv2d,
    infer_shape,
    layer_backward,
    layer_forward,
    linear,
    relu,
    residual_add,
    validate_weights,
)
from tsdplab.utils.logging import (
    TSDPShapeError,
    TSDPTrainingError,
    TSDPValidationError,
    logger,
)
from tsdplab.utils.rng import make_rng

OUTPUT_MODES = ("Logits", "Probabilities", "LabelOnly")
INPUT = "input"

ParamKey = Tuple[str, str]
Penalty = Callable[["ModelGraph"], Tuple[float, Dict[ParamKey, np.ndarray]]]


@dataclass
class ModelGraph:
    """Ordered layer graph; the last layer is the output."""

    layers: List[LayerSpec]
    input_shape: Shape
    output_mode: str = "Logits"
    name: str = "model"
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.validate()

    def validate(self) -> None:
        """Resolve default edges, check the DAG and infer every shape."""
        if self.output_mode not in OUTPUT_MODES:
            raise TSDPValidationError(f"Unknown output mode '{self.output_mode}'")
        if not self.layers:
            raise TSDPValidationError("Model graph has no layers")

        shapes: Dict[str, Shape] = {INPUT: self.input_shape}
        prev = INPUT
        for layer in self.layers:
            if layer.name in shapes:
                raise TSDPValidationError(f"Duplicate layer name '{layer.name}'")
            if not layer.inputs:
                layer.inputs = [prev]
            for src in layer.inputs:
                if src not in shapes:
                    raise TSDPValidationError(
                        f"Layer {layer.name} reads '{src}' which is not an earlier node"
                    )
            validate_weights(layer)
            layer.in_shape = shapes[layer.inputs[0]]
            layer.out_shape = infer_shape(layer, [shapes[s] for s in layer.inputs])
            shapes[layer.name] = layer.out_shape
            prev = layer.name

        consumed = {src for layer in self.layers for src in layer.inputs}
        dangling = [layer.name for layer in self.layers[:-1]
                    if layer.name not in consumed]
        if dangling:
            raise TSDPValidationError(
                f"Graph must have a single output; dangling nodes: {dangling}"
            )

    @property
    def output_shape(self) -> Shape:
        assert self.layers[-1].out_shape is not None
        return self.layers[-1].out_shape

    @property
    def n_outputs(self) -> int:
        return int(np.prod(self.output_shape))

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def layer_names(self) -> List[str]:
        return [layer.name for layer in self.layers]

    def weighted_layers(self) -> List[LayerSpec]:
        return [layer for layer in self.layers if layer.is_weighted]

    def consumers(self, name: str) -> List[LayerSpec]:
        return [layer for layer in self.layers if name in layer.inputs]

    def parameters(self, trainable_only: bool = True) -> Iterable[Tuple[ParamKey, np.ndarray]]:
        for layer in self.layers:
            names = layer.trainable_names if trainable_only else tuple(layer.weights)
            for pname in names:
                yield (layer.name, pname), layer.weights[pname]

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def with_output_mode(self, mode: str) -> "ModelGraph":
        """Shallow view sharing weights but answering in another output mode."""
        view = copy.copy(self)
        if mode not in OUTPUT_MODES:
            raise TSDPValidationError(f"Unknown output mode '{mode}'")
        view.output_mode = mode
        return view


@dataclass
class TrainConfig:
    """SGD hyper-parameters."""

    batch_size: int = 32
    epochs: int = 60
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay: Tuple[float, int] = (0.5, 20)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise TSDPValidationError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise TSDPValidationError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise TSDPValidationError("batch_size must be >= 1 and epochs >= 0")
        self.lr_decay = (float(self.lr_decay[0]), int(self.lr_decay[1]))

    def lr_at(self, epoch: int) -> float:
        factor, every = self.lr_decay
        if every <= 0:
            return self.learning_rate
        return self.learning_rate * factor ** (epoch // every)


def check_input(model: ModelGraph, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.input_shape:
        return x[None], True
    if x.shape[1:] != model.input_shape:
        raise TSDPShapeError(
            f"Shape mismatch on edge input -> {model.layers[0].name}: "
            f"expected (n, {', '.join(map(str, model.input_shape))}), got {x.shape}",
            edge=(INPUT, model.layers[0].name),
        )
    return x, False


def _run(
    model: ModelGraph, x: np.ndarray, train: bool = False
) -> Tuple[Dict[str, np.ndarray], Dict[str, Dict[str, Any]]]:
    acts: Dict[str, np.ndarray] = {INPUT: x}
    caches: Dict[str, Dict[str, Any]] = {}
    for layer in model.layers:
        out, cache = layer_forward(layer, [acts[s] for s in layer.inputs], train)
        acts[layer.name] = out
        caches[layer.name] = cache
    return acts, caches


def _backward(
    model: ModelGraph,
    caches: Dict[str, Dict[str, Any]],
    grad_out: np.ndarray,
) -> Tuple[Dict[ParamKey, np.ndarray], np.ndarray]:
    grads: Dict[str, np.ndarray] = {model.layers[-1].name: grad_out}
    param_grads: Dict[ParamKey, np.ndarray] = {}
    for layer in reversed(model.layers):
        g = grads.pop(layer.name, None)
        if g is None:
            continue
        in_grads, pg = layer_backward(layer, caches[layer.name], g)
        for pname, value in pg.items():
            param_grads[(layer.name, pname)] = value
        for src, gi in zip(layer.inputs, in_grads):
            grads[src] = grads[src] + gi if src in grads else gi
    return param_grads, grads.get(INPUT, np.zeros(0))


def _output_grad(
    model: ModelGraph, raw: np.ndarray, y: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy and its gradient at the raw graph output."""
    n = raw.shape[0]
    idx = np.arange(n)
    if model.layers[-1].kind == SOFTMAX:
        p = np.clip(raw[idx, y], 1e-300, None)
        g = np.zeros_like(raw)
        g[idx, y] = -1.0 / p
        return -np.log(p), g
    z = raw - raw.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    losses = logsum - z[idx, y]
    probs = np.exp(z - logsum[:, None])
    probs[idx, y] -= 1.0
    return losses, probs


def _check_labels(model: ModelGraph, y: Any, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise TSDPValidationError(f"Got {y.shape[0]} labels for {n} samples")
    if y.size and (y.min() < 0 or y.max() >= model.n_outputs):
        raise TSDPValidationError(
            f"Labels must lie in [0, {model.n_outputs}); got max {int(y.max())}"
        )
    return y


def forward(model: ModelGraph, x: np.ndarray) -> np.ndarray:
    """Evaluate the model; the result follows `model.output_mode`."""
    xb, single = check_input(model, x)
    acts, _ = _run(model, xb, train=False)
    out = apply_output_mode(model, acts[model.layers[-1].name])
    return out[0] if single else out


def apply_output_mode(model: ModelGraph, raw: np.ndarray) -> np.ndarray:
    """Map raw batched graph output to logits, probabilities or labels."""
    if model.output_mode == "Logits":
        return raw
    if model.output_mode == "Probabilities":
        return raw if model.layers[-1].kind == SOFTMAX else _softmax(raw)
    return raw.reshape(raw.shape[0], -1).argmax(axis=1)


def _softmax(raw: np.ndarray) -> np.ndarray:
    z = raw - raw.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(
    model: ModelGraph,
    x: np.ndarray,
    y: Any,
    train: bool = False,
    input_grad: bool = False,
) -> Tuple[float, Dict[ParamKey, np.ndarray], Optional[np.ndarray]]:
    """
    Mean cross-entropy over the batch with parameter gradients.

    With `train=True` non-frozen BatchNorm layers use batch statistics (and
    update their running statistics).
    """
    xb, _ = check_input(model, x)
    y = _check_labels(model, y, xb.shape[0])
    acts, caches = _run(model, xb, train=train)
    losses, g = _output_grad(model, acts[model.layers[-1].name], y)
    n = xb.shape[0]
    param_grads, gx = _backward(model, caches, g / n)
    return float(losses.mean()), param_grads, (gx * n if input_grad else None)


def grad_wrt_input(model: ModelGraph, x: np.ndarray, y: Any) -> np.ndarray:
    """Gradient of each sample's own cross-entropy loss w.r.t. that sample."""
    xb, single = check_input(model, x)
    y = _check_labels(model, y, xb.shape[0])
    acts, caches = _run(model, xb, train=False)
    _, g = _output_grad(model, acts[model.layers[-1].name], y)
    _, gx = _backward(model, caches, g)
    return gx[0] if single else gx


def per_sample_losses(model: ModelGraph, x: np.ndarray, y: Any) -> np.ndarray:
    xb, _ = check_input(model, x)
    y = _check_labels(model, y, xb.shape[0])
    acts, _ = _run(model, xb, train=False)
    losses, _ = _output_grad(model, acts[model.layers[-1].name], y)
    return losses


def train_sgd(
    model: ModelGraph,
    images: np.ndarray,
    labels: Any,
    cfg: TrainConfig,
    penalty: Optional[Penalty] = None,
    trainable: Optional[Callable[[str, str], bool]] = None,
    progress: bool = False,
) -> ModelGraph:
    """
    Train a deep copy of `model` with momentum SGD and return it.

    Frozen layers and parameters rejected by `trainable(layer, param)` are not
    updated. Weight decay applies to conv/linear weights. `penalty` adds a
    differentiable regularizer evaluated once per step.
    """
    trained = model.copy()
    if cfg.epochs == 0:
        return trained

    images = np.asarray(images, dtype=np.float64)
    labels = _check_labels(trained, labels, images.shape[0])
    n = images.shape[0]
    if n == 0:
        return trained

    rng = make_rng(cfg.seed, "train_sgd")
    velocity: Dict[ParamKey, np.ndarray] = {}
    frozen = {layer.name for layer in trained.layers if layer.frozen}

    epochs = range(cfg.epochs)
    bar = tqdm(epochs, desc=f"train {trained.name}", leave=False) if progress else epochs

    for epoch in bar:
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grads, _ = loss_and_grads(trained, images[idx], labels[idx], train=True)
            if penalty is not None:
                pval, pgrads = penalty(trained)
                loss += pval
                for key, value in pgrads.items():
                    grads[key] = grads[key] + value if key in grads else value
            if not np.isfinite(loss):
                raise TSDPTrainingError(
                    f"Non-finite loss {loss} at epoch {epoch}, batch {b}",
                    epoch=epoch, batch=b,
                )
            epoch_loss += loss * len(idx)

            for (lname, pname), grad in grads.items():
                if lname in frozen or (trainable and not trainable(lname, pname)):
                    continue
                param = trained.layer(lname).weights[pname]
                if pname == "weight" and cfg.weight_decay:
                    grad = grad + cfg.weight_decay * param
                v = velocity.get((lname, pname))
                v = grad if v is None else cfg.momentum * v + grad
                velocity[(lname, pname)] = v
                param -= lr * v

        logger.debug(f"{trained.name} epoch {epoch}: loss {epoch_loss / n:.4f} lr {lr:g}")
        if progress:
            bar.set_postfix(loss=f"{epoch_loss / n:.4f}")  # type: ignore[union-attr]

    return trained


def pgd_attack(
    model: ModelGraph,
    x: np.ndarray,
    y: Any,
    eps: float = 0.03,
    steps: int = 7,
    step_size: Optional[float] = None,
    clip: Tuple[float, float] = (0.0, 1.0),
) -> np.ndarray:
    """
    L-inf projected gradient ascent on the cross-entropy loss.

    No random start; default step size is eps/4. Inputs are clipped first,
    so the result stays inside `clip` and within the eps ball around the
    clipped `x`.
    """
    if eps < 0:
        raise TSDPValidationError("eps must be >= 0")
    x = np.clip(np.asarray(x, dtype=np.float64), clip[0], clip[1])
    if steps == 0 or eps == 0:
        return x.copy()
    step = eps / 4.0 if step_size is None else step_size
    lo = np.maximum(x - eps, clip[0])
    hi = np.minimum(x + eps, clip[1])
    adv = x.copy()
    for _ in range(steps):
        g = grad_wrt_input(model, adv, y)
        adv = np.clip(adv + step * np.sign(g), lo, hi)
    return adv


def _batched(model: ModelGraph, x: np.ndarray, fn: Callable[[np.ndarray], np.ndarray],
             batch: int = 256) -> np.ndarray:
    xb, _ = check_input(model, x)
    if xb.shape[0] == 0:
        return fn(xb)
    return np.concatenate([fn(xb[i:i + batch]) for i in range(0, xb.shape[0], batch)])


def predict_logits(model: ModelGraph, x: np.ndarray) -> np.ndarray:
    return _batched(model, x, lambda b: _run(model, b)[0][model.layers[-1].name])


def predict_proba(model: ModelGraph, x: np.ndarray) -> np.ndarray:
    if model.layers[-1].kind == SOFTMAX:
        return predict_logits(model, x)
    return _batched(model, x, lambda b: _softmax(_run(model, b)[0][model.layers[-1].name]))


def predict_labels(model: ModelGraph, x: np.ndarray) -> np.ndarray:
    return predict_logits(model, x).argmax(axis=1)


def accuracy(model: ModelGraph, images: np.ndarray, labels: Any) -> float:
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        return 0.0
    return float((predict_labels(model, images) == labels).mean())


def param_checksum(model: ModelGraph, names: Optional[Sequence[str]] = None) -> str:
    """SHA-256 over the bytes of every weight of the named layers (all by default)."""
    h = hashlib.sha256()
    wanted = set(names) if names is not None else None
    for layer in model.layers:
        if wanted is not None and layer.name not in wanted:
            continue
        for pname in sorted(layer.weights):
            h.update(f"{layer.name}.{pname}".encode())
            h.update(np.ascontiguousarray(layer.weights[pname], dtype=np.float64).tobytes())
    return h.hexdigest()


def build_toy_cnn(
    in_channels: int = 1,
    side: int = 12,
    n_classes: int = 4,
    widths: Sequence[int] = (8, 16),
    seed: int = 0,
    kernel: int = 3,
    batchnorm_layers: bool = True,
    pool_after: Sequence[int] = (),
    residual: bool = False,
    head: bool = True,
    name: str = "toy_cnn",
) -> ModelGraph:
    """
    conv-(bn)-relu blocks named conv{i}/bn{i}/relu{i}, then GAP and fc.

    Convolutions keep the spatial size (padding k//2). `pool_after` lists block
    indices followed by a 2x2 average pool. With `residual`, blocks whose
    width is unchanged add their input before the ReLU.
    """
    rng = make_rng(seed, "init", name)
    layers: List[LayerSpec] = []
    c_prev, prev = in_channels, INPUT
    for i, width in enumerate(widths, start=1):
        layers.append(conv2d(f"conv{i}", c_prev, width, kernel, padding=kernel // 2,
                             rng=rng, inputs=[prev]))
        last = f"conv{i}"
        if batchnorm_layers:
            layers.append(batchnorm(f"bn{i}", width, inputs=[last]))
            last = f"bn{i}"
        if residual and width == c_prev and prev != INPUT:
            layers.append(residual_add(f"add{i}", [last, prev]))
            last = f"add{i}"
        layers.append(relu(f"relu{i}", inputs=[last]))
        prev, c_prev = f"relu{i}", width
        if i in pool_after:
            layers.append(avgpool(f"pool{i}", 2, inputs=[prev]))
            prev = f"pool{i}"
    if head:
        layers.append(avgpool("gap", 0, inputs=[prev]))
        layers.append(linear("fc", c_prev, n_classes, rng=rng, inputs=["gap"]))
    return ModelGraph(layers=layers, input_shape=(in_channels, side, side), name=name)


def build_mlp(sizes: Sequence[int], seed: int = 0, name: str = "mlp") -> ModelGraph:
    """Linear/ReLU stack fc1, relu1, ..., fc{n} for layer sizes (in, hidden..., out)."""
    if len(sizes) < 2:
        raise TSDPValidationError("build_mlp needs at least input and output sizes")
    rng = make_rng(seed, "init", name)
    layers: List[LayerSpec] = []
    for i in range(1, len(sizes)):
        layers.append(linear(f"fc{i}", sizes[i - 1], sizes[i], rng=rng))
        if i < len(sizes) - 1:
            layers.append(relu(f"relu{i}"))
    return ModelGraph(layers=layers, input_shape=(sizes[0],), name=name)


def replace_head(model: ModelGraph, n_classes: int, seed: int = 0) -> ModelGraph:
    """Copy of `model` whose final Linear layer is re-initialized for `n_classes`."""
    out = model.copy()
    last = out.layers[-1]
    if last.kind != LINEAR:
        raise TSDPValidationError("replace_head expects a Linear output layer")
    fresh = linear(last.name, last.params["c_in"], n_classes,
                   rng=make_rng(seed, "head", model.name), inputs=last.inputs)
    out.layers[-1] = fresh
    out.validate()
    return out
