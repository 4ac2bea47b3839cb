"""Small ReLU MLPs with hand-written reverse-mode gradients.

Parameters are stored per layer as ``(W, b)`` with ``W`` of shape
``(out, in)``. Whenever parameters are flattened the order is layer by
layer, each layer's weight matrix row-major followed by its bias. For the
last layer this gives the documented last-layer order: class 0 weights,
class 1 weights, ..., then the C biases.

Training losses are means over the batch: cross-entropy for
classification, ``0.5 * (f - y)**2`` (unit-variance Gaussian NLL without
its constant) for regression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from icla_kit.errors import DataError, NumericError, ParameterError, ShapeError, TrainingDiverged


@dataclass(frozen=True)
class MlpModel:
    layers: tuple  # of (W, b)
    n_classes: int | None = None  # None -> regression with a single output

    def __post_init__(self):
        layers = tuple((np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64))
                       for W, b in self.layers)
        if not layers:
            raise ShapeError("model needs at least one layer")
        for k, (W, b) in enumerate(layers):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"layer {k}: weight {W.shape} / bias {b.shape} mismatch")
            if k and W.shape[1] != layers[k - 1][0].shape[0]:
                raise ShapeError(f"layer {k} input {W.shape[1]} != previous output "
                                 f"{layers[k - 1][0].shape[0]}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise NumericError(f"layer {k} has non-finite parameters")
        out = layers[-1][0].shape[0]
        expected = 1 if self.n_classes is None else self.n_classes
        if out != expected:
            raise ShapeError(f"last layer has {out} outputs, task needs {expected}")
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def penultimate_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def is_classification(self) -> bool:
        return self.n_classes is not None

    @property
    def arch(self) -> list[int]:
        return [self.input_dim] + [W.shape[0] for W, _ in self.layers]

    @property
    def n_last_params(self) -> int:
        C, L = self.layers[-1][0].shape
        return C * L + C


@dataclass(frozen=True)
class AsamConfig:
    rho: float = 0.5
    eta: float = 0.01

    def __post_init__(self):
        if self.rho <= 0 or self.eta < 0:
            raise ParameterError("ASAM needs rho > 0 and eta >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr_initial: float = 0.1
    lr_final: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 5e-4
    fisher_penalty_alpha: float = 0.0
    asam: AsamConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")
        if not (0 < self.lr_final <= self.lr_initial):
            raise ParameterError("need 0 < lr_final <= lr_initial")
        if not 0 <= self.momentum < 1:
            raise ParameterError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.fisher_penalty_alpha < 0:
            raise ParameterError("weight_decay and fisher_penalty_alpha must be non-negative")
        if self.fisher_penalty_alpha > 0 and self.asam is not None:
            raise ParameterError("Fisher penalty and ASAM cannot be combined in one run")
        if not 0 <= self.seed < 2**64:
            raise ParameterError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class ForwardResult:
    logits: np.ndarray
    penultimate: np.ndarray


@dataclass
class _Cache:
    acts: list  # acts[0] = x, acts[k] = output of layer k (post-activation)
    pre: list  # pre-activations per layer
    masks: list = field(default_factory=list)


def init_mlp(arch, n_classes: int | None, seed: int = 0) -> MlpModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    arch = [int(a) for a in arch]
    if len(arch) < 2 or any(a < 1 for a in arch):
        raise ParameterError(f"invalid architecture {arch}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append((W, b))
    return MlpModel(tuple(layers), n_classes)


def _as_batch(model: MlpModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"expected inputs of width {model.input_dim}, got shape {x.shape}")
    return x


def _forward_cache(model: MlpModel, x: np.ndarray) -> _Cache:
    acts, pre = [x], []
    last = len(model.layers) - 1
    a = x
    for k, (W, b) in enumerate(model.layers):
        z = a @ W.T + b
        pre.append(z)
        a = np.maximum(z, 0.0) if k < last else z
        acts.append(a)
    return _Cache(acts, pre, [z > 0 for z in pre[:-1]])


def forward(model: MlpModel, x) -> ForwardResult:
    """Logits and penultimate features for one input vector or a batch."""
    xb = _as_batch(model, x)
    cache = _forward_cache(model, xb)
    logits, pen = cache.acts[-1], cache.acts[-2]
    if np.asarray(x).ndim == 1:
        return ForwardResult(logits[0], pen[0])
    return ForwardResult(logits, pen)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_targets(model: MlpModel, x, y):
    x = _as_batch(model, x)
    if len(x) == 0:
        raise DataError("batch is empty")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input")
    if model.is_classification:
        y = np.asarray(y)
        if y.shape != (len(x),):
            raise DataError(f"expected {len(x)} labels, got shape {y.shape}")
        if np.any(y < 0) or np.any(y >= model.n_classes) or np.any(y != np.round(y)):
            raise DataError(f"labels must be integers in [0, {model.n_classes})")
        y = y.astype(np.int64)
    else:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.shape != (len(x),):
            raise DataError(f"expected {len(x)} targets, got shape {y.shape}")
        if not np.all(np.isfinite(y)):
            raise NumericError("non-finite regression target")
    return x, y


def _output_residual(model: MlpModel, logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d(loss_n)/d(logits_n) per sample; equals -grad log p(y_n|x_n) wrt logits."""
    if model.is_classification:
        r = softmax(logits)
        r[np.arange(len(y)), y] -= 1.0
        return r
    return logits - y[:, None]


def _data_loss(model: MlpModel, logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    if model.is_classification:
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        return lse - z[np.arange(len(y)), y]
    return 0.5 * (logits[:, 0] - y) ** 2


def _backward(model: MlpModel, cache: _Cache, delta: np.ndarray) -> list:
    grads = [None] * len(model.layers)
    for k in range(len(model.layers) - 1, -1, -1):
        W, _ = model.layers[k]
        grads[k] = (delta.T @ cache.acts[k], delta.sum(axis=0))
        if k:
            delta = (delta @ W) * cache.masks[k - 1]
    return grads


def _weight_decay(model: MlpModel, weight_decay: float):
    # biases carry no prior
    penalty = 0.5 * weight_decay * sum(float(np.sum(W * W)) for W, _ in model.layers)
    grads = [(weight_decay * W, np.zeros_like(b)) for W, b in model.layers]
    return penalty, grads


def loss_and_grad(model: MlpModel, x, y, weight_decay: float = 0.0):
    """Mean data loss plus ``weight_decay/2 * ||W||^2`` and its exact gradient."""
    x, y = _check_targets(model, x, y)
    cache = _forward_cache(model, x)
    n = len(x)
    loss = float(_data_loss(model, cache.acts[-1], y).mean())
    grads = _backward(model, cache, _output_residual(model, cache.acts[-1], y) / n)
    if weight_decay:
        pen, pgrads = _weight_decay(model, weight_decay)
        loss += pen
        grads = add_params(grads, pgrads)
    if not math.isfinite(loss):
        raise NumericError("loss is not finite")
    return loss, grads


def per_sample_loglik_grads(model: MlpModel, x, y, last_layer: bool = True) -> np.ndarray:
    """Rows are grad log p(y_n | x_n) for each sample, flattened.

    With ``last_layer`` only the final layer's ``C*L + C`` parameters are
    returned (weights row-major by class, then biases).
    """
    x, y = _check_targets(model, x, y)
    cache = _forward_cache(model, x)
    g = -_output_residual(model, cache.acts[-1], y)
    if last_layer:
        return last_layer_grads(cache.acts[-2], g)
    rows = []
    delta = g
    for k in range(len(model.layers) - 1, -1, -1):
        W, _ = model.layers[k]
        gW = np.einsum("no,ni->noi", delta, cache.acts[k]).reshape(len(x), -1)
        rows.append(np.concatenate([gW, delta], axis=1))
        if k:
            delta = (delta @ W) * cache.masks[k - 1]
    return np.concatenate(rows[::-1], axis=1)


def last_layer_grads(features: np.ndarray, output_grads: np.ndarray) -> np.ndarray:
    """Flattened last-layer gradients from output-space gradients and features."""
    n = len(features)
    gW = (output_grads[:, :, None] * features[:, None, :]).reshape(n, -1)
    return np.concatenate([gW, output_grads], axis=1)


def hessian_vector_product(model: MlpModel, x, y, direction) -> list:
    """Exact product of the mean-data-loss Hessian with ``direction``.

    Forward-mode differentiation (R-operator) of the reverse pass. ReLU
    kinks contribute nothing almost everywhere.
    """
    x, y = _check_targets(model, x, y)
    cache = _forward_cache(model, x)
    n = len(x)
    last = len(model.layers) - 1
    r_acts = [np.zeros_like(x)]
    for k, ((W, _), (VW, Vb)) in enumerate(zip(model.layers, direction)):
        rz = cache.acts[k] @ VW.T + r_acts[k] @ W.T + Vb
        r_acts.append(rz * cache.masks[k] if k < last else rz)
    logits = cache.acts[-1]
    r_logits = r_acts[-1]
    if model.is_classification:
        p = softmax(logits)
        r_delta = p * r_logits - p * np.sum(p * r_logits, axis=1, keepdims=True)
    else:
        r_delta = r_logits.copy()
    delta = _output_residual(model, logits, y) / n
    r_delta /= n
    out = [None] * len(model.layers)
    for k in range(last, -1, -1):
        W, _ = model.layers[k]
        VW, _ = direction[k]
        out[k] = (r_delta.T @ cache.acts[k] + delta.T @ r_acts[k], r_delta.sum(axis=0))
        if k:
            mask = cache.masks[k - 1]
            r_delta = (delta @ VW + r_delta @ W) * mask
            delta = (delta @ W) * mask
    return out


def fisher_penalty(model: MlpModel, x, y, alpha: float):
    """``alpha * ||mean_i grad log p(y_i|x_i)||_2`` and its parameter gradient.

    The gradient is ``alpha * H u`` with ``u`` the unit mean-gradient
    direction and ``H`` the Hessian of the mean data loss. At a zero
    gradient norm the penalty and its (sub)gradient are both zero.
    """
    if alpha < 0:
        raise ParameterError("alpha must be non-negative")
    zero = [(np.zeros_like(W), np.zeros_like(b)) for W, b in model.layers]
    if alpha == 0:
        return 0.0, zero
    _, g = loss_and_grad(model, x, y)
    norm = math.sqrt(sum(float(np.sum(a * a) + np.sum(c * c)) for a, c in g))
    if norm == 0.0:
        return 0.0, zero
    u = scale_params(g, 1.0 / norm)
    hu = hessian_vector_product(model, x, y, u)
    return alpha * norm, scale_params(hu, alpha)


def add_params(a, b, scale: float = 1.0):
    return [(Wa + scale * Wb, ba + scale * bb) for (Wa, ba), (Wb, bb) in zip(a, b)]


def scale_params(a, s: float):
    return [(s * W, s * b) for W, b in a]


def params_to_vector(params) -> np.ndarray:
    if isinstance(params, MlpModel):
        params = params.layers
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in params])


def vector_to_params(model: MlpModel, vec) -> list:
    vec = np.asarray(vec, dtype=np.float64)
    out, i = [], 0
    for W, b in model.layers:
        nw, nb = W.size, b.size
        out.append((vec[i:i + nw].reshape(W.shape), vec[i + nw:i + nw + nb].copy()))
        i += nw + nb
    if i != len(vec):
        raise ShapeError(f"vector of length {len(vec)} does not match {i} parameters")
    return out


def with_params(model: MlpModel, params) -> MlpModel:
    return replace(model, layers=tuple((W, b) for W, b in params))


def last_layer_vector(model: MlpModel) -> np.ndarray:
    W, b = model.layers[-1]
    return np.concatenate([W.ravel(), b])


def _total_grad(model, x, y, weight_decay, alpha):
    loss, grads = loss_and_grad(model, x, y, weight_decay)
    if alpha > 0:
        pen, pgrads = fisher_penalty(model, x, y, alpha)
        loss += pen
        grads = add_params(grads, pgrads)
    return loss, grads


def asam_perturbed_grad(model: MlpModel, x, y, rho: float, eta: float,
                        weight_decay: float = 0.0):
    """Loss at ``theta`` and the gradient evaluated at the ASAM ascent point.

    The ascent is ``eps = rho * T**2 g / ||T g||`` with ``T = |theta| + eta``
    applied element-wise to every parameter.
    """
    if rho <= 0:
        raise ParameterError("rho must be positive")
    loss, g = loss_and_grad(model, x, y, weight_decay)
    t = [(np.abs(W) + eta, np.abs(b) + eta) for W, b in model.layers]
    tg = [(tW * gW, tb * gb) for (tW, tb), (gW, gb) in zip(t, g)]
    norm = math.sqrt(sum(float(np.sum(a * a) + np.sum(c * c)) for a, c in tg))
    if norm == 0.0:
        return loss, g
    eps = [(rho * tW * tgW / norm, rho * tb * tgb / norm) for (tW, tb), (tgW, tgb) in zip(t, tg)]
    perturbed = with_params(model, add_params(model.layers, eps))
    _, g_adv = loss_and_grad(perturbed, x, y, weight_decay)
    return loss, g_adv


def asam_step(model: MlpModel, x, y, rho: float = 0.5, eta: float = 0.01, lr: float = 0.1,
              weight_decay: float = 0.0) -> MlpModel:
    """One plain-SGD descent step using the ASAM perturbed gradient."""
    if lr <= 0:
        raise ParameterError("lr must be positive")
    _, g = asam_perturbed_grad(model, x, y, rho, eta, weight_decay)
    return with_params(model, add_params(model.layers, g, -lr))


def cosine_lr(step: int, total_steps: int, lr_initial: float, lr_final: float) -> float:
    if total_steps <= 1:
        return lr_initial
    frac = step / (total_steps - 1)
    return lr_final + 0.5 * (lr_initial - lr_final) * (1.0 + math.cos(math.pi * frac))


def train_map(dataset, arch, config: TrainConfig) -> MlpModel:
    """Mini-batch SGD with momentum and a per-step cosine learning rate.

    The batch order is a fresh seeded permutation each epoch. Returns the
    seeded initial model when ``config.epochs == 0``.
    """
    arch = list(arch)
    if arch[0] != dataset.dim:
        raise ShapeError(f"architecture input {arch[0]} != dataset width {dataset.dim}")
    n_out = dataset.n_classes if dataset.is_classification else 1
    if arch[-1] != n_out:
        raise ShapeError(f"architecture output {arch[-1]} != task outputs {n_out}")
    rng = np.random.default_rng(config.seed)
    model = init_mlp(arch, dataset.n_classes, seed=int(rng.integers(2**63)))
    x, y = dataset.features, dataset.labels
    n = len(x)
    per_epoch = math.ceil(n / config.batch_size)
    total = per_epoch * config.epochs
    velocity = [(np.zeros_like(W), np.zeros_like(b)) for W, b in model.layers]
    params = [(W.copy(), b.copy()) for W, b in model.layers]
    step = 0
    # overflow on the way to divergence is reported as TrainingDiverged below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                model = with_params(model, params) if step else model
                try:
                    if config.asam is not None:
                        loss, g = asam_perturbed_grad(model, x[idx], y[idx], config.asam.rho,
                                                      config.asam.eta, config.weight_decay)
                    else:
                        loss, g = _total_grad(model, x[idx], y[idx], config.weight_decay,
                                              config.fisher_penalty_alpha)
                except NumericError:
                    raise TrainingDiverged(epoch, float("nan")) from None
                if not math.isfinite(loss) or not all(np.all(np.isfinite(a)) for a, _ in g):
                    raise TrainingDiverged(epoch, loss)
                lr = cosine_lr(step, total, config.lr_initial, config.lr_final)
                velocity = [(config.momentum * vW + gW, config.momentum * vb + gb)
                            for (vW, vb), (gW, gb) in zip(velocity, g)]
                params = [(W - lr * vW, b - lr * vb) for (W, b), (vW, vb) in zip(params, velocity)]
                step += 1
                if not all(np.all(np.isfinite(W)) for W, _ in params):
                    raise TrainingDiverged(epoch, loss)
    return with_params(model, params) if step else model


def accuracy(model: MlpModel, dataset) -> float:
    logits = forward(model, dataset.features).logits
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
