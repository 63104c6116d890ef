"""A small convolutional classifier with exact reverse-mode gradients.

Plain numpy, NHWC layout. The net is deliberately tiny: what matters here
is that backward() returns exact gradients with respect to BOTH the
parameters and every input pixel, since the unlearning optimizer trains an
input-space perturbation against a frozen model.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError

PARAMS_MAGIC = b"TNP1"
PARAMS_VERSION = 1

DEFAULT_ARCH = "conv:8:3:1,relu,maxpool,conv:16:3:1,relu,maxpool,flatten,dense:64,relu,dense:n"


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv2d | relu | maxpool | flatten | dense
    filters: int = 0
    kernel: int = 0
    stride: int = 1
    units: int = 0


@dataclass(frozen=True)
class ArchSpec:
    """Layer stack mapping an input_size^2 single-channel image to logits."""

    input_size: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        self.shapes()  # validates the chain

    @property
    def num_classes(self) -> int:
        return self.layers[-1].units

    def shapes(self) -> list[tuple]:
        """Output shape after each layer; raises if the chain is inconsistent."""
        if not self.layers or self.layers[-1].kind != "dense":
            raise ConfigError("architecture must end with a dense layer")
        shape: tuple = (self.input_size, self.input_size, 1)
        out = []
        for i, layer in enumerate(self.layers):
            spatial = len(shape) == 3
            if layer.kind == "conv2d":
                if not spatial:
                    raise ConfigError(f"layer {i}: conv2d needs spatial input")
                h, w, _ = shape
                if layer.kernel < 1 or layer.stride < 1 or layer.filters < 1:
                    raise ConfigError(f"layer {i}: bad conv2d parameters")
                oh = (h - layer.kernel) // layer.stride + 1
                ow = (w - layer.kernel) // layer.stride + 1
                if oh < 1 or ow < 1:
                    raise ConfigError(f"layer {i}: kernel larger than input")
                shape = (oh, ow, layer.filters)
            elif layer.kind == "relu":
                pass
            elif layer.kind == "maxpool":
                if not spatial:
                    raise ConfigError(f"layer {i}: maxpool needs spatial input")
                h, w, c = shape
                if h < 2 or w < 2:
                    raise ConfigError(f"layer {i}: input too small to pool")
                shape = (h // 2, w // 2, c)
            elif layer.kind == "flatten":
                if not spatial:
                    raise ConfigError(f"layer {i}: input already flat")
                shape = (shape[0] * shape[1] * shape[2],)
            elif layer.kind == "dense":
                if spatial:
                    raise ConfigError(f"layer {i}: dense needs a flatten first")
                if layer.units < 1:
                    raise ConfigError(f"layer {i}: dense units must be >= 1")
                shape = (layer.units,)
            else:
                raise ConfigError(f"layer {i}: unknown kind {layer.kind!r}")
            out.append(shape)
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_size": self.input_size,
                "layers": [
                    [l.kind, l.filters, l.kernel, l.stride, l.units] for l in self.layers
                ],
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "ArchSpec":
        try:
            obj = json.loads(text)
            layers = tuple(
                LayerSpec(kind=k, filters=f, kernel=ke, stride=s, units=u)
                for k, f, ke, s, u in obj["layers"]
            )
            return ArchSpec(input_size=int(obj["input_size"]), layers=layers)
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad architecture serialization: {exc}") from exc


def parse_arch(text: str, input_size: int, num_classes: int) -> ArchSpec:
    """Parse a compact arch string, e.g. 'conv:8:3:1,relu,maxpool,flatten,dense:n'.

    dense:n resolves to num_classes.
    """
    layers = []
    for token in text.split(","):
        parts = token.strip().split(":")
        kind = parts[0]
        try:
            if kind == "conv":
                filters = int(parts[1])
                kernel = int(parts[2])
                stride = int(parts[3]) if len(parts) > 3 else 1
                layers.append(LayerSpec("conv2d", filters=filters, kernel=kernel, stride=stride))
            elif kind in ("relu", "maxpool", "flatten"):
                layers.append(LayerSpec(kind))
            elif kind == "dense":
                units = num_classes if parts[1] == "n" else int(parts[1])
                layers.append(LayerSpec("dense", units=units))
            else:
                raise ConfigError(f"unknown layer token {token!r}")
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"bad layer token {token!r}") from exc
    return ArchSpec(input_size=input_size, layers=tuple(layers))


def default_arch(input_size: int, num_classes: int) -> ArchSpec:
    return parse_arch(DEFAULT_ARCH, input_size, num_classes)


@dataclass
class ModelParams:
    """Per-layer weight/bias tensors for an ArchSpec."""

    arch: ArchSpec
    tensors: list[dict[str, np.ndarray]]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.arch.to_json().encode())
        for t in self.tensors:
            for name in sorted(t):
                h.update(np.ascontiguousarray(t[name], dtype="<f4").tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            arch=self.arch,
            tensors=[{k: v.astype(dtype) for k, v in t.items()} for t in self.tensors],
        )

    def num_params(self) -> int:
        return sum(v.size for t in self.tensors for v in t.values())


@dataclass
class BatchGradients:
    param_grads: list[dict[str, np.ndarray]]
    input_grads: np.ndarray  # (batch, H, H)
    loss: float


def init_params(arch: ArchSpec, seed: int) -> ModelParams:
    """He-uniform weights, zero biases, drawn in declaration order."""
    rng = np.random.default_rng(seed)
    shape: tuple = (arch.input_size, arch.input_size, 1)
    tensors: list[dict[str, np.ndarray]] = []
    for layer, out_shape in zip(arch.layers, arch.shapes()):
        if layer.kind == "conv2d":
            fan_in = layer.kernel * layer.kernel * shape[2]
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, (layer.kernel, layer.kernel, shape[2], layer.filters))
            tensors.append({"w": w.astype(np.float32), "b": np.zeros(layer.filters, np.float32)})
        elif layer.kind == "dense":
            fan_in = shape[0]
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, (fan_in, layer.units))
            tensors.append({"w": w.astype(np.float32), "b": np.zeros(layer.units, np.float32)})
        else:
            tensors.append({})
        shape = out_shape
    return ModelParams(arch=arch, tensors=tensors)


def _as_batch(x: np.ndarray, input_size: int) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None, :, :]
    if x.ndim == 3:
        x = x[:, :, :, None]
    if x.ndim != 4 or x.shape[1] != input_size or x.shape[2] != input_size or x.shape[3] != 1:
        raise ShapeError(f"expected (batch, {input_size}, {input_size}) input, got {x.shape}")
    return x


def _im2col(x: np.ndarray, k: int, s: int) -> tuple[np.ndarray, int, int]:
    b, h, w, c = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    cols = np.empty((b, oh, ow, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = x[:, i : i + oh * s : s, j : j + ow * s : s, :]
    return cols.reshape(b, oh * ow, k * k * c), oh, ow


def _col2im(dcols: np.ndarray, x_shape: tuple, k: int, s: int, oh: int, ow: int) -> np.ndarray:
    b, h, w, c = x_shape
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    d6 = dcols.reshape(b, oh, ow, k, k, c)
    for i in range(k):
        for j in range(k):
            dx[:, i : i + oh * s : s, j : j + ow * s : s, :] += d6[:, :, :, i, j, :]
    return dx


def _forward_pass(params: ModelParams, x4: np.ndarray):
    """Returns (logits, activations per layer, caches per layer)."""
    acts: list[np.ndarray] = []
    caches: list = []
    out = x4
    for layer, t in zip(params.arch.layers, params.tensors):
        if layer.kind == "conv2d":
            k, s = layer.kernel, layer.stride
            cols, oh, ow = _im2col(out, k, s)
            wmat = t["w"].reshape(-1, layer.filters)
            res = cols @ wmat + t["b"]
            caches.append((cols, out.shape, oh, ow))
            out = res.reshape(out.shape[0], oh, ow, layer.filters)
        elif layer.kind == "relu":
            caches.append(out > 0)
            out = np.maximum(out, 0)
        elif layer.kind == "maxpool":
            b, h, w, c = out.shape
            oh, ow = h // 2, w // 2
            xc = out[:, : oh * 2, : ow * 2, :]
            x6 = xc.reshape(b, oh, 2, ow, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, oh, ow, c, 4)
            amax = x6.argmax(axis=-1)
            caches.append((amax, out.shape))
            out = np.take_along_axis(x6, amax[..., None], axis=-1)[..., 0]
        elif layer.kind == "flatten":
            caches.append(out.shape)
            out = out.reshape(out.shape[0], -1)
        elif layer.kind == "dense":
            caches.append(out)
            out = out @ t["w"] + t["b"]
        acts.append(out)
    return out, acts, caches


def _backward_pass(params: ModelParams, x4: np.ndarray, caches: list, dout: np.ndarray):
    """Backprop dout (gradient at the logits) to params, input, and layer outputs."""
    param_grads: list[dict[str, np.ndarray]] = [{} for _ in params.tensors]
    act_grads: list[np.ndarray | None] = [None] * len(params.tensors)
    g = dout
    for i in range(len(params.arch.layers) - 1, -1, -1):
        act_grads[i] = g
        layer = params.arch.layers[i]
        t = params.tensors[i]
        cache = caches[i]
        if layer.kind == "conv2d":
            cols, x_shape, oh, ow = cache
            b = x_shape[0]
            dmat = g.reshape(b, oh * ow, layer.filters)
            wmat = t["w"].reshape(-1, layer.filters)
            param_grads[i]["w"] = np.tensordot(cols, dmat, axes=([0, 1], [0, 1])).reshape(
                t["w"].shape
            )
            param_grads[i]["b"] = dmat.sum(axis=(0, 1))
            g = _col2im(dmat @ wmat.T, x_shape, layer.kernel, layer.stride, oh, ow)
        elif layer.kind == "relu":
            g = g * cache
        elif layer.kind == "maxpool":
            amax, x_shape = cache
            b, h, w, c = x_shape
            oh, ow = h // 2, w // 2
            d6 = np.zeros((b, oh, ow, c, 4), dtype=g.dtype)
            np.put_along_axis(d6, amax[..., None], g[..., None], axis=-1)
            dx = np.zeros(x_shape, dtype=g.dtype)
            dx[:, : oh * 2, : ow * 2, :] = (
                d6.reshape(b, oh, ow, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, oh * 2, ow * 2, c)
            )
            g = dx
        elif layer.kind == "flatten":
            g = g.reshape(cache)
        elif layer.kind == "dense":
            xin = cache
            param_grads[i]["w"] = xin.T @ g
            param_grads[i]["b"] = g.sum(axis=0)
            g = g @ t["w"].T
    return param_grads, g, act_grads


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Logits for a batch of inputs; never mutates params."""
    x4 = _as_batch(x, params.arch.input_size)
    logits, _, _ = _forward_pass(params, x4)
    return logits


def forward_activations(params: ModelParams, x: np.ndarray) -> list[np.ndarray]:
    """Per-layer outputs (used by saliency tooling)."""
    x4 = _as_batch(x, params.arch.input_size)
    _, acts, _ = _forward_pass(params, x4)
    return acts


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    n = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise DataError(f"labels must lie in [0, {n})")
    return labels


def ce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    labels = _check_labels(logits, labels)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def _ce_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    labels = _check_labels(logits, labels)
    p = softmax(logits)
    b = logits.shape[0]
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = float(-logp[np.arange(b), labels].mean())
    d = p.copy()
    d[np.arange(b), labels] -= 1.0
    return loss, d / b


def margin_loss(logits: np.ndarray, labels: np.ndarray, tau: float) -> float:
    """Mean clamped logit margin: mean_i max(f_y - max_{k != y} f_k, -tau)."""
    labels = _check_labels(logits, labels)
    if logits.shape[-1] < 2:
        raise DataError("margin loss needs at least 2 classes")
    b = logits.shape[0]
    fy = logits[np.arange(b), labels]
    masked = logits.copy()
    masked[np.arange(b), labels] = -np.inf
    fother = masked.max(axis=-1)
    return float(np.maximum(fy - fother, -tau).mean())


def _margin_grad(logits: np.ndarray, labels: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    labels = _check_labels(logits, labels)
    if logits.shape[-1] < 2:
        raise DataError("margin loss needs at least 2 classes")
    b = logits.shape[0]
    fy = logits[np.arange(b), labels]
    masked = logits.copy()
    masked[np.arange(b), labels] = -np.inf
    kstar = masked.argmax(axis=-1)
    margin = fy - masked[np.arange(b), kstar]
    loss = float(np.maximum(margin, -tau).mean())
    d = np.zeros_like(logits)
    active = margin > -tau
    d[np.arange(b), labels] = np.where(active, 1.0, 0.0)
    d[np.arange(b), kstar] -= np.where(active, 1.0, 0.0)
    return loss, d / b


def backward(
    params: ModelParams,
    x: np.ndarray,
    labels: np.ndarray,
    loss_kind: str = "ce",
    tau: float = 1.0,
) -> BatchGradients:
    """Exact gradients of the requested mean loss w.r.t. params and inputs."""
    x4 = _as_batch(x, params.arch.input_size)
    logits, _, caches = _forward_pass(params, x4)
    if loss_kind == "ce":
        loss, dlogits = _ce_grad(logits, labels)
    elif loss_kind == "margin":
        loss, dlogits = _margin_grad(logits, labels, tau)
    else:
        raise ConfigError(f"unsupported loss_kind {loss_kind!r}")
    param_grads, dx, _ = _backward_pass(params, x4, caches, dlogits)
    return BatchGradients(param_grads=param_grads, input_grads=dx[:, :, :, 0], loss=loss)


def logit_backward(params: ModelParams, x: np.ndarray, class_idx: int):
    """Activations and per-layer gradients of the summed class_idx logit.

    Returns (activations, act_grads); act_grads[i] is d logit / d output of
    layer i, one entry per sample.
    """
    x4 = _as_batch(x, params.arch.input_size)
    logits, acts, caches = _forward_pass(params, x4)
    n = params.arch.num_classes
    if not 0 <= class_idx < n:
        raise DataError(f"class {class_idx} outside [0, {n})")
    dlogits = np.zeros_like(logits)
    dlogits[:, class_idx] = 1.0
    _, _, act_grads = _backward_pass(params, x4, caches, dlogits)
    return acts, act_grads


def sgd_step(params: ModelParams, param_grads: list[dict[str, np.ndarray]], lr: float) -> ModelParams:
    """One plain gradient-descent step; returns fresh params."""
    if len(param_grads) != len(params.tensors):
        raise ShapeError("gradient list does not match layer count")
    new_tensors = []
    for t, g in zip(params.tensors, param_grads):
        if set(t) != set(g):
            raise ShapeError("gradient keys do not match parameter keys")
        layer_new = {}
        for name, w in t.items():
            if g[name].shape != w.shape:
                raise ShapeError(f"gradient shape {g[name].shape} != param shape {w.shape}")
            layer_new[name] = (w - lr * g[name]).astype(w.dtype)
        new_tensors.append(layer_new)
    return ModelParams(arch=params.arch, tensors=new_tensors)


def save_params(params: ModelParams, path) -> None:
    arch_json = params.arch.to_json().encode()
    digest = bytes.fromhex(params.digest())
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<II", PARAMS_VERSION, len(arch_json)))
        f.write(arch_json)
        f.write(digest)
        for t in params.tensors:
            for name in sorted(t):
                arr = np.ascontiguousarray(t[name], dtype="<f4")
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(arr.tobytes())


def load_params(path, arch: ArchSpec | None = None) -> ModelParams:
    """Load a parameter file; verifies the stored digest and optional arch."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != PARAMS_MAGIC:
        raise FormatError(f"{path}: not a parameter file")
    version, arch_len = struct.unpack_from("<II", raw, 4)
    if version != PARAMS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 12
    stored_arch = ArchSpec.from_json(raw[off : off + arch_len].decode())
    off += arch_len
    stored_digest = raw[off : off + 32].hex()
    off += 32
    if arch is not None and arch != stored_arch:
        raise FormatError(f"{path}: architecture does not match the requested one")
    tensors: list[dict[str, np.ndarray]] = []
    for layer in stored_arch.layers:
        t: dict[str, np.ndarray] = {}
        names = ["b", "w"] if layer.kind in ("conv2d", "dense") else []
        for name in names:
            try:
                (ndim,) = struct.unpack_from("<I", raw, off)
                off += 4
                shape = struct.unpack_from(f"<{ndim}I", raw, off)
                off += 4 * ndim
                count = int(np.prod(shape)) if ndim else 1
                arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
                off += 4 * count
            except struct.error as exc:
                raise FormatError(f"{path}: truncated tensor data") from exc
            if arr.size != count:
                raise FormatError(f"{path}: truncated tensor data")
            t[name] = arr.reshape(shape).copy()
        tensors.append(t)
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes after tensor data")
    params = ModelParams(arch=stored_arch, tensors=tensors)
    if params.digest() != stored_digest:
        raise FormatError(f"{path}: parameter digest mismatch")
    return params


def accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray, batch: int = 512) -> float:
    """Fraction of argmax-correct predictions, evaluated in chunks."""
    if len(y) == 0:
        raise DataError("empty evaluation set")
    hits = 0
    for i in range(0, len(y), batch):
        logits = forward(params, x[i : i + batch])
        hits += int((logits.argmax(axis=-1) == y[i : i + batch]).sum())
    return hits / len(y)


def last_conv_index(arch: ArchSpec) -> int:
    idx = -1
    for i, layer in enumerate(arch.layers):
        if layer.kind == "conv2d":
            idx = i
    if idx < 0:
        raise ConfigError("architecture has no convolutional layer")
    return idx
