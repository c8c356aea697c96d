"""Small classifiers over [0,1]^d: an MLP for synthetic 2-D data and a
two-conv/two-linear CNN for 28x28 images, trained with Gaussian-noise
augmentation. Includes the differentiable Gumbel-Softmax head used to push
gradients through sampled class decisions.

Every layer keeps two forward paths that share the same numpy kernels: one
recording the autodiff tape and one plain-array path for cheap repeated
evaluation. Values agree bit for bit.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "Classifier", "GumbelHead", "TrainingDiverged",
    "make_mlp", "make_cnn", "train", "logits", "predict", "gumbel_softmax",
    "save_checkpoint", "load_checkpoint", "checkpoint_hash",
]

DOMAIN_TOL = 1e-9


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class GumbelHead:
    """Differentiable surrogate for the argmax decision head.

    Produces y_i = softmax_i((log pi + g) / tau) with pi = softmax(logits)
    and g i.i.d. standard Gumbel. The hard class of a draw is
    argmax(log pi + g) = argmax(logits + g), which samples Categorical(pi)
    exactly (Gumbel-max), so per-draw class counts are genuinely multinomial.
    With enabled=False the head degenerates to the one-hot argmax indicator.
    """

    tau: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")


# ---------------------------------------------------------------------------
# layers

class Linear:
    def __init__(self, w, b):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)

    def params(self):
        return [self.w, self.b]

    def set_params(self, arrays):
        self.w, self.b = arrays

    def forward_np(self, x):
        return x @ self.w + self.b

    def forward_node(self, x, pnodes):
        return ad.add(ad.matmul(x, pnodes[0]), pnodes[1])


class Conv2d:
    def __init__(self, w, b):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)

    def params(self):
        return [self.w, self.b]

    def set_params(self, arrays):
        self.w, self.b = arrays

    def forward_np(self, x):
        return ad.conv2d_np(x, self.w, self.b)

    def forward_node(self, x, pnodes):
        return ad.conv2d(x, pnodes[0], pnodes[1])


class ReLU:
    def params(self):
        return []

    def set_params(self, arrays):
        pass

    def forward_np(self, x):
        return np.maximum(x, 0.0)

    def forward_node(self, x, pnodes):
        return ad.relu(x)


class Flatten:
    def params(self):
        return []

    def set_params(self, arrays):
        pass

    def forward_np(self, x):
        return x.reshape(x.shape[0], -1)

    def forward_node(self, x, pnodes):
        return ad.reshape(x, (x.a.shape[0], -1))


class Classifier:
    """Sequential net over inputs in [0,1]^input_shape with K logits."""

    def __init__(self, kind, layers, input_shape, n_classes, head=None,
                 hidden=None):
        self.kind = kind
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.n_classes = int(n_classes)
        self.head = head if head is not None else GumbelHead()
        self.hidden = tuple(hidden) if hidden is not None else None

    # -- parameters ---------------------------------------------------------
    def param_arrays(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def set_param_arrays(self, arrays):
        arrays = list(arrays)
        i = 0
        for layer in self.layers:
            k = len(layer.params())
            layer.set_params([np.asarray(a, dtype=np.float64)
                              for a in arrays[i:i + k]])
            i += k
        if i != len(arrays):
            raise ValueError("parameter count mismatch")

    # -- forward ------------------------------------------------------------
    def _check_domain(self, x):
        x = np.asarray(x, dtype=np.float64)
        if tuple(x.shape) != self.input_shape:
            raise ValueError("input shape %s, expected %s"
                             % (x.shape, self.input_shape))
        if x.min() < -DOMAIN_TOL or x.max() > 1.0 + DOMAIN_TOL:
            raise ValueError("input outside [0,1] domain (min %g, max %g)"
                             % (x.min(), x.max()))
        return x

    def forward_np(self, xb):
        """Batch logits, plain arrays, no domain check (noisy inputs allowed)."""
        h = xb
        for layer in self.layers:
            h = layer.forward_np(h)
        return h

    def forward_node(self, x_node, param_nodes=None):
        """Batch logits on the tape. param_nodes, when given, must align with
        param_arrays() so training can differentiate w.r.t. parameters."""
        if param_nodes is None:
            param_nodes = [ad.constant(p) for p in self.param_arrays()]
        h = x_node
        i = 0
        for layer in self.layers:
            k = len(layer.params())
            h = layer.forward_node(h, param_nodes[i:i + k])
            i += k
        return h

    def logits_np(self, x):
        """Length-K logits of one in-domain sample, plain arrays."""
        x = self._check_domain(x)
        return self.forward_np(x[None])[0]


def logits(model, x):
    """Length-K logits Node of one in-domain sample (differentiable in x)."""
    if isinstance(x, ad.Tensor):
        x = x.array
    xa = model._check_domain(x)
    x_node = ad.leaf(xa)
    batched = ad.reshape(x_node, (1,) + model.input_shape)
    out = model.forward_node(batched)
    return ad.reshape(out, (model.n_classes,))


def predict(model, x):
    """argmax class of the plain logits; ties break to the lowest index."""
    if isinstance(x, ad.Tensor):
        x = x.array
    return int(np.argmax(model.logits_np(x)))


def gumbel_softmax(logits_in, tau, seed=None, g=None):
    """Gumbel-Softmax sample y = softmax((log pi + g)/tau), pi = softmax(logits).

    Differentiable w.r.t. logits when given a Node; g may be passed explicitly
    (tests freeze it), otherwise drawn i.i.d. standard Gumbel from `seed`.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    node = logits_in if isinstance(logits_in, ad.Node) else ad.constant(
        logits_in.array if isinstance(logits_in, ad.Tensor) else logits_in)
    if g is None:
        rng = np.random.default_rng(seed)
        g = rng.gumbel(size=node.a.shape)
    g = np.asarray(g, dtype=np.float64)
    logpi = ad.log_softmax(node, axis=-1)
    return ad.softmax(ad.mul(ad.add(logpi, ad.constant(g)), 1.0 / tau), axis=-1)


# ---------------------------------------------------------------------------
# construction

def _he_linear(rng, fan_in, fan_out):
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
    return w, np.zeros(fan_out)


def make_mlp(input_dim, n_classes=2, hidden=(64, 64), seed=0, head=None):
    rng = np.random.default_rng(seed)
    dims = [input_dim] + list(hidden)
    layers = []
    for i in range(len(dims) - 1):
        w, b = _he_linear(rng, dims[i], dims[i + 1])
        layers += [Linear(w, b), ReLU()]
    w, b = _he_linear(rng, dims[-1], n_classes)
    layers.append(Linear(w, b))
    return Classifier("mlp", layers, (input_dim,), n_classes, head,
                      hidden=hidden)


def make_cnn(n_classes=10, input_shape=(1, 28, 28), seed=0, head=None):
    rng = np.random.default_rng(seed)
    c, h, w = input_shape

    def conv_init(out_c, in_c):
        fan_in = in_c * 9
        cw = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_c, in_c, 3, 3))
        return cw, np.zeros(out_c)

    w1, b1 = conv_init(16, c)
    w2, b2 = conv_init(32, 16)
    flat = 32 * (h - 4) * (w - 4)
    w3, b3 = _he_linear(rng, flat, 128)
    w4, b4 = _he_linear(rng, 128, n_classes)
    layers = [Conv2d(w1, b1), ReLU(), Conv2d(w2, b2), ReLU(), Flatten(),
              Linear(w3, b3), ReLU(), Linear(w4, b4)]
    return Classifier("cnn", layers, input_shape, n_classes, head)


# ---------------------------------------------------------------------------
# training

def train(model, data, sigma, epochs=10, seed=0, lr=0.01, momentum=0.9,
          batch_size=64):
    """SGD with momentum on cross-entropy; each step sees the batch plus a
    fresh N(0, sigma^2) draw per input. Mutates and returns `model`."""
    X, y = data
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(X) == 0:
        raise ValueError("empty dataset")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if X.min() < -DOMAIN_TOL or X.max() > 1.0 + DOMAIN_TOL:
        raise ValueError("training inputs must lie in [0,1]")
    if epochs == 0:
        return model

    rng = np.random.default_rng(seed)
    params = model.param_arrays()
    velocity = [np.zeros_like(p) for p in params]
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            xb = X[idx]
            if sigma > 0:
                xb = xb + sigma * rng.standard_normal(xb.shape)
            try:
                pnodes = [ad.leaf(p) for p in params]
                out = model.forward_node(ad.constant(xb), pnodes)
                logp = ad.log_softmax(out, axis=-1)
                picked = ad.take(logp, (np.arange(len(idx)), y[idx]))
                loss = ad.neg(ad.reduce_mean(picked))
                ad.backward(loss)
            except ValueError as e:
                raise TrainingDiverged(
                    "non-finite value at epoch %d batch %d: %s"
                    % (epoch, start // batch_size, e)) from e
            if not np.isfinite(loss.a):
                raise TrainingDiverged("loss is not finite at epoch %d" % epoch)
            for p, v, pn in zip(params, velocity, pnodes):
                g = pn.grad if pn.grad is not None else np.zeros_like(p)
                v *= momentum
                v += g
                p -= lr * v
    return model


def accuracy(model, data):
    X, y = data
    pred = np.argmax(model.forward_np(np.asarray(X, dtype=np.float64)), axis=1)
    return float(np.mean(pred == np.asarray(y)))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model, path):
    """Versioned JSON container; float64 little-endian base64 payloads
    round-trip bit-exactly."""
    arch = {
        "kind": model.kind,
        "input_shape": list(model.input_shape),
        "n_classes": model.n_classes,
        "head": {"tau": model.head.tau, "enabled": model.head.enabled},
    }
    if model.kind == "mlp":
        arch["hidden"] = list(model.hidden)
    params = [{
        "shape": list(p.shape),
        "data": base64.b64encode(
            np.ascontiguousarray(p, dtype="<f8").tobytes()).decode("ascii"),
    } for p in model.param_arrays()]
    doc = {"format": "certattack-checkpoint", "version": 1,
           "arch": arch, "params": params}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "certattack-checkpoint" or doc.get("version") != 1:
        raise ValueError("unrecognized checkpoint container")
    arch = doc["arch"]
    head = GumbelHead(tau=arch["head"]["tau"], enabled=arch["head"]["enabled"])
    if arch["kind"] == "mlp":
        model = make_mlp(arch["input_shape"][0], arch["n_classes"],
                         hidden=tuple(arch["hidden"]), head=head)
    elif arch["kind"] == "cnn":
        model = make_cnn(arch["n_classes"], tuple(arch["input_shape"]),
                         head=head)
    else:
        raise ValueError("unknown architecture kind %r" % (arch["kind"],))
    arrays = []
    for spec in doc["params"]:
        raw = base64.b64decode(spec["data"])
        arrays.append(np.frombuffer(raw, dtype="<f8").reshape(
            spec["shape"]).astype(np.float64))
    expected = model.param_arrays()
    if len(arrays) != len(expected) or any(
            a.shape != e.shape for a, e in zip(arrays, expected)):
        raise ValueError("checkpoint parameter shapes do not match arch")
    model.set_param_arrays(arrays)
    return model


def checkpoint_hash(model):
    """Content hash of architecture plus parameter bytes."""
    h = hashlib.sha256()
    h.update(json.dumps({"kind": model.kind,
                         "input_shape": list(model.input_shape),
                         "n_classes": model.n_classes},
                        sort_keys=True).encode())
    for p in model.param_arrays():
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()
