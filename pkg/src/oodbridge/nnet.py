"""A small convolutional classifier with hand-written backpropagation.

Architecture (fixed, ~66k parameters for K = 10)::

    conv 3->32 3x3 + ReLU, conv 32->32 3x3 + ReLU, 2x2 max-pool,
    conv 32->64 3x3 + ReLU, conv 64->64 3x3 + ReLU, 2x2 max-pool,
    global average pool, linear 64->K, softmax

Convolutions use zero padding 1 and stride 1. Activations are kept in NHWC
layout internally; the public API takes (N, 3, 32, 32) image batches.
Training runs in float32; ``grad_check`` works on a float64 copy.
"""

import struct

import numpy as np

from .errors import FormatError, NumericalError, ShapeError, TruncatedError
from .rng import make_rng

ARCH_ID = 1
PROB_FLOOR = 1e-12
CONV_BIAS_INIT = 0.01

CONV_LAYERS = (("conv1", 3, 32), ("conv2", 32, 32), ("conv3", 32, 64), ("conv4", 64, 64))

# Forward stages; a parameter of stage s only influences stages >= s.
STAGES = ("conv1", "conv2", "pool1", "conv3", "conv4", "pool2", "gap", "fc")


def param_shapes(class_count):
    shapes = {}
    for name, cin, cout in CONV_LAYERS:
        shapes[f"{name}.weight"] = (3, 3, cin, cout)
        shapes[f"{name}.bias"] = (cout,)
    shapes["fc.weight"] = (64, class_count)
    shapes["fc.bias"] = (class_count,)
    return shapes


def _stage_of(param_name):
    return STAGES.index(param_name.split(".")[0])


# ---------------------------------------------------------------------------
# layer primitives (NHWC)


def _im2col(x):
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((n, h, w, 9 * c), dtype=x.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[..., k * c:(k + 1) * c] = xp[:, dy:dy + h, dx:dx + w, :]
            k += 1
    return cols.reshape(n * h * w, 9 * c)


def _col2im(dcols, shape):
    n, h, w, c = shape
    dcols = dcols.reshape(n, h, w, 9 * c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy:dy + h, dx:dx + w, :] += dcols[..., k * c:(k + 1) * c]
            k += 1
    return dxp[:, 1:-1, 1:-1, :]


def _pad(x):
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    return xp


# Wide inputs: accumulate nine shifted matmuls over the flattened padded
# tensor instead of materializing a 9x im2col buffer. Row r of the result
# is the output pixel whose window starts at padded position r.
def _shift_forward(xp, weight):
    n, hp, wp, c = xp.shape
    flat = xp.reshape(-1, c)
    span = len(flat) - (2 * wp + 2)
    out = np.zeros((len(flat), weight.shape[-1]), dtype=xp.dtype)
    acc = out[:span]
    for dy in range(3):
        for dx in range(3):
            o = dy * wp + dx
            acc += flat[o:o + span] @ weight[dy, dx]
    return out.reshape(n, hp, wp, -1)[:, :hp - 2, :wp - 2]


def _shift_backward(xp, weight, d):
    n, hp, wp, c = xp.shape
    dp = np.zeros((n, hp, wp, d.shape[-1]), dtype=d.dtype)
    dp[:, :hp - 2, :wp - 2] = d
    dflat = dp.reshape(-1, d.shape[-1])
    flat = xp.reshape(-1, c)
    span = len(flat) - (2 * wp + 2)
    dw = np.empty_like(weight)
    dx_flat = np.zeros_like(flat)
    for dy in range(3):
        for ddx in range(3):
            o = dy * wp + ddx
            dw[dy, ddx] = flat[o:o + span].T @ dflat[:span]
            dx_flat[o:o + span] += dflat[:span] @ weight[dy, ddx].T
    return dw, dx_flat.reshape(xp.shape)[:, 1:-1, 1:-1]


def _use_shift(cin):
    return cin >= 32


def _conv(x, weight, bias):
    """Returns (pre-activation, saved input for backward)."""
    n, h, w, c = x.shape
    if _use_shift(c):
        xp = _pad(x)
        return _shift_forward(xp, weight) + bias, xp
    cols = _im2col(x)
    out = cols @ weight.reshape(-1, weight.shape[-1]) + bias
    return out.reshape(n, h, w, -1), cols


def _conv_backward(saved, weight, d, x_shape, need_input_grad=True):
    """Returns (dweight, dbias, dx or None) for upstream gradient ``d`` (NHWC)."""
    db = d.sum(axis=(0, 1, 2))
    if _use_shift(x_shape[-1]):
        dw, dx = _shift_backward(saved, weight, d)
        return dw, db, dx
    d2 = d.reshape(-1, d.shape[-1])
    dw = (saved.T @ d2).reshape(weight.shape)
    dx = _col2im(d2 @ weight.reshape(-1, weight.shape[-1]).T, x_shape) if need_input_grad else None
    return dw, db, dx


def _pool(x):
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = win.argmax(axis=-1)
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], arg


def _unpool(dout, arg, shape):
    n, h, w, c = shape
    win = np.zeros(arg.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(win, arg[..., None], dout[..., None], axis=-1)
    return win.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# losses


def soft_cross_entropy(probs, targets):
    """Mean over rows of -sum_j t_j log p_j, with p floored at 1e-12."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if probs.shape != targets.shape:
        raise ShapeError(f"probs {probs.shape} and targets {targets.shape} differ in shape")
    return float(np.mean(-np.sum(targets * np.log(np.maximum(probs, PROB_FLOOR)), axis=1)))


def oe_loss(id_probs, id_targets, ood_probs, lam):
    """ID cross-entropy plus ``lam`` times cross-entropy of OOD predictions to uniform."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    ood_probs = np.atleast_2d(np.asarray(ood_probs, dtype=np.float64))
    uniform = np.full_like(ood_probs, 1.0 / ood_probs.shape[1])
    return soft_cross_entropy(id_probs, id_targets) + lam * soft_cross_entropy(ood_probs, uniform)


# ---------------------------------------------------------------------------
# the model


class Classifier:
    """Parameters of the fixed CNN plus forward/backward passes."""

    def __init__(self, class_count, params=None, dtype=np.float32):
        if class_count < 2:
            raise ValueError("need at least two classes")
        self.class_count = int(class_count)
        shapes = param_shapes(self.class_count)
        if params is None:
            params = {k: np.zeros(s) for k, s in shapes.items()}
        self.params = {}
        for name, shape in shapes.items():
            if name not in params:
                raise ShapeError(f"missing parameter {name}")
            arr = np.array(params[name], dtype=dtype)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = arr

    @classmethod
    def initialize(cls, class_count, seed, dtype=np.float32):
        """He-normal convolution weights, scaled-normal linear weights.

        Convolution biases start at CONV_BIAS_INIT rather than 0 so that an
        all-zero input does not put every unit exactly on a ReLU kink.
        """
        rng = make_rng(seed)
        params = {}
        for name, shape in param_shapes(class_count).items():
            if name.endswith(".bias"):
                params[name] = np.full(shape, CONV_BIAS_INIT if name.startswith("conv") else 0.0)
            else:
                fan_in = int(np.prod(shape[:-1]))
                gain = 2.0 if name.startswith("conv") else 1.0
                params[name] = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
        return cls(class_count, params, dtype)

    @property
    def dtype(self):
        return self.params["fc.weight"].dtype

    def astype(self, dtype):
        return Classifier(self.class_count, self.params, dtype)

    def copy(self):
        return self.astype(self.dtype)

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def _prepare(self, images):
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1:] != (3, 32, 32):
            raise ShapeError(f"expected a (N, 3, 32, 32) batch, got {images.shape}")
        return np.ascontiguousarray(images.transpose(0, 2, 3, 1), dtype=self.dtype)

    def _run(self, x, start=0, cache=None):
        """Run stages ``start..`` on the input of stage ``start``; fills ``cache`` if given."""
        p = self.params
        for s in range(start, len(STAGES)):
            stage = STAGES[s]
            if cache is not None:
                cache[f"in.{stage}"] = x
            if stage.startswith("conv"):
                pre, cols = _conv(x, p[f"{stage}.weight"], p[f"{stage}.bias"])
                if cache is not None:
                    cache[f"cols.{stage}"] = cols
                    cache[f"pre.{stage}"] = pre
                x = np.maximum(pre, 0)
            elif stage.startswith("pool"):
                x, arg = _pool(x)
                if cache is not None:
                    cache[f"arg.{stage}"] = arg
            elif stage == "gap":
                x = x.mean(axis=(1, 2))
            else:
                x = x @ p["fc.weight"] + p["fc.bias"]
        return x

    def logits(self, images):
        return self._run(self._prepare(images))

    def forward(self, images):
        """Row-stochastic (N, K) matrix of class probabilities."""
        return softmax(self.logits(images))

    def predict_proba(self, images, batch_size=128):
        images = np.asarray(images)
        if len(images) == 0:
            return np.zeros((0, self.class_count), dtype=self.dtype)
        return np.concatenate([self.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])

    def predict(self, images, batch_size=128):
        return self.predict_proba(images, batch_size).argmax(axis=1)

    def loss_and_grads(self, images, targets, weights=None):
        """Weighted soft cross-entropy and its gradients.

        ``weights`` defaults to 1/N per row, i.e. the batch mean. Returns
        (loss, grads, probs).
        """
        x = self._prepare(images)
        n = len(x)
        targets = np.asarray(targets, dtype=self.dtype)
        if targets.shape != (n, self.class_count):
            raise ShapeError(f"targets must have shape {(n, self.class_count)}, got {targets.shape}")
        if weights is None:
            weights = np.full(n, 1.0 / n)
        weights = np.asarray(weights, dtype=self.dtype)
        cache = {}
        logits = self._run(x, 0, cache)
        probs = softmax(logits)
        per_row = -np.sum(targets.astype(np.float64) * np.log(np.maximum(probs, PROB_FLOOR)), axis=1)
        loss = float(np.dot(weights.astype(np.float64), per_row))
        if not np.isfinite(loss):
            raise NumericalError("non-finite loss")
        # d loss / d logits = w * (p * sum(t) - t), i.e. w * (p - t) for normalized targets.
        dlogits = (probs * targets.sum(axis=1, keepdims=True) - targets) * weights[:, None]
        return loss, self._backward(dlogits, cache), probs

    def _backward(self, dlogits, cache):
        p = self.params
        grads = {}
        gap_in = cache["in.fc"]
        grads["fc.weight"] = gap_in.T @ dlogits
        grads["fc.bias"] = dlogits.sum(axis=0)
        d = dlogits @ p["fc.weight"].T
        pooled = cache["in.gap"]
        d = np.broadcast_to(d[:, None, None, :] / (pooled.shape[1] * pooled.shape[2]), pooled.shape)
        for s in range(STAGES.index("pool2"), -1, -1):
            stage = STAGES[s]
            x_in = cache[f"in.{stage}"]
            if stage.startswith("pool"):
                d = _unpool(d, cache[f"arg.{stage}"], x_in.shape)
                continue
            d = d * (cache[f"pre.{stage}"] > 0)
            dw, db, d = _conv_backward(cache[f"cols.{stage}"], p[f"{stage}.weight"], d, x_in.shape, s > 0)
            grads[f"{stage}.weight"] = dw
            grads[f"{stage}.bias"] = db
        return {k: grads[k] for k in self.params}


def sgd_step(model, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """In-place SGD with momentum: v = m*v + g + wd*theta; theta -= lr*v.

    ``velocity`` is a dict updated in place (created when None); returns it.
    """
    if velocity is None:
        velocity = {}
    for name, theta in model.params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} does not match {theta.shape}")
        step = g + weight_decay * theta
        if name in velocity:
            v = velocity[name]
            v *= momentum
            v += step
        else:
            v = velocity[name] = np.array(step, dtype=theta.dtype)
        theta -= (lr * v).astype(theta.dtype)
    return velocity


# ---------------------------------------------------------------------------
# detection scores


def _check_rows(probs):
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if probs.ndim != 2:
        raise ShapeError("expected an (N, K) probability matrix")
    if (probs < 0).any() or np.abs(probs.sum(axis=1) - 1.0).max(initial=0.0) > 1e-4:
        raise NumericalError("probability rows must be non-negative and sum to 1")
    return probs


def entropy_score(probs):
    """Predictive entropy per row (0 log 0 = 0); higher means more OOD."""
    probs = _check_rows(probs)
    logs = np.log(np.where(probs > 0, probs, 1.0))
    return np.maximum(-np.sum(probs * logs, axis=1), 0.0)


def msp_score(probs):
    """Maximum softmax probability per row; higher means more ID."""
    return _check_rows(probs).max(axis=1)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(model, images, targets, epsilon=1e-3, n_params=200, seed=0, grad_fn=None, return_details=False):
    """Largest relative error between analytic and central-difference gradients.

    Works on a float64 copy of ``model``. Checked entries: the largest
    gradient of every tensor plus a random subset (at least ``n_params`` in
    total). A central difference that disagrees is compared with the two
    one-sided differences and retried with steps shrunk by factors of 10
    (down to epsilon/1e4), in case a step straddled a ReLU or max-pool kink;
    float64 keeps the smallest steps well above round-off.
    ``grad_fn(model, images, targets) -> grads`` replaces the analytic
    gradient (used to confirm that a broken gradient is caught).
    """
    if not 1e-4 <= epsilon <= 1e-2:
        raise ValueError("epsilon must lie in [1e-4, 1e-2]")
    m = model.astype(np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if grad_fn is None:
        _, grads, _ = m.loss_and_grads(images, targets)
    else:
        grads = grad_fn(m, images, targets)

    x = m._prepare(images)
    cache = {}
    m._run(x, 0, cache)

    def loss_from(stage):
        name = STAGES[stage]
        logits = m._run(cache[f"in.{name}"], stage)
        return soft_cross_entropy(softmax(logits), targets)

    rng = make_rng(seed)
    names = list(m.params)
    sizes = np.array([m.params[k].size for k in names])
    picks = []
    for k, name in enumerate(names):
        picks.append((name, int(np.argmax(np.abs(grads[name]).ravel()))))
    extra = max(0, n_params - len(picks))
    owners = rng.choice(len(names), size=extra, p=sizes / sizes.sum())
    for k in owners:
        picks.append((names[k], int(rng.integers(sizes[k]))))

    def rel_error(a, num):
        return abs(a - num) / max(abs(a) + abs(num), 1e-8)

    worst = 0.0
    details = []
    for name, flat in picks:
        theta = m.params[name].reshape(-1)
        stage = _stage_of(name)
        a = float(np.asarray(grads[name]).reshape(-1)[flat])
        best = np.inf
        base = None
        for eps in epsilon / 10.0 ** np.arange(5):
            old = theta[flat]
            theta[flat] = old + eps
            up = loss_from(stage)
            theta[flat] = old - eps
            down = loss_from(stage)
            theta[flat] = old
            best = min(best, rel_error(a, (up - down) / (2 * eps)))
            if best < 1e-5:
                break
            # Next to a kink the central difference averages the two one-sided
            # slopes while the analytic gradient is one of them.
            if base is None:
                base = loss_from(stage)
            best = min(best, rel_error(a, (up - base) / eps), rel_error(a, (base - down) / eps))
            if best < 1e-5:
                break
        details.append((name, flat, a, best))
        worst = max(worst, best)
    if return_details:
        return worst, details
    return worst


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"OODM"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIII")


def checkpoint_bytes(model, config_text=""):
    """``OODM`` file: header (magic, version, arch id, K), float32 parameters
    in declaration order, then a uint32-length-prefixed UTF-8 footer."""
    parts = [_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, ARCH_ID, model.class_count)]
    for name in param_shapes(model.class_count):
        parts.append(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())
    footer = config_text.encode("utf-8")
    parts.append(struct.pack("<I", len(footer)))
    parts.append(footer)
    return b"".join(parts)


def save_checkpoint(model, path, config_text=""):
    from .data_io import _atomic_write

    _atomic_write(path, checkpoint_bytes(model, config_text))


def parse_checkpoint(buf, path=None):
    """Returns (Classifier, footer text)."""
    if len(buf) < _CKPT_HEADER.size:
        raise TruncatedError("checkpoint shorter than its header", path)
    magic, version, arch, k = _CKPT_HEADER.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", path)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path)
    if arch != ARCH_ID:
        raise FormatError(f"unknown architecture id {arch}", path)
    if k < 2:
        raise FormatError(f"bad class count {k}", path)
    off = _CKPT_HEADER.size
    params = {}
    for name, shape in param_shapes(k).items():
        count = int(np.prod(shape))
        if off + 4 * count > len(buf):
            raise TruncatedError("parameter payload truncated", path)
        params[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
    if off + 4 > len(buf):
        raise TruncatedError("missing footer", path)
    (flen,) = struct.unpack_from("<I", buf, off)
    off += 4
    if off + flen != len(buf):
        raise TruncatedError("footer length does not match file size", path)
    footer = buf[off:off + flen].decode("utf-8")
    for name, arr in params.items():
        if not np.isfinite(arr).all():
            raise FormatError(f"non-finite values in {name}", path)
    return Classifier(k, params), footer


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), path)
