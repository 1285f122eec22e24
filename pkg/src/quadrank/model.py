"""Differentiable response models over 17x17 patches.

A model is an ordered stack of layers (stride-1 convolution, fully
connected, ELU, batch normalization) ending in a single scalar response
per input patch. Forward and reverse passes are hand-written on numpy
arrays; there is no autodiff graph.

Architectures are written in a compact text form, e.g.
``c(17,1,32,0),e,f(32,1)`` where ``c(f,i,o,p)`` is a convolution with
filter size f, i input channels, o output channels and zero padding p,
``f(i,o)`` a fully-connected layer, ``e`` the ELU nonlinearity, ``b`` a
batch normalization layer, and ``(...)^n`` repeats a group n times.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image import FLAT_STD, PATCH_RADIUS, PATCH_SIZE
from .imgio import atomic_write_bytes

MODEL_MAGIC = b"QRNK"
MODEL_VERSION = 1

ARCH_PRESETS = {
    "linear": "c(17,1,1,0)",
    "mlp32": "c(17,1,32,0),e,f(32,1)",
    "shallow-fc": "c(17,1,32,0),e,f(32,32),e,f(32,1)",
    "deep-fc": "c(17,1,32,0),e,(f(32,32),e)^8,f(32,1)",
    "deep-conv": "c(7,1,32,3),b,e,(c(7,32,32,3),b,e)^8,c(17,32,1,0)",
}

# Soft cap on transient im2col buffers (elements), keeps deep stacks on
# big batches within a few hundred MB.
_COL_BUDGET = 16_000_000


def parse_arch(text: str) -> list[tuple]:
    """Parse an architecture string into a flat list of layer atoms."""
    atoms: list[tuple] = []
    s = text.strip()
    i = 0

    def _match_paren(start: int) -> int:
        depth = 0
        for j in range(start, len(s)):
            if s[j] == "(":
                depth += 1
            elif s[j] == ")":
                depth -= 1
                if depth == 0:
                    return j
        raise ValueError(f"dimension mismatch in arch spec: unbalanced parens in {text!r}")

    while i < len(s):
        ch = s[i]
        if ch in ", \t\n":
            i += 1
        elif ch == "(":
            j = _match_paren(i)
            inner = parse_arch(s[i + 1 : j])
            i = j + 1
            reps = 1
            if i < len(s) and s[i] == "^":
                i += 1
                k = i
                while k < len(s) and s[k].isdigit():
                    k += 1
                if k == i:
                    raise ValueError(f"bad repeat count in arch spec {text!r}")
                reps = int(s[i:k])
                i = k
            atoms.extend(inner * reps)
        elif ch in "cf":
            if i + 1 >= len(s) or s[i + 1] != "(":
                raise ValueError(f"bad layer syntax near {s[i:]!r}")
            j = _match_paren(i + 1)
            args = [int(a) for a in s[i + 2 : j].split(",")]
            if ch == "c":
                if len(args) != 4:
                    raise ValueError(f"conv layer needs 4 args, got {args}")
                atoms.append(("c", *args))
            else:
                if len(args) != 2:
                    raise ValueError(f"fully-connected layer needs 2 args, got {args}")
                atoms.append(("f", *args))
            i = j + 1
        elif ch == "e":
            atoms.append(("e",))
            i += 1
        elif ch == "b":
            atoms.append(("b",))
            i += 1
        else:
            raise ValueError(f"unexpected character {ch!r} in arch spec {text!r}")
    return atoms


def format_arch(atoms: list[tuple]) -> str:
    parts = []
    for a in atoms:
        if a[0] == "c":
            parts.append(f"c({a[1]},{a[2]},{a[3]},{a[4]})")
        elif a[0] == "f":
            parts.append(f"f({a[1]},{a[2]})")
        else:
            parts.append(a[0])
    return ",".join(parts)


class ConvLayer:
    """Stride-1 2-D convolution with zero padding."""

    def __init__(self, fsize: int, c_in: int, c_out: int, pad: int, dtype=np.float32):
        self.fsize = fsize
        self.c_in = c_in
        self.c_out = c_out
        self.pad = pad
        self.weight = np.zeros((c_out, c_in, fsize, fsize), dtype=dtype)
        self.bias = np.zeros(c_out, dtype=dtype)

    @property
    def params(self):
        return [self.weight, self.bias]

    @property
    def buffers(self):
        return []

    def init(self, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(self.c_in * self.fsize * self.fsize)
        self.weight[...] = rng.uniform(-bound, bound, self.weight.shape)
        self.bias[...] = 0.0

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.c_in:
            raise ValueError(
                f"dimension mismatch: conv expects {self.c_in} channels, got {c}"
            )
        ho = h + 2 * self.pad - self.fsize + 1
        wo = w + 2 * self.pad - self.fsize + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"dimension mismatch: conv filter {self.fsize} too large for {h}x{w}")
        return (self.c_out, ho, wo)

    def _chunk(self, b: int, ho: int, wo: int) -> int:
        per_sample = max(1, ho * wo * self.c_in * self.fsize * self.fsize)
        return max(1, min(b, _COL_BUDGET // per_sample))

    def _cols(self, xp: np.ndarray, ho: int, wo: int) -> np.ndarray:
        # (b, C, Hp, Wp) -> (b*ho*wo, C*f*f) patch matrix
        win = sliding_window_view(xp, (self.fsize, self.fsize), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5)
        return cols.reshape(xp.shape[0] * ho * wo, -1)

    def forward(self, x: np.ndarray, train: bool):
        b, _, h, w = x.shape
        _, ho, wo = self.out_shape(x.shape[1:])
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        wmat = self.weight.reshape(self.c_out, -1)
        y = np.empty((b, self.c_out, ho, wo), dtype=x.dtype)
        step = self._chunk(b, ho, wo)
        for i in range(0, b, step):
            cols = self._cols(xp[i : i + step], ho, wo)
            out = cols @ wmat.T + self.bias
            n = out.shape[0] // (ho * wo)
            y[i : i + step] = out.reshape(n, ho, wo, self.c_out).transpose(0, 3, 1, 2)
        return y, x

    def backward(self, dy: np.ndarray, cache):
        x = cache
        b = x.shape[0]
        _, ho, wo = dy.shape[1:]
        f, p = self.fsize, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        wmat = self.weight.reshape(self.c_out, -1)
        dw = np.zeros_like(wmat)
        db = np.zeros_like(self.bias)
        dxp = np.zeros_like(xp)
        step = self._chunk(b, ho, wo)
        for i in range(0, b, step):
            n = min(step, b - i)
            cols = self._cols(xp[i : i + n], ho, wo)
            dyc = dy[i : i + n].transpose(0, 2, 3, 1).reshape(n * ho * wo, self.c_out)
            dw += dyc.T @ cols
            db += dyc.sum(axis=0)
            dcols = (dyc @ wmat).reshape(n, ho, wo, self.c_in, f, f)
            dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
            for ki in range(f):
                for kj in range(f):
                    dxp[i : i + n, :, ki : ki + ho, kj : kj + wo] += dcols[:, :, :, :, ki, kj]
        dx = dxp[:, :, p : p + x.shape[2], p : p + x.shape[3]] if p else dxp
        return dx, [dw.reshape(self.weight.shape), db]

    def spec(self):
        return ("c", self.fsize, self.c_in, self.c_out, self.pad)


class FCLayer:
    """Fully-connected layer; consumes a 1x1 spatial map."""

    def __init__(self, n_in: int, n_out: int, dtype=np.float32):
        self.n_in = n_in
        self.n_out = n_out
        self.weight = np.zeros((n_out, n_in), dtype=dtype)
        self.bias = np.zeros(n_out, dtype=dtype)

    @property
    def params(self):
        return [self.weight, self.bias]

    @property
    def buffers(self):
        return []

    def init(self, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(self.n_in)
        self.weight[...] = rng.uniform(-bound, bound, self.weight.shape)
        self.bias[...] = 0.0

    def out_shape(self, shape):
        c, h, w = shape
        if h != 1 or w != 1:
            raise ValueError(f"dimension mismatch: fully-connected layer needs 1x1 input, got {h}x{w}")
        if c != self.n_in:
            raise ValueError(f"dimension mismatch: fc expects {self.n_in} features, got {c}")
        return (self.n_out, 1, 1)

    def forward(self, x: np.ndarray, train: bool):
        self.out_shape(x.shape[1:])
        z = x.reshape(x.shape[0], self.n_in)
        y = z @ self.weight.T + self.bias
        return y.reshape(x.shape[0], self.n_out, 1, 1), z

    def backward(self, dy: np.ndarray, cache):
        z = cache
        dyf = dy.reshape(dy.shape[0], self.n_out)
        dw = dyf.T @ z
        db = dyf.sum(axis=0)
        dx = (dyf @ self.weight).reshape(dy.shape[0], self.n_in, 1, 1)
        return dx, [dw, db]

    def spec(self):
        return ("f", self.n_in, self.n_out)


class ELULayer:
    """ELU nonlinearity: x for x > 0, exp(x) - 1 otherwise."""

    params: list = []
    buffers: list = []

    def init(self, rng) -> None:
        pass

    def out_shape(self, shape):
        return shape

    def forward(self, x: np.ndarray, train: bool):
        y = np.where(x > 0, x, np.expm1(x))
        return y, y

    def backward(self, dy: np.ndarray, cache):
        y = cache
        return dy * np.where(y > 0, np.asarray(1.0, dtype=y.dtype), y + 1), []

    def spec(self):
        return ("e",)


class BatchNormLayer:
    """Per-channel batch normalization with learned gain and shift.

    Training normalizes with statistics of the current batch (jointly
    over all patches present) and tracks running estimates with momentum
    0.1; evaluation normalizes with the running estimates. The running
    statistics are buffers, not trainable parameters.
    """

    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, channels: int, dtype=np.float32):
        self.channels = channels
        self.gain = np.ones(channels, dtype=dtype)
        self.shift = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    @property
    def params(self):
        return [self.gain, self.shift]

    @property
    def buffers(self):
        return [self.running_mean, self.running_var]

    def init(self, rng) -> None:
        self.gain[...] = 1.0
        self.shift[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def out_shape(self, shape):
        if shape[0] != self.channels:
            raise ValueError(
                f"dimension mismatch: batchnorm over {self.channels} channels, got {shape[0]}"
            )
        return shape

    def forward(self, x: np.ndarray, train: bool):
        g = self.gain.reshape(1, -1, 1, 1)
        s = self.shift.reshape(1, -1, 1, 1)
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.MOMENTUM
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * var
        else:
            mean = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + self.EPS)
        xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        y = g * xhat + s
        return y, (xhat, inv_std, train)

    def backward(self, dy: np.ndarray, cache):
        xhat, inv_std, train = cache
        dgain = (dy * xhat).sum(axis=(0, 2, 3))
        dshift = dy.sum(axis=(0, 2, 3))
        dxhat = dy * self.gain.reshape(1, -1, 1, 1)
        istd = inv_std.reshape(1, -1, 1, 1)
        if not train:
            return dxhat * istd, [dgain, dshift]
        n = dy.shape[0] * dy.shape[2] * dy.shape[3]
        sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (istd / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        return dx, [dgain, dshift]

    def spec(self):
        return ("b",)


def _make_layer(atom: tuple, channels: int, dtype):
    if atom[0] == "c":
        return ConvLayer(atom[1], atom[2], atom[3], atom[4], dtype=dtype)
    if atom[0] == "f":
        return FCLayer(atom[1], atom[2], dtype=dtype)
    if atom[0] == "e":
        return ELULayer()
    if atom[0] == "b":
        if channels < 1:
            raise ValueError("dimension mismatch: batchnorm before any channel-bearing layer")
        return BatchNormLayer(channels, dtype=dtype)
    raise ValueError(f"unknown layer atom {atom!r}")


class ResponseModel:
    """Layer stack mapping a normalized 17x17 patch to one scalar response."""

    def __init__(self, layers: list, arch: str):
        self.layers = layers
        self.arch = arch

    @property
    def dtype(self):
        for layer in self.layers:
            if layer.params:
                return layer.params[0].dtype
        return np.dtype(np.float32)

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def astype(self, dtype) -> "ResponseModel":
        """Copy with all parameters and buffers cast to `dtype`."""
        out = build_model(self.arch, seed=0, dtype=dtype)
        for dst, src in zip(out.params(), self.params()):
            dst[...] = src.astype(dtype)
        for dl, sl in zip(out.layers, self.layers):
            for dst, src in zip(dl.buffers, sl.buffers):
                dst[...] = src.astype(dtype)
        return out

    def forward(self, patches: np.ndarray, train: bool = False):
        """Run a batch of patches; returns (responses (n,), caches)."""
        x = np.asarray(patches, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None, :, :]
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, train)
            caches.append(cache)
        if x.shape[1:] != (1, 1, 1):
            raise ValueError(f"model output shape {x.shape[1:]} is not a scalar response")
        return x.reshape(x.shape[0]), caches

    def backward(self, caches: list, upstream: np.ndarray) -> list[np.ndarray]:
        """Reverse pass; `upstream` is dLoss/dResponse per patch."""
        up = np.asarray(upstream, dtype=self.dtype)
        dy = up.reshape(-1, 1, 1, 1)
        grads: list[list[np.ndarray]] = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dy, g = layer.backward(dy, cache)
            grads.append(g)
        grads.reverse()
        return [g for layer_grads in grads for g in layer_grads]


def build_model(arch: str | list, seed: int = 0, dtype=np.float32) -> ResponseModel:
    """Build a model from a preset name, arch string, or atom list.

    Weights are drawn uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases
    start at zero, batchnorm at identity; deterministic for a given seed.
    """
    if isinstance(arch, str):
        text = ARCH_PRESETS.get(arch, arch)
        atoms = parse_arch(text)
    else:
        atoms = list(arch)
    if not atoms:
        raise ValueError("empty architecture")
    layers = []
    shape = (1, PATCH_SIZE, PATCH_SIZE)
    for atom in atoms:
        layer = _make_layer(atom, shape[0], dtype)
        shape = layer.out_shape(shape)
        layers.append(layer)
    if shape != (1, 1, 1):
        raise ValueError(f"dimension mismatch: architecture ends with shape {shape}, need (1, 1, 1)")
    rng = np.random.default_rng(seed)
    for layer in layers:
        layer.init(rng)
    return ResponseModel(layers, format_arch([l.spec() for l in layers]))


def forward_patch(model: ResponseModel, patch: np.ndarray, train: bool = False):
    """Scalar response and backward cache for one normalized patch."""
    h, caches = model.forward(patch[None] if patch.ndim == 2 else patch, train=train)
    return float(h[0]), caches


def backward_patch(model: ResponseModel, caches: list, upstream: float) -> list[np.ndarray]:
    return model.backward(caches, np.asarray([upstream]))


def window_moments(img: np.ndarray, size: int = PATCH_SIZE):
    """Sliding-window mean and stddev for every size x size window.

    Uses 64-bit integral images so each window costs O(1); returns two
    maps of shape (h - size + 1, w - size + 1).
    """
    im = img.astype(np.float64, copy=False)
    h, w = im.shape
    s1 = np.zeros((h + 1, w + 1))
    s2 = np.zeros((h + 1, w + 1))
    s1[1:, 1:] = im.cumsum(axis=0).cumsum(axis=1)
    s2[1:, 1:] = (im * im).cumsum(axis=0).cumsum(axis=1)

    def box(s):
        return (
            s[size:, size:] - s[:-size, size:] - s[size:, :-size] + s[:-size, :-size]
        )

    n = size * size
    mean = box(s1) / n
    var = np.maximum(box(s2) / n - mean * mean, 0.0)
    return mean, np.sqrt(var)


def forward_dense(model: ResponseModel, img: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Apply the model at every position whose 17x17 support fits.

    Every window is normalized independently, exactly as training-time
    patches are, so the dense map matches forward_patch at each valid
    location. Batchnorm runs in eval mode. Output shape is
    (h - 16, w - 16), offset PATCH_RADIUS from the image origin.
    """
    h, w = img.shape
    if h < PATCH_SIZE or w < PATCH_SIZE:
        raise ValueError(f"image {w}x{h} smaller than {PATCH_SIZE}x{PATCH_SIZE}")
    vh, vw = h - PATCH_SIZE + 1, w - PATCH_SIZE + 1
    mean, std = window_moments(img)
    windows = sliding_window_view(img, (PATCH_SIZE, PATCH_SIZE))
    flat_windows = windows.reshape(vh * vw, PATCH_SIZE, PATCH_SIZE)
    mean = mean.reshape(-1, 1, 1)
    std = std.reshape(-1, 1, 1)
    out = np.empty(vh * vw, dtype=np.float32)
    for i in range(0, vh * vw, chunk):
        raw = flat_windows[i : i + chunk].astype(np.float64)
        m = mean[i : i + chunk]
        s = std[i : i + chunk]
        keep = s[:, 0, 0] >= FLAT_STD
        norm = (raw - m) / np.where(s < FLAT_STD, 1.0, s)
        norm[~keep] = 0.0
        responses, _ = model.forward(norm.astype(model.dtype), train=False)
        out[i : i + chunk] = responses.astype(np.float32)
    return out.reshape(vh, vw)


def _pack_u32(v: int) -> bytes:
    return struct.pack("<I", v)


def save_model(model: ResponseModel, path: str | Path, optimizer_state=None) -> None:
    """Serialize to the QRNK container (float32 payload, CRC32 footer).

    `optimizer_state`, when given, is an AdadeltaState checkpointed in an
    extra section so training can resume exactly.
    """
    blob = bytearray()
    blob += MODEL_MAGIC
    blob += _pack_u32(MODEL_VERSION)
    arch_bytes = model.arch.encode("utf-8")
    blob += _pack_u32(len(arch_bytes))
    blob += arch_bytes
    for layer in model.layers:
        for arr in list(layer.params) + list(layer.buffers):
            blob += arr.astype("<f4").tobytes()
    if optimizer_state is None:
        blob += b"\x00"
    else:
        blob += b"\x01"
        blob += struct.pack("<dd", optimizer_state.rho, optimizer_state.epsilon)
        for arr in optimizer_state.acc_grad_sq + optimizer_state.acc_update_sq:
            blob += arr.astype("<f8").tobytes()
    blob += _pack_u32(zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    atomic_write_bytes(path, bytes(blob))


def load_model(path: str | Path, with_optimizer: bool = False):
    """Load a QRNK model file; inverse of save_model.

    Returns the model, or (model, AdadeltaState | None) when
    `with_optimizer` is set.
    """
    data = Path(path).read_bytes()
    if len(data) < 13 or data[:4] != MODEL_MAGIC:
        raise ValueError("bad model file: wrong magic bytes")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ValueError("bad model file: checksum mismatch")
    (version,) = struct.unpack("<I", data[4:8])
    if version != MODEL_VERSION:
        raise ValueError(
            f"unsupported model file version {version} (this build reads version {MODEL_VERSION})"
        )
    (arch_len,) = struct.unpack("<I", data[8:12])
    pos = 12 + arch_len
    arch = data[12:pos].decode("utf-8")
    model = build_model(arch, seed=0)

    def take(count: int, dtype) -> np.ndarray:
        nonlocal pos
        nbytes = count * np.dtype(dtype).itemsize
        if pos + nbytes > len(data) - 4:
            raise ValueError("bad model file: truncated payload")
        arr = np.frombuffer(data[pos : pos + nbytes], dtype=dtype).copy()
        pos += nbytes
        return arr

    for layer in model.layers:
        for arr in list(layer.params) + list(layer.buffers):
            arr[...] = take(arr.size, "<f4").reshape(arr.shape)

    state = None
    flag = data[pos]
    pos += 1
    if flag == 1:
        from .adadelta import AdadeltaState

        rho, eps = struct.unpack("<dd", data[pos : pos + 16])
        pos += 16
        state = AdadeltaState.for_params(model.params(), rho=rho, epsilon=eps)
        for arr in state.acc_grad_sq + state.acc_update_sq:
            arr[...] = take(arr.size, "<f8").reshape(arr.shape)
    elif flag != 0:
        raise ValueError("bad model file: unknown optimizer section flag")
    if pos != len(data) - 4:
        raise ValueError("bad model file: trailing bytes")
    if with_optimizer:
        return model, state
    return model
