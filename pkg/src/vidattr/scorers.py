"""Differentiable scorers: the contract, a trainable toy 3D CNN, and an
analytic oracle whose discriminative region is known exactly.

The toy network uses hand-derived adjoints per layer (the topology is
fixed, so no general tape is needed); all arithmetic is float64 so the
analytic gradients can be checked against central finite differences.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContractError, FormatError, ParameterError, UnsupportedMethodError
from .tensor_ops import as_video

MODEL_MAGIC = b"VATM"
MODEL_VERSION = 1


class Scorer:
    """Maps a (T, H, W, C) video to softmax class probabilities.

    Subclasses implement ``score`` and ``input_gradient``; batched variants
    default to loops and may be overridden for speed. ``activation_tap`` is
    optional and only required by activation-based attribution.
    """

    num_classes: int
    input_shape: tuple | None = None  # (T, H, W, C), or None for any

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = as_video(x)
        if self.input_shape is not None and tuple(x.shape) != tuple(self.input_shape):
            raise ContractError(
                f"scorer expects input shape {self.input_shape}, got {x.shape}"
            )
        return x

    def _check_class(self, c: int) -> int:
        c = int(c)
        if not 0 <= c < self.num_classes:
            raise ParameterError(f"class index {c} outside [0, {self.num_classes})")
        return c

    def score(self, x) -> np.ndarray:
        raise NotImplementedError

    def score_batch(self, xs) -> np.ndarray:
        return np.stack([self.score(x) for x in xs])

    def input_gradient(self, x, c: int) -> np.ndarray:
        raise NotImplementedError

    def input_gradient_batch(self, xs, c: int) -> np.ndarray:
        return np.stack([self.input_gradient(x, c) for x in xs])

    def activation_tap(self, x, c: int):
        raise UnsupportedMethodError(f"{type(self).__name__} exposes no activation tap")


def logistic(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class OracleTubeScorer(Scorer):
    """Two-class analytic scorer driven by the mean intensity inside a tube.

    The tube is a per-frame axis-aligned box (inclusive bounds). Class-1
    probability is logistic((mean inside tube - 0.5) / temperature), so the
    input gradient is a known constant inside the tube and exactly zero
    outside it.
    """

    num_classes = 2

    def __init__(self, boxes, temperature: float = 0.15):
        if temperature <= 0:
            raise ParameterError(f"temperature must be > 0, got {temperature}")
        self.boxes = [tuple(int(v) for v in b) for b in boxes]
        for b in self.boxes:
            i0, i1, j0, j1 = b
            if i0 > i1 or j0 > j1 or min(b) < 0:
                raise ParameterError(f"bad box {b}")
        self.temperature = float(temperature)
        self.num_frames = len(self.boxes)

    def tube_mask(self, frame_hw) -> np.ndarray:
        """Binary (T, H, W) indicator of the tube."""
        h, w = frame_hw
        m = np.zeros((self.num_frames, h, w), dtype=np.float64)
        for t, (i0, i1, j0, j1) in enumerate(self.boxes):
            if i1 >= h or j1 >= w:
                raise ContractError(f"box {self.boxes[t]} outside {h}x{w} frame")
            m[t, i0:i1 + 1, j0:j1 + 1] = 1.0
        return m

    def _tube_stats(self, x: np.ndarray):
        sel = self.tube_mask(x.shape[1:3]).astype(bool)
        count = int(sel.sum()) * x.shape[3]
        mean = float(x[sel].mean())
        return sel, count, mean

    def score(self, x) -> np.ndarray:
        x = self._check_input(x)
        if x.shape[0] != self.num_frames:
            raise ContractError(f"expected {self.num_frames} frames, got {x.shape[0]}")
        _, _, mean = self._tube_stats(x)
        p1 = float(logistic((mean - 0.5) / self.temperature))
        return np.array([1.0 - p1, p1], dtype=np.float64)

    def score_batch(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        sel = self.tube_mask(xs.shape[2:4]).astype(bool)
        means = xs[:, sel, :].mean(axis=(1, 2))
        p1 = logistic((means - 0.5) / self.temperature)
        return np.stack([1.0 - p1, p1], axis=1)

    def input_gradient(self, x, c: int) -> np.ndarray:
        x = self._check_input(x)
        c = self._check_class(c)
        sel, count, mean = self._tube_stats(x)
        z = (mean - 0.5) / self.temperature
        p1 = float(logistic(z))
        slope = p1 * (1.0 - p1) / (count * self.temperature)
        if c == 0:
            slope = -slope
        g = np.zeros_like(x)
        g[sel] = slope
        return g


def _relu(a):
    return np.maximum(a, 0.0)


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _conv_same(x, w, b, strides):
    """Zero-pad-1 3-d convolution over (B,T,H,W,Cin) with per-axis strides."""
    st, sh, sw = strides
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    bsz, tp, hp, wp, _ = xp.shape
    to = (tp - 3) // st + 1
    ho = (hp - 3) // sh + 1
    wo = (wp - 3) // sw + 1
    out = np.zeros((bsz, to, ho, wo, w.shape[-1]), dtype=np.float64)
    for a in range(3):
        for bb in range(3):
            for cc in range(3):
                sl = xp[:, a:a + st * (to - 1) + 1:st,
                        bb:bb + sh * (ho - 1) + 1:sh,
                        cc:cc + sw * (wo - 1) + 1:sw, :]
                out += sl @ w[a, bb, cc]
    return out + b, xp


def _conv_same_backward(xp, w, dout, strides, need_dx: bool):
    st, sh, sw = strides
    _, to, ho, wo, _ = dout.shape
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp) if need_dx else None
    for a in range(3):
        for bb in range(3):
            for cc in range(3):
                sl = xp[:, a:a + st * (to - 1) + 1:st,
                        bb:bb + sh * (ho - 1) + 1:sh,
                        cc:cc + sw * (wo - 1) + 1:sw, :]
                dw[a, bb, cc] = np.einsum("btijc,btijf->cf", sl, dout, optimize=True)
                if need_dx:
                    dxp[:, a:a + st * (to - 1) + 1:st,
                        bb:bb + sh * (ho - 1) + 1:sh,
                        cc:cc + sw * (wo - 1) + 1:sw, :] += dout @ w[a, bb, cc].T
    db = dout.sum(axis=(0, 1, 2, 3))
    dx = dxp[:, 1:-1, 1:-1, 1:-1, :] if need_dx else None
    return dw, db, dx


class ToyConv3dScorer(Scorer):
    """Small fixed-topology 3D CNN video classifier.

    conv(3x3x3, spatial stride 2) + ReLU -> spatial average pool ->
    conv(3x3x3) + ReLU (activation tap) -> global average pool -> linear ->
    softmax. Parameters are float64; initialization is deterministic given
    a seed.
    """

    def __init__(self, input_shape=(16, 64, 64, 1), num_classes: int = 4,
                 filters=(8, 16), pool: int = 4, seed: int = 0):
        t, h, w, c = input_shape
        if c not in (1, 3):
            raise ParameterError(f"channels must be 1 or 3, got {c}")
        if num_classes < 2:
            raise ParameterError(f"need >= 2 classes, got {num_classes}")
        self.input_shape = (int(t), int(h), int(w), int(c))
        self.num_classes = int(num_classes)
        self.filters = (int(filters[0]), int(filters[1]))
        self.pool = int(pool)
        self.seed = int(seed)
        f1, f2 = self.filters
        rng = np.random.default_rng(seed)
        self.w1 = rng.normal(0.0, np.sqrt(2.0 / (27 * c)), (3, 3, 3, c, f1))
        self.b1 = np.zeros(f1)
        self.w2 = rng.normal(0.0, np.sqrt(2.0 / (27 * f1)), (3, 3, 3, f1, f2))
        self.b2 = np.zeros(f2)
        self.wl = rng.normal(0.0, np.sqrt(1.0 / f2), (f2, self.num_classes))
        self.bl = np.zeros(self.num_classes)

    # -- parameter plumbing -------------------------------------------------

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2, self.wl, self.bl]

    def set_parameters(self, params):
        names = ["w1", "b1", "w2", "b2", "wl", "bl"]
        for name, p in zip(names, params):
            cur = getattr(self, name)
            if p.shape != cur.shape:
                raise ContractError(f"parameter {name} shape {p.shape} != {cur.shape}")
            setattr(self, name, np.asarray(p, dtype=np.float64))

    # -- forward / backward -------------------------------------------------

    def _forward(self, xb: np.ndarray):
        pool = self.pool
        a1, xp = _conv_same(xb, self.w1, self.b1, (1, 2, 2))
        r1 = _relu(a1)
        _, _, h1, w1, _ = r1.shape
        hp, wp = h1 // pool, w1 // pool
        p1 = r1[:, :, :hp * pool, :wp * pool, :].reshape(
            r1.shape[0], r1.shape[1], hp, pool, wp, pool, r1.shape[4]
        ).mean(axis=(3, 5))
        a2, pp = _conv_same(p1, self.w2, self.b2, (1, 1, 1))
        r2 = _relu(a2)
        feat = r2.mean(axis=(1, 2, 3))
        logits = feat @ self.wl + self.bl
        probs = _softmax(logits)
        cache = (xp, a1, r1.shape, pp, a2, r2, feat)
        return probs, logits, cache

    def _backward(self, cache, dlogits: np.ndarray, need_dx: bool):
        pool = self.pool
        xp, a1, r1_shape, pp, a2, r2, feat = cache
        dwl = feat.T @ dlogits
        dbl = dlogits.sum(axis=0)
        dfeat = dlogits @ self.wl.T
        n2 = r2.shape[1] * r2.shape[2] * r2.shape[3]
        dr2 = np.broadcast_to(
            dfeat[:, None, None, None, :] / n2, r2.shape
        )
        da2 = dr2 * (a2 > 0)
        dw2, db2, dp1 = _conv_same_backward(pp, self.w2, da2, (1, 1, 1), True)
        bsz, tt, hp, wp, f1 = dp1.shape
        dr1 = np.zeros((bsz, tt) + r1_shape[2:], dtype=np.float64)
        expand = np.repeat(np.repeat(dp1, pool, axis=2), pool, axis=3) / (pool * pool)
        dr1[:, :, :hp * pool, :wp * pool, :] = expand
        da1 = dr1 * (a1 > 0)
        dw1, db1, dx = _conv_same_backward(xp, self.w1, da1, (1, 2, 2), need_dx)
        grads = [dw1, db1, dw2, db2, dwl, dbl]
        return dx, grads

    # -- public API ----------------------------------------------------------

    def score(self, x) -> np.ndarray:
        x = self._check_input(x)
        probs, _, _ = self._forward(x[None])
        return probs[0]

    def score_batch(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        probs, _, _ = self._forward(xs)
        return probs

    def _class_grad_logits(self, probs: np.ndarray, c: int) -> np.ndarray:
        # d softmax_c / d logits = p_c * (onehot_c - p)
        d = -probs * probs[:, c:c + 1]
        d[:, c] += probs[:, c]
        return d

    def input_gradient(self, x, c: int) -> np.ndarray:
        x = self._check_input(x)
        return self.input_gradient_batch(x[None], c)[0]

    def input_gradient_batch(self, xs, c: int) -> np.ndarray:
        c = self._check_class(c)
        xs = np.asarray(xs, dtype=np.float64)
        probs, _, cache = self._forward(xs)
        dlogits = self._class_grad_logits(probs, c)
        dx, _ = self._backward(cache, dlogits, need_dx=True)
        return dx

    def activation_tap(self, x, c: int):
        """Activations at the last conv layer and dPhi_c w.r.t. them."""
        c = self._check_class(c)
        x = self._check_input(x)
        probs, _, cache = self._forward(x[None])
        r2, feat = cache[5], cache[6]
        dlogits = self._class_grad_logits(probs, c)
        dfeat = dlogits @ self.wl.T
        n2 = r2.shape[1] * r2.shape[2] * r2.shape[3]
        dr2 = np.broadcast_to(dfeat[:, None, None, None, :] / n2, r2.shape)
        return r2[0].copy(), dr2[0].copy()


def train_toy(videos, labels, epochs: int, lr: float = 0.01, momentum: float = 0.9,
              batch_size: int = 4, seed: int = 0, num_classes: int | None = None,
              filters=(8, 16), pool: int = 4) -> ToyConv3dScorer:
    """Train a ToyConv3dScorer with SGD + momentum on cross-entropy.

    Deterministic given ``seed`` (it drives both the parameter init and the
    epoch shuffles). The trained scorer carries its final training-set
    accuracy in ``train_accuracy``.
    """
    videos = np.asarray(videos, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if videos.ndim != 5 or videos.shape[0] == 0:
        raise ParameterError(f"need a non-empty (N,T,H,W,C) video array, got {videos.shape}")
    if labels.shape != (videos.shape[0],):
        raise ParameterError("labels must align with videos")
    if epochs < 0:
        raise ParameterError(f"epochs must be >= 0, got {epochs}")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    model = ToyConv3dScorer(videos.shape[1:], num_classes, filters=filters,
                            pool=pool, seed=seed)
    rng = np.random.default_rng(seed + 1)
    vel = [np.zeros_like(p) for p in model.parameters()]
    n = videos.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = videos[idx], labels[idx]
            probs, _, cache = model._forward(xb)
            dlogits = probs.copy()
            dlogits[np.arange(len(idx)), yb] -= 1.0
            dlogits /= len(idx)
            _, grads = model._backward(cache, dlogits, need_dx=False)
            params = model.parameters()
            for p, g, v in zip(params, grads, vel):
                v *= momentum
                v += g
                p -= lr * v
    model.train_accuracy = accuracy(model, videos, labels)
    return model


def accuracy(scorer: Scorer, videos, labels, chunk: int = 16) -> float:
    videos = np.asarray(videos, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    hits = 0
    for start in range(0, videos.shape[0], chunk):
        probs = scorer.score_batch(videos[start:start + chunk])
        hits += int((probs.argmax(axis=1) == labels[start:start + chunk]).sum())
    return hits / videos.shape[0]


# -- persistence --------------------------------------------------------------

def save_model(path, model: ToyConv3dScorer) -> None:
    """Write a ToyConv3dScorer to a little-endian binary file."""
    t, h, w, c = model.input_shape
    f1, f2 = model.filters
    header = struct.pack(
        "<4sII", MODEL_MAGIC, MODEL_VERSION, 8
    ) + struct.pack("<8I", t, h, w, c, model.num_classes, f1, f2, model.pool)
    flat = np.concatenate([p.ravel() for p in model.parameters()])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.astype("<f8").tobytes())


def load_model(path) -> ToyConv3dScorer:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != MODEL_MAGIC:
        raise FormatError("bad magic: not a model file")
    version, ndims = struct.unpack("<II", data[4:12])
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    if ndims != 8 or len(data) < 12 + 32 + 8:
        raise FormatError("bad header: layer dims truncated")
    t, h, w, c, k, f1, f2, pool = struct.unpack("<8I", data[12:44])
    (count,) = struct.unpack("<Q", data[44:52])
    payload = data[52:]
    if len(payload) != count * 8:
        raise FormatError(f"bad payload: expected {count * 8} bytes, got {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    model = ToyConv3dScorer((t, h, w, c), k, filters=(f1, f2), pool=pool, seed=0)
    shapes = [p.shape for p in model.parameters()]
    sizes = [int(np.prod(s)) for s in shapes]
    if sum(sizes) != count:
        raise FormatError(f"bad dims: parameter count {count} != architecture {sum(sizes)}")
    params, ofs = [], 0
    for s, size in zip(shapes, sizes):
        params.append(flat[ofs:ofs + size].reshape(s))
        ofs += size
    model.set_parameters(params)
    return model
