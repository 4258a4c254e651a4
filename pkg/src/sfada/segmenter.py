"""Small encoder-decoder segmenter with hand-written backpropagation.

Graph (channel-last internally, ``B x H x W x C``)::

    enc1  3x3 conv 1->8,  ReLU, 2x2 max-pool          H/2
    enc2  3x3 conv 8->16, ReLU, 2x2 max-pool          H/4
    dec1  2x nearest upsample, 3x3 conv 16->8, ReLU   H/2
    dec2  2x nearest upsample, 3x3 conv 8->8,  ReLU   H     (penultimate)
    head  1x1 conv 8->2                               logits

Everything is float64 so gradients can be checked against finite
differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset, DataError, augment

DEFAULT_CHANNELS = (1, 8, 16, 8, 8, 2)
CE_CLAMP = 1e-12
DICE_EPS = 1e-6
CHECKPOINT_MAGIC = b"SFADASEG"


class NumericError(ArithmeticError):
    """Raised when training produces a non-finite loss."""


def _layer_shapes(channels: Sequence[int]) -> list[tuple[str, tuple[int, ...]]]:
    c_in, c1, c2, c3, c4, n_cls = channels
    return [
        ("enc1_w", (c1, c_in, 3, 3)),
        ("enc1_b", (c1,)),
        ("enc2_w", (c2, c1, 3, 3)),
        ("enc2_b", (c2,)),
        ("dec1_w", (c3, c2, 3, 3)),
        ("dec1_b", (c3,)),
        ("dec2_w", (c4, c3, 3, 3)),
        ("dec2_b", (c4,)),
        ("head_w", (n_cls, c4)),
        ("head_b", (n_cls,)),
    ]


@dataclass
class SegmenterParams:
    """Flat parameter vector plus the channel spec that fixes its layout."""

    flat: np.ndarray
    channels: tuple[int, ...] = DEFAULT_CHANNELS

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.flat = np.asarray(self.flat, dtype=np.float64)
        expected = param_count(self.channels)
        if self.flat.shape != (expected,):
            raise ValueError(f"expected {expected} parameters, got shape {self.flat.shape}")

    def views(self) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for name, shape in _layer_shapes(self.channels):
            size = int(np.prod(shape))
            out[name] = self.flat[pos : pos + size].reshape(shape)
            pos += size
        return out

    def copy(self) -> "SegmenterParams":
        return SegmenterParams(self.flat.copy(), self.channels)

    def __eq__(self, other):
        if not isinstance(other, SegmenterParams):
            return NotImplemented
        return self.channels == other.channels and np.array_equal(self.flat, other.flat)


def param_count(channels: Sequence[int] = DEFAULT_CHANNELS) -> int:
    return sum(int(np.prod(shape)) for _, shape in _layer_shapes(channels))


def init_params(seed: int, channels: Sequence[int] = DEFAULT_CHANNELS) -> SegmenterParams:
    """He initialization: weights ~ N(0, 2/fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in _layer_shapes(channels):
        if name.endswith("_b"):
            parts.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:]))
            parts.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
    return SegmenterParams(np.concatenate([p.ravel() for p in parts]), tuple(channels))


def save_checkpoint(params: SegmenterParams, path) -> None:
    header = CHECKPOINT_MAGIC + struct.pack("<I", len(params.channels))
    header += struct.pack(f"<{len(params.channels)}I", *params.channels)
    header += struct.pack("<Q", params.flat.size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> SegmenterParams:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a segmenter checkpoint")
    (n_ch,) = struct.unpack_from("<I", buf, 8)
    channels = struct.unpack_from(f"<{n_ch}I", buf, 12)
    pos = 12 + 4 * n_ch
    (n,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if len(buf) - pos != 8 * n:
        raise DataError(f"{path}: expected {n} parameters")
    flat = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
    return SegmenterParams(flat, channels)


# --------------------------------------------------------------------------
# layer primitives; activations are laid out (C, B, H, W)
# --------------------------------------------------------------------------

_OFFSETS = [(i, j) for i in range(3) for j in range(3)]


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, B, H, W) -> (9*C, B*H*W), row order (ki, kj, c), zero padding 1."""
    c, b, h, w = x.shape
    cols = np.empty((9, c, b, h, w), dtype=x.dtype)
    for k, (i, j) in enumerate(_OFFSETS):
        dy, dx = i - 1, j - 1
        y0, y1 = max(0, -dy), h - max(0, dy)
        x0, x1 = max(0, -dx), w - max(0, dx)
        dst = cols[k]
        dst[:, :, y0:y1, x0:x1] = x[:, :, y0 + dy : y1 + dy, x0 + dx : x1 + dx]
        if dy:
            dst[:, :, 0 if dy < 0 else h - 1, :] = 0
        if dx:
            dst[:, :, :, 0 if dx < 0 else w - 1] = 0
    return cols.reshape(9 * c, b * h * w)


def _wmat(w: np.ndarray) -> np.ndarray:
    # (Cout, Cin, 3, 3) -> (Cout, 9*Cin) matching _im2col's row order
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _conv3(x: np.ndarray, w: np.ndarray, bias: np.ndarray):
    _, b, h, wd = x.shape
    cols = _im2col(x)
    out = _wmat(w) @ cols
    out += bias[:, None]
    return out.reshape(w.shape[0], b, h, wd), cols


def _conv3_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, need_dx: bool = True):
    c_out, c_in = w.shape[:2]
    d2 = dout.reshape(c_out, -1)
    dw = (cols @ d2.T).T.reshape(c_out, 3, 3, c_in).transpose(0, 3, 1, 2)
    db = d2.sum(axis=1)
    if not need_dx:
        return None, dw, db
    # input gradient = 'same' correlation of dout with the spatially flipped,
    # channel-transposed kernel
    w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    _, b, h, wd = dout.shape
    dx = (_wmat(w_flip) @ _im2col(dout)).reshape(c_in, b, h, wd)
    return dx, dw, db


def _pool_views(x: np.ndarray):
    return x[..., 0::2, 0::2], x[..., 0::2, 1::2], x[..., 1::2, 0::2], x[..., 1::2, 1::2]


def _maxpool(x: np.ndarray):
    a, b, c, d = _pool_views(x)
    return np.maximum(np.maximum(a, b), np.maximum(c, d))


def _maxpool_backward(dout: np.ndarray, x: np.ndarray, out: np.ndarray) -> np.ndarray:
    # gradient goes to the first maximal element in (0,0), (0,1), (1,0), (1,1) order
    dx = np.zeros_like(x)
    taken = np.zeros(out.shape, dtype=bool)
    for view, dview in zip(_pool_views(x), _pool_views(dx)):
        sel = (view == out) & ~taken
        dview[...] = np.where(sel, dout, 0)
        taken |= sel
    return dx


def _upsample(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def _upsample_backward(dout: np.ndarray) -> np.ndarray:
    c, b, h, w = dout.shape
    return dout.reshape(c, b, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _forward_batch(params: SegmenterParams, x: np.ndarray, keep: bool, dtype=np.float64):
    """x: (B, H, W) images. Returns (2,B,H,W) logits and probs, (C,B,H,W)
    penultimate features, and the backward cache when ``keep``."""
    if x.shape[1] % 4 or x.shape[2] % 4:
        raise DataError(f"image sides must be divisible by 4, got {x.shape[1:]}")
    p = {k: v.astype(dtype, copy=False) for k, v in params.views().items()}
    x = x.astype(dtype, copy=False)[None]
    a1, cols1 = _conv3(x, p["enc1_w"], p["enc1_b"])
    r1 = np.maximum(a1, 0)
    p1 = _maxpool(r1)
    a2, cols2 = _conv3(p1, p["enc2_w"], p["enc2_b"])
    r2 = np.maximum(a2, 0)
    p2 = _maxpool(r2)
    a3, cols3 = _conv3(_upsample(p2), p["dec1_w"], p["dec1_b"])
    r3 = np.maximum(a3, 0)
    a4, cols4 = _conv3(_upsample(r3), p["dec2_w"], p["dec2_b"])
    r4 = np.maximum(a4, 0)
    c4 = r4.shape[0]
    logits = (p["head_w"] @ r4.reshape(c4, -1) + p["head_b"][:, None]).reshape((-1,) + r4.shape[1:])
    probs = _softmax(logits)
    cache = None
    if keep:
        cache = dict(
            a1=a1, r1=r1, p1=p1, cols1=cols1, a2=a2, r2=r2, p2=p2, cols2=cols2,
            a3=a3, cols3=cols3, a4=a4, cols4=cols4, params=p,
        )
    return logits, probs, r4, cache


@dataclass
class Prediction:
    """Per-image network output, channel-first grids."""

    logits: np.ndarray       # 2 x H x W
    probs: np.ndarray        # 2 x H x W
    mask: np.ndarray         # H x W, uint8
    penultimate: np.ndarray  # C x H x W

    @property
    def foreground(self) -> np.ndarray:
        return self.probs[1]


def _hard_mask(logits: np.ndarray) -> np.ndarray:
    # ties go to background
    return (logits[1] > logits[0]).astype(np.uint8)


def forward_many(params: SegmenterParams, images: Sequence[np.ndarray], chunk: int = 16) -> list[Prediction]:
    out = []
    for start in range(0, len(images), chunk):
        x = np.stack([np.asarray(im, dtype=np.float64) for im in images[start : start + chunk]])
        logits, probs, r4, _ = _forward_batch(params, x, keep=False)
        for i in range(x.shape[0]):
            out.append(
                Prediction(
                    logits=logits[:, i].copy(),
                    probs=probs[:, i].copy(),
                    mask=_hard_mask(logits[:, i]),
                    penultimate=r4[:, i].copy(),
                )
            )
    return out


def forward(params: SegmenterParams, img: np.ndarray) -> Prediction:
    return forward_many(params, [img])[0]


def predict_mask(params: SegmenterParams, img: np.ndarray) -> Prediction:
    """Inference entry point; same result as :func:`forward`."""
    return forward(params, img)


def predict_dataset(params: SegmenterParams, ds: Dataset) -> list[Prediction]:
    return forward_many(params, [s.image for s in ds])


# --------------------------------------------------------------------------
# loss and gradient
# --------------------------------------------------------------------------

def _loss_terms(probs_fg: np.ndarray, probs_bg: np.ndarray, y: np.ndarray):
    """Per-sample composite loss and its derivative w.r.t. (p_bg, p_fg).

    Arrays are (B, N) flattened over pixels.
    """
    n = y.shape[1]
    y = y.astype(probs_fg.dtype)
    p_bg_c = np.maximum(probs_bg, CE_CLAMP)
    p_fg_c = np.maximum(probs_fg, CE_CLAMP)
    ce = -(y * np.log(p_fg_c) + (1 - y) * np.log(p_bg_c)).sum(axis=1) / n
    d_fg = np.where(probs_fg >= CE_CLAMP, -y / p_fg_c, 0.0) / n
    d_bg = np.where(probs_bg >= CE_CLAMP, -(1 - y) / p_bg_c, 0.0) / n

    inter = (y * probs_fg).sum(axis=1)
    denom_raw = (y * y).sum(axis=1) + (probs_fg * probs_fg).sum(axis=1)
    denom = denom_raw + DICE_EPS
    empty = denom_raw == 0
    dice = np.where(empty, 0.0, 1.0 - 2.0 * inter / denom)
    d_dice = -2.0 * y / denom[:, None] + 4.0 * (inter / denom**2)[:, None] * probs_fg
    d_dice[empty] = 0.0
    return ce + dice, d_bg, d_fg + d_dice


def composite_loss(pred: Prediction, truth: np.ndarray) -> float:
    """Cross-entropy plus soft Dice on the foreground probability."""
    truth = np.asarray(truth)
    if truth.shape != pred.probs.shape[1:]:
        raise DataError(f"truth shape {truth.shape} != prediction shape {pred.probs.shape[1:]}")
    loss, _, _ = _loss_terms(pred.probs[1].reshape(1, -1), pred.probs[0].reshape(1, -1), truth.reshape(1, -1))
    return float(loss[0])


def loss_and_gradient(params: SegmenterParams, images: np.ndarray, masks: np.ndarray, dtype=np.float64):
    """Mean composite loss over a batch and its exact gradient (flat float64).

    ``dtype`` selects the arithmetic precision of the pass itself.
    """
    images = np.asarray(images)
    masks = np.asarray(masks)
    if images.ndim != 3 or masks.shape != images.shape:
        raise DataError(f"batch shape mismatch: images {images.shape}, masks {masks.shape}")
    b = images.shape[0]
    logits, probs, r4, c = _forward_batch(params, images, keep=True, dtype=dtype)
    p = c["params"]
    losses, d_bg, d_fg = _loss_terms(probs[1].reshape(b, -1), probs[0].reshape(b, -1), masks.reshape(b, -1))
    dp = np.stack([d_bg, d_fg]).reshape(probs.shape) / b
    # softmax backward
    dz = probs * (dp - (dp * probs).sum(axis=0, keepdims=True))

    g = {}
    c4 = r4.shape[0]
    dz2 = dz.reshape(dz.shape[0], -1)
    g["head_w"] = dz2 @ r4.reshape(c4, -1).T
    g["head_b"] = dz2.sum(axis=1)
    dr4 = (p["head_w"].T @ dz2).reshape(r4.shape)
    da4 = dr4 * (c["a4"] > 0)
    du2, g["dec2_w"], g["dec2_b"] = _conv3_backward(da4, c["cols4"], p["dec2_w"])
    da3 = _upsample_backward(du2) * (c["a3"] > 0)
    du1, g["dec1_w"], g["dec1_b"] = _conv3_backward(da3, c["cols3"], p["dec1_w"])
    dr2 = _maxpool_backward(_upsample_backward(du1), c["r2"], c["p2"])
    da2 = dr2 * (c["a2"] > 0)
    dp1, g["enc2_w"], g["enc2_b"] = _conv3_backward(da2, c["cols2"], p["enc2_w"])
    da1 = _maxpool_backward(dp1, c["r1"], c["p1"]) * (c["a1"] > 0)
    _, g["enc1_w"], g["enc1_b"] = _conv3_backward(da1, c["cols1"], p["enc1_w"], need_dx=False)

    flat = np.concatenate([g[name].ravel() for name, _ in _layer_shapes(params.channels)])
    return float(losses.astype(np.float64).mean()), flat.astype(np.float64)


def gradient(params: SegmenterParams, batch: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    if not batch:
        raise DataError("gradient needs a non-empty batch")
    images = [np.asarray(im) for im, _ in batch]
    masks = [np.asarray(m) for _, m in batch]
    shape = images[0].shape
    for im, m in zip(images, masks):
        if im.shape != shape or m.shape != shape:
            raise DataError(f"inconsistent batch shapes: {im.shape} / {m.shape}, expected {shape}")
    return loss_and_gradient(params, np.stack(images), np.stack(masks))[1]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    lr0: float = 0.03
    decay_power: float = 0.9
    seed: int = 0
    augment: bool = True
    precision: str = "float32"

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    if not 0 <= iteration < cfg.iterations:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.iterations})")
    return cfg.lr0 * (1.0 - iteration / cfg.iterations) ** cfg.decay_power


def train(
    params: SegmenterParams,
    ds: Dataset,
    cfg: TrainConfig,
    callback: Optional[Callable[[int, SegmenterParams], None]] = None,
    callback_every: int = 0,
) -> tuple[SegmenterParams, list[float]]:
    """Plain minibatch SGD on the composite loss.

    ``callback(step, params)`` fires after every ``callback_every`` updates
    and after the final one; ``step`` counts completed updates.
    """
    missing = [s.id for s in ds if s.truth is None]
    if missing:
        raise DataError(f"training sample {missing[0]} has no truth mask")
    if cfg.batch_size > len(ds):
        raise DataError(f"batch_size {cfg.batch_size} exceeds dataset size {len(ds)}")
    rng = np.random.default_rng(cfg.seed)
    params = params.copy()
    trace = []
    for it in range(cfg.iterations):
        idx = rng.choice(len(ds), size=cfg.batch_size, replace=False)
        samples = [ds[int(i)] for i in idx]
        if cfg.augment:
            samples = [augment(s, rng) for s in samples]
        images = np.stack([s.image for s in samples])
        masks = np.stack([s.truth for s in samples])
        loss, grad = loss_and_gradient(params, images, masks, dtype=np.dtype(cfg.precision))
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite loss at iteration {it}")
        params.flat -= lr_at(it, cfg) * grad
        trace.append(loss)
        step = it + 1
        if callback is not None and (
            step == cfg.iterations or (callback_every and step % callback_every == 0)
        ):
            callback(step, params)
    return params, trace
