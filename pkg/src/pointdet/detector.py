"""A tiny fully-convolutional detector with hand-written backprop.

Three same-padded 3x3 conv layers (1->8->16->16 channels, ReLU) feed two
1x1 heads: a logistic center head producing a probability heatmap and a
linear size head producing log-sizes. The stride-4 variant inserts two
stride-2 3x3 layers before the heads and adds a 2-channel logistic offset
head. Everything is float64 numpy; forward caches activations so backward
can produce exact analytic parameter gradients. Parameter count stays
below 10^4 in both modes.

Checkpoint byte layout (little-endian):
    0..3    magic b"PDC1"
    4..7    uint32 header byte length N
    8..8+N  UTF-8 JSON header: {"version", "stride", "seed", "epoch",
            "extra", "tensors": [{"name", "shape"}...],
            "adam": {"step", "lr", "beta1", "beta2", "eps"} | null,
            "rng_state": {...} | null}
    then, for each tensor in header order, its float64 values;
    then the Adam first-moment arrays in the same order, then the
    second-moment arrays (both present only when "adam" is non-null).
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadShape, ShapeMismatch, StaleCache

CHECKPOINT_MAGIC = b"PDC1"
CENTER_BIAS_PRIOR = 0.01  # initial heatmap level; keeps the dense negative
                          # class from exploding the focal loss early


def _conv_names(stride: int) -> list[str]:
    names = ["w1", "b1", "w2", "b2", "w3", "b3"]
    if stride == 4:
        names += ["wd1", "bd1", "wd2", "bd2"]
    names += ["wc", "bc", "ws", "bs"]
    if stride == 4:
        names += ["wo", "bo"]
    return names


@dataclass
class DetectorParams:
    stride: int
    seed: int
    tensors: dict[str, np.ndarray]
    order: list[str] = field(default_factory=list)
    version: int = 0  # bumped by every optimizer step; guards stale caches

    @classmethod
    def init(cls, seed: int = 0, stride: int = 1,
             dtype=np.float64) -> "DetectorParams":
        """Seeded He-init weights; float32 halves training cost when exact
        double-precision gradients are not needed."""
        if stride not in (1, 4):
            raise ValueError("stride must be 1 or 4")
        rng = np.random.default_rng(seed)
        dtype = np.dtype(dtype)

        def he(shape, fan_in):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)

        def zeros(n):
            return np.zeros(n, dtype=dtype)

        t = {
            "w1": he((8, 1, 3, 3), 9), "b1": zeros(8),
            "w2": he((16, 8, 3, 3), 72), "b2": zeros(16),
            "w3": he((16, 16, 3, 3), 144), "b3": zeros(16),
        }
        if stride == 4:
            t["wd1"] = he((16, 16, 3, 3), 144)
            t["bd1"] = zeros(16)
            t["wd2"] = he((16, 16, 3, 3), 144)
            t["bd2"] = zeros(16)
        t["wc"] = he((1, 16), 16)
        t["bc"] = np.full(1, np.log(CENTER_BIAS_PRIOR / (1.0 - CENTER_BIAS_PRIOR)),
                          dtype=dtype)
        t["ws"] = he((1, 16), 16)
        t["bs"] = zeros(1)
        if stride == 4:
            t["wo"] = he((2, 16), 16)
            t["bo"] = zeros(2)
        return cls(stride=stride, seed=seed, tensors=t, order=_conv_names(stride))

    @property
    def dtype(self):
        return self.tensors["w1"].dtype

    def param_count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


@dataclass
class Prediction:
    heatmap: np.ndarray            # (B, h, w) in (0, 1)
    size_map: np.ndarray           # (B, h, w), log-size
    offset_map: np.ndarray | None  # (B, 2, h, w) in (0, 1), stride 4 only


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _im2col(x: np.ndarray, stride: int):
    """(B, C, H, W) -> column matrix (B*Ho*Wo, C*9) for a padded 3x3 conv."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    _, _, ho, wo, _, _ = win.shape
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b * ho * wo, c * 9), (ho, wo)


def _conv3_forward(x, w, bias, stride):
    b = x.shape[0]
    f = w.shape[0]
    cols, (ho, wo) = _im2col(x, stride)
    out = cols @ np.ascontiguousarray(w.reshape(f, -1).T) + bias
    return out.reshape(b, ho, wo, f).transpose(0, 3, 1, 2), cols


def _conv3_backward(dout, cols, x_shape, w, stride):
    b, c, h, w_in = x_shape
    f = w.shape[0]
    _, _, ho, wo = dout.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    if stride == 1:
        # dx for a same-padded unit-stride conv is itself a same-padded
        # correlation of dout with the spatially flipped, channel-swapped
        # kernel; one im2col matmul moves far fewer bytes than a col2im
        # scatter on this memory-bound path.
        cols_d, _ = _im2col(dout, 1)
        wflip = np.ascontiguousarray(
            w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, f * 9)
        dx = (cols_d @ wflip.T).reshape(b, h, w_in, c).transpose(0, 3, 1, 2)
        return dw, db, dx
    dcols = (dmat @ w.reshape(f, -1)).reshape(b, ho, wo, c, 3, 3)
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # (B, C, 3, 3, Ho, Wo)
    dxp = np.zeros((b, c, h + 2, w_in + 2), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, i, j]
    return dw, db, dxp[:, :, 1:1 + h, 1:1 + w_in]


def _head_forward(feat, w, bias):
    return np.einsum("bchw,fc->bfhw", feat, w) + bias[None, :, None, None]


def _head_backward(dz, feat, w):
    dw = np.einsum("bfhw,bchw->fc", dz, feat)
    db = dz.sum(axis=(0, 2, 3))
    dfeat = np.einsum("bfhw,fc->bchw", dz, w)
    return dw, db, dfeat


def forward(params: DetectorParams, image: np.ndarray):
    """Run the detector; returns (Prediction, cache for backward).

    ``image`` is (H, W) or (B, H, W) of intensities in [0, 1]. Output maps
    keep the batch dimension of the input (added if absent). Dimensions
    must be at least 8 and, in stride-4 mode, divisible by 4.
    """
    img = np.asarray(image, dtype=params.dtype)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    if img.ndim != 3:
        raise BadShape(f"expected (H, W) or (B, H, W), got {img.shape}")
    _, h, w = img.shape
    if h < 8 or w < 8:
        raise BadShape("image dimensions must be at least 8")
    if params.stride == 4 and (h % 4 or w % 4):
        raise BadShape("stride-4 mode needs dimensions divisible by 4")

    t = params.tensors
    x = img[:, None]
    z1, cols1 = _conv3_forward(x, t["w1"], t["b1"], 1)
    a1 = np.maximum(z1, 0.0)
    z2, cols2 = _conv3_forward(a1, t["w2"], t["b2"], 1)
    a2 = np.maximum(z2, 0.0)
    z3, cols3 = _conv3_forward(a2, t["w3"], t["b3"], 1)
    a3 = np.maximum(z3, 0.0)
    cache = {"x_shape": x.shape, "cols1": cols1, "a1": a1, "cols2": cols2,
             "a2": a2, "cols3": cols3, "a3": a3, "token": params.version,
             "squeeze": squeeze}
    feat = a3
    if params.stride == 4:
        zd1, colsd1 = _conv3_forward(a3, t["wd1"], t["bd1"], 2)
        d1 = np.maximum(zd1, 0.0)
        zd2, colsd2 = _conv3_forward(d1, t["wd2"], t["bd2"], 2)
        d2 = np.maximum(zd2, 0.0)
        cache.update(colsd1=colsd1, d1=d1, colsd2=colsd2, d2=d2)
        feat = d2
    cache["feat"] = feat
    heat = _sigmoid(_head_forward(feat, t["wc"], t["bc"]))[:, 0]
    size = _head_forward(feat, t["ws"], t["bs"])[:, 0]
    offset = None
    if params.stride == 4:
        offset = _sigmoid(_head_forward(feat, t["wo"], t["bo"]))
    cache["heat"] = heat
    cache["offset"] = offset
    pred = Prediction(heatmap=heat, size_map=size, offset_map=offset)
    if squeeze:
        pred = Prediction(heatmap=heat[0], size_map=size[0],
                          offset_map=None if offset is None else offset[0])
    return pred, cache


def backward(params: DetectorParams, cache: dict, d_heatmap: np.ndarray,
             d_size_map: np.ndarray, d_offset_map: np.ndarray | None = None):
    """Parameter gradients from loss gradients on the predicted maps.

    The loss gradients are taken w.r.t. the post-squash maps (probabilities
    for heatmap/offsets, raw values for sizes), matching what the loss
    kernels return.
    """
    if cache.get("token") != params.version:
        raise StaleCache("cache was produced by a different parameter version")
    t = params.tensors
    dh = np.asarray(d_heatmap, dtype=np.float64)
    ds = np.asarray(d_size_map, dtype=np.float64)
    if cache["squeeze"]:
        dh, ds = dh[None], ds[None]
        if d_offset_map is not None:
            d_offset_map = np.asarray(d_offset_map)[None]

    heat = cache["heat"]
    dz_c = (dh.astype(params.dtype) * heat * (1.0 - heat))[:, None]
    dz_s = ds.astype(params.dtype)[:, None]
    feat = cache["feat"]
    grads = {}
    grads["wc"], grads["bc"], dfeat = _head_backward(dz_c, feat, t["wc"])
    dws, dbs, dfeat_s = _head_backward(dz_s, feat, t["ws"])
    grads["ws"], grads["bs"] = dws, dbs
    dfeat += dfeat_s
    if params.stride == 4:
        off = cache["offset"]
        dz_o = (np.zeros_like(off) if d_offset_map is None
                else np.asarray(d_offset_map, dtype=np.float64) * off * (1.0 - off))
        grads["wo"], grads["bo"], dfeat_o = _head_backward(dz_o, cache["feat"], t["wo"])
        dfeat += dfeat_o
        dd2 = dfeat * (cache["d2"] > 0)
        grads["wd2"], grads["bd2"], dd1 = _conv3_backward(
            dd2, cache["colsd2"], cache["d1"].shape, t["wd2"], 2)
        dd1 *= cache["d1"] > 0
        grads["wd1"], grads["bd1"], dfeat = _conv3_backward(
            dd1, cache["colsd1"], cache["a3"].shape, t["wd1"], 2)

    da3 = dfeat * (cache["a3"] > 0)
    grads["w3"], grads["b3"], da2 = _conv3_backward(
        da3, cache["cols3"], cache["a2"].shape, t["w3"], 1)
    da2 *= cache["a2"] > 0
    grads["w2"], grads["b2"], da1 = _conv3_backward(
        da2, cache["cols2"], cache["a1"].shape, t["w2"], 1)
    da1 *= cache["a1"] > 0
    grads["w1"], grads["b1"], _ = _conv3_backward(
        da1, cache["cols1"], cache["x_shape"], t["w1"], 1)
    return grads


@dataclass
class OptimizerState:
    lr: float = 7.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: DetectorParams, lr: float = 7.5e-4) -> "OptimizerState":
        return cls(lr=lr,
                   m={k: np.zeros_like(p) for k, p in params.tensors.items()},
                   v={k: np.zeros_like(p) for k, p in params.tensors.items()})


def step(params: DetectorParams, grads: dict[str, np.ndarray],
         opt: OptimizerState) -> None:
    """One Adam update, in place; bumps params.version."""
    opt.step_count += 1
    t = opt.step_count
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    params.version += 1


def save_checkpoint(path, params: DetectorParams, opt: OptimizerState | None = None,
                    epoch: int = 0, rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    header = {
        "version": 1,
        "stride": params.stride,
        "seed": params.seed,
        "epoch": epoch,
        "param_version": params.version,
        "dtype": params.dtype.name,
        "extra": extra or {},
        "tensors": [{"name": n, "shape": list(params.tensors[n].shape)}
                    for n in params.order],
        "adam": None if opt is None else {
            "step": opt.step_count, "lr": opt.lr, "beta1": opt.beta1,
            "beta2": opt.beta2, "eps": opt.eps},
        "rng_state": rng_state,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in params.order:
            f.write(np.ascontiguousarray(params.tensors[n], dtype="<f8").tobytes())
        if opt is not None:
            for n in params.order:
                f.write(np.ascontiguousarray(opt.m[n], dtype="<f8").tobytes())
            for n in params.order:
                f.write(np.ascontiguousarray(opt.v[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (params, opt_or_None, header dict)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        names = [t["name"] for t in header["tensors"]]
        shapes = {t["name"]: tuple(t["shape"]) for t in header["tensors"]}
        dtype = np.dtype(header.get("dtype", "float64"))

        def read_set():
            out = {}
            for n in names:
                shape = shapes[n]
                count = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape)
                out[n] = arr.astype(dtype)  # exact when values were stored from this dtype
            return out

        tensors = read_set()
        params = DetectorParams(stride=header["stride"], seed=header["seed"],
                                tensors=tensors, order=names,
                                version=header.get("param_version", 0))
        opt = None
        if header["adam"] is not None:
            a = header["adam"]
            opt = OptimizerState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"],
                                 eps=a["eps"], step_count=a["step"],
                                 m=read_set(), v=read_set())
    return params, opt, header
