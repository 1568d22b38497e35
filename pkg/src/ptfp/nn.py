"""Action-recognition CNN whose convolution layers run on the simulated chip.

conv1 [3x3, 1, 4] -> ReLU -> conv2 [3x3, 4, 8] -> ReLU -> Elman RNN (tanh)
over the 5 frames -> fully connected -> softmax over 5 classes.

Only the linear part of the two convolutions goes through the chip; biases,
activations, the recurrent layer and the classifier are always digital.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chip import ChipConfig
from .compiler import ExecutionPlan, compile_kernel, execute_plan, execute_plan_batch
from .devices import NoiseModel
from .errors import ConfigError, NumericError, TrainingError, UsageError
from .signal_core import DataTensor, KernelTensor, direct_xcorr, oracle_tensor_conv

CLASS_NAMES = ("oscillate-x", "oscillate-y", "expand-contract", "translate-right", "translate-down")
ACTION_ANALOGUES = ("boxing", "handwaving", "handclapping", "walking", "running")
FRAME_SIZE = 24
FRAMES = 5
HIDDEN = 32
N_CLASSES = 5

DEFAULT_SEED = 7
DEFAULT_HYPERPARAMS = {
    "n_train": 1500,
    "n_test": 500,
    "epochs": 12,
    "batch_size": 25,
    "lr": 0.02,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "clip_norm": 5.0,
}

LAYER_ORDER = ("conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias",
               "rnn.w_x", "rnn.w_h", "rnn.bias", "fc.weight", "fc.bias")
_MAGIC = b"PTFPCKPT"


@dataclass(frozen=True, eq=False)
class VideoSegment:
    frames: np.ndarray  # (5, 24, 24), values in [0, 1]
    label: int

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[0] != FRAMES:
            raise ValueError(f"a segment holds exactly {FRAMES} frames")
        if not 0 <= self.label < N_CLASSES:
            raise ValueError(f"label {self.label} out of range")


@dataclass(eq=False)
class NetworkSpec:
    conv1: KernelTensor
    conv1_bias: np.ndarray
    conv2: KernelTensor
    conv2_bias: np.ndarray
    w_x: np.ndarray  # (H, F)
    w_h: np.ndarray  # (H, H)
    rnn_bias: np.ndarray  # (H,)
    fc_w: np.ndarray  # (classes, H)
    fc_b: np.ndarray  # (classes,)
    frame_size: int = FRAME_SIZE
    frames_per_segment: int = FRAMES
    activation: tuple = ("relu", "relu", "tanh", "softmax")
    trained: bool = False
    seed: int | None = None
    hyperparams: dict = field(default_factory=dict)

    def __post_init__(self):
        f = self.feature_dim
        h = self.w_h.shape[0]
        checks = [
            (self.conv1.as_2d().shape[2], 1, "conv1 input channels"),
            (self.conv2.in_channels, self.conv1.out_channels, "conv2 input channels"),
            (self.w_x.shape, (h, f), "rnn input weights"),
            (self.fc_w.shape[1], h, "fc input size"),
        ]
        for got, want, what in checks:
            if got != want:
                raise ConfigError(f"{what}: expected {want}, got {got}")

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    @property
    def n_classes(self) -> int:
        return self.fc_w.shape[0]

    @property
    def feature_dim(self) -> int:
        s = self.frame_size
        for k in (self.conv1, self.conv2):
            s -= k.kernel_shape[0] - 1
        return self.conv2.out_channels * s * s

    def params(self) -> dict[str, np.ndarray]:
        return {
            "conv1.weight": self.conv1.weights, "conv1.bias": self.conv1_bias,
            "conv2.weight": self.conv2.weights, "conv2.bias": self.conv2_bias,
            "rnn.w_x": self.w_x, "rnn.w_h": self.w_h, "rnn.bias": self.rnn_bias,
            "fc.weight": self.fc_w, "fc.bias": self.fc_b,
        }

    @classmethod
    def from_params(cls, p: dict, **kw) -> "NetworkSpec":
        return cls(
            KernelTensor(p["conv1.weight"]), np.asarray(p["conv1.bias"], float),
            KernelTensor(p["conv2.weight"]), np.asarray(p["conv2.bias"], float),
            np.asarray(p["rnn.w_x"], float), np.asarray(p["rnn.w_h"], float), np.asarray(p["rnn.bias"], float),
            np.asarray(p["fc.weight"], float), np.asarray(p["fc.bias"], float), **kw,
        )


def init_network(seed: int, hidden: int = HIDDEN, frame_size: int = FRAME_SIZE) -> NetworkSpec:
    rng = np.random.default_rng(seed)
    k1 = rng.normal(0, np.sqrt(2 / 9), (3, 3, 1, 4))
    k2 = rng.normal(0, np.sqrt(2 / 36), (3, 3, 4, 8))
    f = 8 * (frame_size - 4) ** 2
    return NetworkSpec(
        KernelTensor(k1), np.zeros(4), KernelTensor(k2), np.zeros(8),
        rng.normal(0, 1 / np.sqrt(f), (hidden, f)),
        rng.normal(0, 0.5 / np.sqrt(hidden), (hidden, hidden)),
        np.zeros(hidden),
        rng.normal(0, 1 / np.sqrt(hidden), (N_CLASSES, hidden)),
        np.zeros(N_CLASSES),
        frame_size=frame_size,
        seed=seed,
    )


# -- synthetic dataset -----------------------------------------------------


def _blob(size, cx, cy, radius, amp):
    yy, xx = np.mgrid[0:size, 0:size]
    return amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * (radius / 1.5) ** 2))


def _render(label: int, rng: np.random.Generator, size: int) -> np.ndarray:
    k = np.arange(FRAMES)
    amp = rng.uniform(0.7, 1.0)
    period = rng.uniform(3.5, 4.5)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * k / period + phase)
    radius = np.full(FRAMES, rng.uniform(2.5, 3.5))
    margin = min(8.0, size / 3)
    cx = np.full(FRAMES, rng.uniform(margin, size - margin))
    cy = np.full(FRAMES, rng.uniform(margin, size - margin))
    if label == 0:
        cx = cx + rng.uniform(3, 4.5) * wave
    elif label == 1:
        cy = cy + rng.uniform(3, 4.5) * wave
    elif label == 2:
        radius = rng.uniform(3.5, 4.5) + rng.uniform(1.5, 2.2) * wave
    else:
        v = rng.uniform(2.0, 3.0) * size / FRAME_SIZE
        start = rng.uniform(size / 6, size - size / 6 - 4 * v)
        if label == 3:
            cx = start + v * k
        else:
            cy = start + v * k
    frames = np.stack([_blob(size, cx[i], cy[i], radius[i], amp) for i in range(FRAMES)])
    frames += rng.normal(0, 0.03, frames.shape)
    return np.clip(frames, 0.0, 1.0)


def synth_dataset(n_segments: int, seed: int, frame_size: int = FRAME_SIZE) -> list[VideoSegment]:
    """Class-balanced moving-blob clips, 5 frames each, reproducible from ``seed``."""
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_segments) % N_CLASSES)
    return [VideoSegment(_render(int(lab), rng, frame_size), int(lab)) for lab in labels]


def make_splits(seed: int = DEFAULT_SEED, n_train: int = 1500, n_test: int = 500):
    return synth_dataset(n_train, seed), synth_dataset(n_test, seed + 1)


def stack(segments) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.frames for s in segments]), np.array([s.label for s in segments])


# -- forward pass ----------------------------------------------------------


@dataclass
class ChipBackend:
    """Chip execution context: compiled plans are cached per kernel."""

    cfg: ChipConfig
    program: str = "exact"
    _plans: dict = field(default_factory=dict)

    def plan(self, k: KernelTensor) -> ExecutionPlan:
        key = id(k)
        if key not in self._plans:
            self._plans[key] = (k, compile_kernel(k, self.cfg, self.program))
        return self._plans[key][1]


def _rescale(frames: np.ndarray):
    """Per-frame full-scale normalisation into [0, 1]; returns (scaled, scale)."""
    scale = frames.reshape(len(frames), -1).max(axis=1)
    scale = np.where(scale > 0, scale, 1.0)
    return frames / scale[:, None, None, None], scale


def _linear_conv(k: KernelTensor, frames: np.ndarray, backend, cfg, seed_offset=0) -> np.ndarray:
    if backend == "digital":
        return direct_xcorr(frames, k.as_2d())
    if isinstance(backend, ChipBackend) or backend == "chip":
        ctx = backend if isinstance(backend, ChipBackend) else ChipBackend(cfg)
        scaled, scale = _rescale(frames)
        y = execute_plan_batch(ctx.plan(k), scaled, ctx.cfg, seed_offset)
        return y * scale[:, None, None, None]
    raise ValueError(f"unknown backend {backend!r}")


def conv_layer_forward(
    k: KernelTensor,
    x: DataTensor,
    cfg: ChipConfig | None = None,
    backend: str = "digital",
    bias=None,
    activation: str | None = "relu",
) -> DataTensor:
    """Linear convolution on the chosen backend, then bias and activation.

    On the chip backend the input is divided by its maximum before encoding
    and the output multiplied back, so any non-negative input can be streamed.
    """
    if backend == "digital":
        y = oracle_tensor_conv(x, k).samples
    elif backend == "chip":
        if cfg is None:
            raise UsageError("chip backend needs a ChipConfig")
        peak = float(x.samples.max())
        scale = peak if peak > 0 else 1.0
        plan = compile_kernel(k, cfg)
        y = execute_plan(plan, DataTensor(x.samples / scale), cfg).samples * scale
    else:
        raise ValueError(f"unknown backend {backend!r}")
    if bias is not None:
        y = y + np.asarray(bias).reshape((-1,) + (1,) * (y.ndim - 1))
    if activation == "relu":
        y = np.maximum(y, 0.0)
    elif activation not in (None, "linear"):
        raise ValueError(f"unknown activation {activation!r}")
    return DataTensor(y)


def rnn_forward(spec: NetworkSpec, feature_sequence) -> np.ndarray:
    """Elman recurrence ``h_t = tanh(W_x f_t + W_h h_{t-1} + b)`` from ``h_0 = 0``."""
    f = np.asarray(feature_sequence, dtype=float)
    if f.ndim == 1:
        f = f[None]
    if not np.all(np.isfinite(f)):
        raise NumericError("non-finite value in recurrent-layer features")
    h = np.zeros(spec.hidden)
    for ft in f:
        h = np.tanh(spec.w_x @ ft + spec.w_h @ h + spec.rnn_bias)
    return h


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def features(spec: NetworkSpec, clips: np.ndarray, backend="digital", cfg=None, seed_offset: int = 0) -> np.ndarray:
    """Per-frame conv features ``(B, T, F)`` for clips ``(B, T, H, W)``."""
    b, t, h, w = clips.shape
    x = clips.reshape(b * t, 1, h, w)
    z1 = _linear_conv(spec.conv1, x, backend, cfg, seed_offset) + spec.conv1_bias[None, :, None, None]
    a1 = np.maximum(z1, 0.0)
    z2 = _linear_conv(spec.conv2, a1, backend, cfg, seed_offset + 10_000) + spec.conv2_bias[None, :, None, None]
    a2 = np.maximum(z2, 0.0)
    return a2.reshape(b, t, -1)


def scores_from_features(spec: NetworkSpec, f: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(f)):
        raise NumericError("non-finite conv features")
    h = np.zeros((f.shape[0], spec.hidden))
    for t in range(f.shape[1]):
        h = np.tanh(f[:, t] @ spec.w_x.T + h @ spec.w_h.T + spec.rnn_bias)
    return softmax(h @ spec.fc_w.T + spec.fc_b)


def predict(spec: NetworkSpec, clips: np.ndarray, backend="digital", cfg=None, seed_offset: int = 0):
    """Class indices and score vectors for a batch of clips."""
    if not spec.trained:
        raise UsageError("network has not been trained; load a checkpoint or run train() first")
    scores = scores_from_features(spec, features(spec, clips, backend, cfg, seed_offset))
    return scores.argmax(axis=1), scores


def classify(spec: NetworkSpec, segment: VideoSegment, cfg: ChipConfig | None = None, backend="digital"):
    idx, scores = predict(spec, segment.frames[None], backend, cfg)
    return int(idx[0]), scores[0]


def accuracy(spec, segments, backend="digital", cfg=None, seed_offset: int = 0) -> float:
    clips, labels = stack(segments)
    pred, _ = predict(spec, clips, backend, cfg, seed_offset)
    return float(np.mean(pred == labels))


def confusion_matrix(labels, preds, n: int = N_CLASSES) -> np.ndarray:
    cm = np.zeros((n, n), dtype=int)
    for y, p in zip(labels, preds):
        cm[y, p] += 1
    return cm


# -- training --------------------------------------------------------------


def _conv_grads(x, k, dz):
    """Gradients of a valid cross-correlation w.r.t. kernel and input."""
    kh, kw = k.shape[:2]
    ho, wo = dz.shape[-2:]
    dk = np.empty_like(k)
    dx = np.zeros_like(x)
    for r in range(kh):
        for c in range(kw):
            patch = x[:, :, r : r + ho, c : c + wo]
            dk[r, c] = np.tensordot(patch, dz, axes=([0, 2, 3], [0, 2, 3]))
            dx[:, :, r : r + ho, c : c + wo] += np.tensordot(dz, k[r, c], axes=([1], [1])).transpose(0, 3, 1, 2)
    return dk, dx


def _loss_and_grads(p: dict, clips: np.ndarray, labels: np.ndarray):
    b, t, h, w = clips.shape
    x = clips.reshape(b * t, 1, h, w)
    z1 = direct_xcorr(x, p["conv1.weight"]) + p["conv1.bias"][None, :, None, None]
    a1 = np.maximum(z1, 0)
    z2 = direct_xcorr(a1, p["conv2.weight"]) + p["conv2.bias"][None, :, None, None]
    a2 = np.maximum(z2, 0)
    f = a2.reshape(b, t, -1)
    hs = [np.zeros((b, p["rnn.w_h"].shape[0]))]
    for i in range(t):
        hs.append(np.tanh(f[:, i] @ p["rnn.w_x"].T + hs[-1] @ p["rnn.w_h"].T + p["rnn.bias"]))
    logits = hs[-1] @ p["fc.weight"].T + p["fc.bias"]
    prob = softmax(logits)
    loss = -np.mean(np.log(prob[np.arange(b), labels] + 1e-300))

    g = {}
    d = prob.copy()
    d[np.arange(b), labels] -= 1
    d /= b
    g["fc.weight"] = d.T @ hs[-1]
    g["fc.bias"] = d.sum(0)
    dh = d @ p["fc.weight"]
    g["rnn.w_x"] = np.zeros_like(p["rnn.w_x"])
    g["rnn.w_h"] = np.zeros_like(p["rnn.w_h"])
    g["rnn.bias"] = np.zeros_like(p["rnn.bias"])
    df = np.zeros_like(f)
    for i in reversed(range(t)):
        dz = dh * (1 - hs[i + 1] ** 2)
        g["rnn.w_x"] += dz.T @ f[:, i]
        g["rnn.w_h"] += dz.T @ hs[i]
        g["rnn.bias"] += dz.sum(0)
        df[:, i] = dz @ p["rnn.w_x"]
        dh = dz @ p["rnn.w_h"]
    dz2 = df.reshape(a2.shape) * (z2 > 0)
    g["conv2.weight"], da1 = _conv_grads(a1, p["conv2.weight"], dz2)
    g["conv2.bias"] = dz2.sum((0, 2, 3))
    dz1 = da1 * (z1 > 0)
    g["conv1.weight"], _ = _conv_grads(x, p["conv1.weight"], dz1)
    g["conv1.bias"] = dz1.sum((0, 2, 3))
    acc = float(np.mean(prob.argmax(1) == labels))
    return loss, acc, g


@dataclass
class TrainResult:
    spec: NetworkSpec
    curve: list  # (epoch, loss, train_acc)


def train(dataset, hyperparams: dict | None = None, seed: int = DEFAULT_SEED) -> TrainResult:
    """Minibatch SGD with momentum; fully determined by ``seed`` and the data."""
    hp = {**DEFAULT_HYPERPARAMS, **(hyperparams or {})}
    clips, labels = stack(dataset)
    spec = init_network(seed, frame_size=clips.shape[-1])
    p = {k: np.array(v, dtype=float) for k, v in spec.params().items()}
    vel = {k: np.zeros_like(v) for k, v in p.items()}
    rng = np.random.default_rng(seed + 1)
    n = len(labels)
    curve = []
    last_good = None
    for epoch in range(1, hp["epochs"] + 1):
        order = rng.permutation(n)
        losses, accs = [], []
        for start in range(0, n, hp["batch_size"]):
            idx = order[start : start + hp["batch_size"]]
            loss, acc, g = _loss_and_grads(p, clips[idx], labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged in epoch {epoch}", last_stable_epoch=last_good)
            norm = np.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
            clip = min(1.0, hp["clip_norm"] / (norm + 1e-12))
            for key in p:
                step = g[key] * clip + hp["weight_decay"] * p[key]
                vel[key] = hp["momentum"] * vel[key] - hp["lr"] * step
                p[key] += vel[key]
            losses.append(loss * len(idx))
            accs.append(acc * len(idx))
        curve.append((epoch, sum(losses) / n, sum(accs) / n))
        last_good = epoch
    trained = NetworkSpec.from_params(p, frame_size=spec.frame_size, trained=True, seed=seed, hyperparams=hp)
    return TrainResult(trained, curve)


# -- noise sweep -----------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    sigma: float
    mean: float
    p5: float
    p95: float
    accuracies: tuple


def noise_accuracy_sweep(
    spec: NetworkSpec,
    testset,
    cfg: ChipConfig,
    sigmas,
    trials_per_sigma: int = 20,
    seed: int = 0,
) -> list[SweepPoint]:
    """Chip-backend accuracy versus detector noise.

    Trial ``j`` uses noise seed ``seed + j`` at every sigma, so curves compare
    common noise realisations scaled by sigma. A zero sigma is deterministic and
    runs once.
    """
    sigmas = [float(s) for s in sigmas]
    if sigmas != sorted(sigmas):
        raise ValueError("sigmas must be sorted ascending")
    if trials_per_sigma < 1:
        raise ValueError("trials_per_sigma must be >= 1")
    clips, labels = stack(testset)
    plans = None
    out = []
    for sigma in sigmas:
        accs = []
        for j in range(1 if sigma == 0 else trials_per_sigma):
            ctx = ChipBackend(cfg.with_noise(NoiseModel(sigma, seed + j)))
            if plans is None:
                ctx.plan(spec.conv1), ctx.plan(spec.conv2)
                plans = ctx._plans
            ctx._plans = plans
            pred, _ = predict(spec, clips, ctx)
            accs.append(float(np.mean(pred == labels)))
        if sigma == 0:
            accs = accs * trials_per_sigma
        a = np.array(accs)
        out.append(SweepPoint(sigma, float(a.mean()), float(np.percentile(a, 5)), float(np.percentile(a, 95)), tuple(accs)))
    return out


def band_monotone(points: list[SweepPoint]) -> list[bool]:
    """Adjacent-pair check: accuracy may only rise with sigma inside the 90% bands."""
    ok = []
    for a, b in zip(points, points[1:]):
        ok.append(b.mean <= a.mean or b.p5 <= a.p95)
    return ok


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(spec: NetworkSpec, path) -> None:
    """Magic, uint32 header length, JSON header, then float64 LE weights in LAYER_ORDER."""
    params = spec.params()
    header = {
        "format": 1,
        "layer_order": list(LAYER_ORDER),
        "shapes": {k: list(params[k].shape) for k in LAYER_ORDER},
        "frame_size": spec.frame_size,
        "frames_per_segment": spec.frames_per_segment,
        "activation": list(spec.activation),
        "seed": spec.seed,
        "hyperparams": spec.hyperparams,
        "trained": spec.trained,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(params[k], dtype="<f8").tobytes() for k in LAYER_ORDER)
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload)


def load_checkpoint(path) -> NetworkSpec:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"checkpoint {path} not found")
    data = path.read_bytes()
    if not data.startswith(_MAGIC):
        raise ConfigError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", data, len(_MAGIC))
    start = len(_MAGIC) + 4
    header = json.loads(data[start : start + hlen])
    pos = start + hlen
    params = {}
    for k in header["layer_order"]:
        shape = tuple(header["shapes"][k])
        n = int(np.prod(shape))
        params[k] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(float)
        pos += 8 * n
    if pos != len(data):
        raise ConfigError(f"{path}: payload size does not match header")
    return NetworkSpec.from_params(
        params,
        frame_size=header["frame_size"],
        frames_per_segment=header["frames_per_segment"],
        activation=tuple(header["activation"]),
        trained=header["trained"],
        seed=header["seed"],
        hyperparams=header["hyperparams"],
    )


def shipped_checkpoint_path() -> Path:
    return Path(__file__).parent / "data" / "default_checkpoint.ckpt"
