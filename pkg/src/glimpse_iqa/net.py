"""Glimpse CNN, two-layer recurrent aggregator and prediction heads.

All functions take the parameter dict first and accept either a single
glimpse/state or a leading batch axis.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndnum as nd
from .imgproc import GlimpseStack, extract_glimpse_batch
from .ndnum import Tensor

ModelParams = dict  # name -> Tensor, canonical insertion order

CHECKPOINT_MAGIC = "GLIMPSE-IQA-CHECKPOINT 1"


@dataclass(frozen=True)
class ModelConfig:
    patch: int = 32
    scales: tuple[int, int, int] = (32, 96, 288)
    conv_channels: tuple[int, int, int, int] = (32, 64, 64, 128)
    hidden: int = 128
    rnn_hidden: int = 256
    n_classes: int = 15
    T: int = 5
    t0: int = 1
    loc_init_scale: float = 0.01
    score_bias_init: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if len(self.conv_channels) != 4 or any(c % 4 for c in self.conv_channels):
            raise ValueError("conv_channels needs four widths, each divisible by 4")
        if self.patch % 4:
            raise ValueError("patch size must be divisible by 4 (two 2x2 poolings)")
        if self.T < 1 or not 1 <= self.t0 <= self.T:
            raise ValueError("need T >= 1 and 1 <= t0 <= T")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class HiddenState:
    h1: Tensor
    h2: Tensor

    @classmethod
    def zeros(cls, width: int, batch: int | None = None) -> "HiddenState":
        shape = (width,) if batch is None else (batch, width)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


@dataclass
class EpisodeTrace:
    """Record of one batched T-step forward pass.

    ``locations[t]`` is the fixation used at step ``t + 1``. ``mus[t]`` and
    ``actions[t]`` are the policy mean and the unclamped sample that produced
    ``locations[t + 1]``; the first fixation comes from outside the policy.
    """

    locations: np.ndarray  # (T, B, 2)
    mus: list[Tensor]  # T - 1 tensors of shape (B, 2)
    actions: np.ndarray  # (T - 1, B, 2)
    hidden: list[HiddenState]
    scores: Tensor  # (B, T)
    raw_weights: Tensor  # (B, T)
    weights: Tensor  # (B, T), softmax over the aggregated steps
    score: Tensor  # (B,)
    logits: Tensor  # (B, K)
    sigma: float | None = None
    tape: nd.Tape | None = field(default=None, repr=False)

    @property
    def T(self) -> int:
        return self.locations.shape[0]

    @property
    def batch(self) -> int:
        return self.locations.shape[1]


# --------------------------------------------------------------------------
# parameters


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Fan-in scaled uniform initialisation in a fixed canonical order."""
    p: ModelParams = {}

    def add(name, arr):
        p[name] = Tensor(arr, requires_grad=True, name=name)

    def relu_layer(prefix, n_out, n_in):
        add(f"{prefix}.weight", _uniform(rng, (n_out, n_in), np.sqrt(6.0 / n_in)))
        add(f"{prefix}.bias", np.zeros(n_out))

    c_in = 3
    for i, c in enumerate(config.conv_channels, start=1):
        for ksize, width in ((3, c // 2), (5, c // 4), (1, c // 4)):
            fan_in = c_in * ksize * ksize
            add(f"conv{i}.k{ksize}.weight",
                _uniform(rng, (width, c_in, ksize, ksize), np.sqrt(6.0 / fan_in)))
            add(f"conv{i}.k{ksize}.bias", np.zeros(width))
        c_in = c
    hid, rh = config.hidden, config.rnn_hidden
    relu_layer("glimpse.patch_fc", hid, c_in)
    relu_layer("glimpse.loc_fc", hid, 2)
    relu_layer("glimpse.merge_fc", hid, 2 * hid)
    for layer, n_in in (("rnn1", hid), ("rnn2", rh)):
        add(f"{layer}.W_gh", _uniform(rng, (rh, n_in), np.sqrt(6.0 / n_in)))
        add(f"{layer}.W_hh", _uniform(rng, (rh, rh), np.sqrt(1.0 / rh)))
        add(f"{layer}.b_h", np.zeros(rh))
    reset_location_head(p, rng, config.loc_init_scale)
    relu_layer("score.fc1", hid, rh)
    add("score.fc2.weight", _uniform(rng, (1, hid), np.sqrt(1.0 / hid)))
    add("score.fc2.bias", np.full(1, config.score_bias_init))
    add("weight.fc.weight", _uniform(rng, (1, rh), np.sqrt(1.0 / rh)))
    add("weight.fc.bias", np.zeros(1))
    relu_layer("cls.fc1", hid, rh)
    add("cls.fc2.weight", _uniform(rng, (config.n_classes, hid), np.sqrt(1.0 / hid)))
    add("cls.fc2.bias", np.zeros(config.n_classes))
    return p


LOCATION_HEAD = ("loc.W_rl", "loc.b_l")


def reset_location_head(params: ModelParams, rng: np.random.Generator, scale: float) -> None:
    """(Re)draw the location head from the small-scale initialiser, in place."""
    rh = params["rnn2.b_h"].shape[0] if "rnn2.b_h" in params else None
    if rh is None:
        raise KeyError("recurrent layers must be initialised before the location head")
    params["loc.W_rl"] = Tensor(_uniform(rng, (2, rh), scale), requires_grad=True, name="loc.W_rl")
    params["loc.b_l"] = Tensor(np.zeros(2), requires_grad=True, name="loc.b_l")


def replace_params(params: ModelParams, arrays: dict[str, np.ndarray]) -> ModelParams:
    return {k: Tensor(arrays.get(k, v.data), requires_grad=True, name=k) for k, v in params.items()}


# --------------------------------------------------------------------------
# components


def _multiscale_conv(params, x: Tensor, layer: int) -> Tensor:
    branches = [
        nd.conv2d(x, params[f"conv{layer}.k{k}.weight"], params[f"conv{layer}.k{k}.bias"])
        for k in (3, 5, 1)
    ]
    return nd.relu(nd.concat(branches, axis=-3))


def glimpse_forward(params: ModelParams, stack, loc) -> Tensor:
    """Glimpse feature vector from a patch stack and its fixation location."""
    if isinstance(stack, GlimpseStack):
        stack = stack.patches
    x = stack if isinstance(stack, Tensor) else Tensor(stack)
    loc = loc if isinstance(loc, Tensor) else Tensor(loc)
    expected_in = params["conv1.k3.weight"].shape[1]
    if x.ndim not in (3, 4) or x.shape[-3] != expected_in:
        raise ValueError(f"glimpse stack shape {x.shape} does not match the network")
    batched = x.ndim == 4
    if x.shape[-1] % 4 or x.shape[-1] != x.shape[-2]:
        raise ValueError(f"glimpse patches must be square with side divisible by 4, got {x.shape}")
    for layer in (1, 2, 3, 4):
        x = _multiscale_conv(params, x, layer)
        if layer in (1, 3):
            x = nd.avg_pool(x, 2)
    x = nd.avg_pool(x, x.shape[-1])
    x = nd.reshape(x, (x.shape[0], -1) if batched else (-1,))
    patch_h = nd.relu(nd.linear(x, params["glimpse.patch_fc.weight"], params["glimpse.patch_fc.bias"]))
    loc_h = nd.relu(nd.linear(loc, params["glimpse.loc_fc.weight"], params["glimpse.loc_fc.bias"]))
    merged = nd.concat([patch_h, loc_h], axis=-1)
    return nd.relu(nd.linear(merged, params["glimpse.merge_fc.weight"], params["glimpse.merge_fc.bias"]))


def rnn_step(params: ModelParams, g: Tensor, prev: HiddenState) -> HiddenState:
    h1 = nd.relu(nd.add(nd.linear(g, params["rnn1.W_gh"], params["rnn1.b_h"]),
                        nd.linear(prev.h1, params["rnn1.W_hh"])))
    h2 = nd.relu(nd.add(nd.linear(h1, params["rnn2.W_gh"], params["rnn2.b_h"]),
                        nd.linear(prev.h2, params["rnn2.W_hh"])))
    return HiddenState(h1, h2)


def location_head(params: ModelParams, h2: Tensor) -> Tensor:
    return nd.hardtanh(nd.linear(h2, params["loc.W_rl"], params["loc.b_l"]))


def score_and_weight_head(params: ModelParams, h2: Tensor) -> tuple[Tensor, Tensor]:
    """Per-step nonnegative score and unnormalised reliability weight."""
    hidden = nd.relu(nd.linear(h2, params["score.fc1.weight"], params["score.fc1.bias"]))
    s = nd.relu(nd.linear(hidden, params["score.fc2.weight"], params["score.fc2.bias"]))
    a = nd.linear(h2, params["weight.fc.weight"], params["weight.fc.bias"])
    squeeze = (h2.shape[0],) if h2.ndim == 2 else ()
    return nd.reshape(s, squeeze), nd.reshape(a, squeeze)


def classification_head(params: ModelParams, h2: Tensor) -> Tensor:
    hidden = nd.relu(nd.linear(h2, params["cls.fc1.weight"], params["cls.fc1.bias"]))
    return nd.linear(hidden, params["cls.fc2.weight"], params["cls.fc2.bias"])


def predict_class(logits) -> np.ndarray:
    """Argmax over the last axis; ``np.argmax`` already breaks ties low."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(z, axis=-1)


def aggregate_score(scores: Sequence, raw_weights: Sequence) -> tuple[Tensor, Tensor]:
    """Reliability-weighted average ``sum_t softmax(raw)_t * s_t``.

    Accepts sequences of per-step values (floats or tensors, optionally
    batched) or already-stacked ``(..., T)`` tensors. Returns the aggregated
    score and the normalised weights.
    """
    s = _stack_steps(scores)
    a = _stack_steps(raw_weights)
    if s.shape != a.shape:
        raise ValueError(f"{s.shape[-1]} scores but {a.shape[-1]} weights")
    if s.shape[-1] < 1:
        raise ValueError("need at least one step")
    w = nd.softmax(a)
    return nd.weighted_sum(w, s), w


def _stack_steps(values) -> Tensor:
    if isinstance(values, Tensor):
        return values
    parts = [v if isinstance(v, Tensor) else Tensor(v) for v in values]
    return nd.stack(parts, axis=-1) if parts else Tensor(np.zeros(0))


# --------------------------------------------------------------------------
# episode


def forward_episode(params: ModelParams, images, l0, policy=None, T: int | None = None, *,
                    config: ModelConfig, locations=None, tape: nd.Tape | None = None) -> EpisodeTrace:
    """Run ``T`` glimpse/update/predict steps over a batch of images.

    ``policy=None`` is evaluation mode (the next fixation is the policy
    mean). With a policy the next fixation is sampled from it. ``locations``
    of shape ``(T, B, 2)`` replays fixed fixations instead, which makes the
    supervised loss a smooth function of the parameters. Pass an active
    ``tape`` to store it on the trace.
    """
    T = config.T if T is None else T
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 2:
        imgs = imgs[None]
    b = imgs.shape[0]
    loc = np.broadcast_to(np.asarray(l0, dtype=np.float64), (b, 2)).copy()
    if locations is not None:
        locations = np.asarray(locations, dtype=np.float64).reshape(T, b, 2)
        loc = locations[0].copy()
    loc = np.clip(loc, -1.0, 1.0)

    state = HiddenState.zeros(config.rnn_hidden, b)
    locs, mus, actions, hidden, scores, raws = [], [], [], [], [], []
    for t in range(T):
        locs.append(loc)
        patches = extract_glimpse_batch(imgs, loc, config.scales, config.patch)
        g = glimpse_forward(params, Tensor(patches), Tensor(loc))
        state = rnn_step(params, g, state)
        hidden.append(state)
        s_t, a_t = score_and_weight_head(params, state.h2)
        scores.append(s_t)
        raws.append(a_t)
        if t == T - 1:
            break
        mu = location_head(params, state.h2)
        mus.append(mu)
        if locations is not None:
            action = locations[t + 1]
        elif policy is None:
            action = mu.data.copy()
        else:
            action = policy.sample(mu.data)
        actions.append(action)
        loc = np.clip(action, -1.0, 1.0)

    s_all = nd.stack(scores, axis=-1)
    a_all = nd.stack(raws, axis=-1)
    t0 = config.t0 - 1
    if t0 == 0:
        score, w = aggregate_score(s_all, a_all)
    else:
        score, w = aggregate_score(scores[t0:], raws[t0:])
    logits = classification_head(params, state.h2)
    return EpisodeTrace(
        locations=np.stack(locs),
        mus=mus,
        actions=np.stack(actions) if actions else np.zeros((0, b, 2)),
        hidden=hidden,
        scores=s_all,
        raw_weights=a_all,
        weights=w,
        score=score,
        logits=logits,
        sigma=None if policy is None else policy.sigma,
        tape=tape,
    )


# --------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, config: ModelConfig, meta: dict | None = None) -> None:
    """Text manifest, raw little-endian float64 payloads, 8-byte checksum."""
    lines = [CHECKPOINT_MAGIC, "config " + json.dumps(asdict(config), sort_keys=True)]
    if meta:
        lines.append("meta " + json.dumps(meta, sort_keys=True))
    payload = bytearray()
    for name, t in params.items():
        shape = "x".join(str(d) for d in t.shape) or "scalar"
        lines.append(f"tensor {name} float64 {shape}")
        payload += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    lines.append("end")
    digest = hashlib.blake2b(bytes(payload), digest_size=8).digest()
    Path(path).write_bytes(("\n".join(lines) + "\n").encode() + bytes(payload) + digest)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(CHECKPOINT_MAGIC.encode()) or cut < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    header = raw[:cut].decode().split("\n")
    body = raw[cut + len(marker):]
    payload, digest = body[:-8], body[-8:]
    if hashlib.blake2b(payload, digest_size=8).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, refusing to load")
    config, meta, specs = None, {}, []
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "config":
            cfg = json.loads(rest)
            config = ModelConfig.from_dict(cfg)
        elif kind == "meta":
            meta = json.loads(rest)
        elif kind == "tensor":
            name, dtype, shape = rest.split(" ")
            if dtype != "float64":
                raise CheckpointError(f"{path}: unsupported dtype {dtype} for {name}")
            dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
            specs.append((name, dims))
    params: ModelParams = {}
    offset = 0
    for name, dims in specs:
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(dims)
        offset += 8 * n
        params[name] = Tensor(arr, requires_grad=True, name=name)
    if offset != len(payload):
        raise CheckpointError(f"{path}: payload length does not match manifest")
    return params, config, meta


def param_diff(expected: ModelParams, found: ModelParams) -> list[str]:
    """Human-readable differences in names and shapes between two param sets."""
    out = []
    for name, t in expected.items():
        if name not in found:
            out.append(f"missing {name} {t.shape}")
        elif found[name].shape != t.shape:
            out.append(f"shape {name}: expected {t.shape}, found {found[name].shape}")
    out.extend(f"unexpected {name} {found[name].shape}" for name in found if name not in expected)
    return out
