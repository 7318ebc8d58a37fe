"""Model assembly: feature-calibration convolutions, the pyramid network,
channel attention, a compact densely connected backbone and the output head.

The backbone honours a fixed tap-point contract — a quarter-resolution map
with a configurable channel width (128 by default, so a 224 input yields
56x56x128) — while its internal size stays desk-friendly.  Ablation flags
drop the calibration pyramid and/or the attention module without touching
the rest of the assembly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ShapeError
from . import checkpoint as ckpt
from .layers import (
    INFER,
    TRAIN,
    BatchNorm2D,
    Conv2D,
    Dense,
    Dropout,
    Module,
    avg_pool2d,
    bilinear_upsample,
    global_avg_pool,
    max_pool2d,
)
from .tensor import (
    Tensor,
    bmm,
    channel_concat,
    channel_split,
    reshape,
    sigmoid,
    softmax_rows,
    transpose,
)

DTYPE_NAMES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class FCConvConfig:
    """Hyper-parameters of one feature-calibration convolution."""

    channels: int
    k1: int = 3
    k2: int = 7
    pool: int = 11

    def __post_init__(self):
        if self.channels % 2 != 0:
            raise ValueError(f"channel count must be even, got {self.channels}")
        if self.k1 % 2 == 0 or self.k2 % 2 == 0:
            raise ValueError(f"kernel sizes must be odd, got k1={self.k1}, k2={self.k2}")
        if self.pool < 1:
            raise ValueError(f"pool window must be >= 1, got {self.pool}")


class FCConv(Module):
    """Channel-split convolution whose second branch is gated by pooled
    global context.

    The first half passes through a plain convolution; the second half runs
    a local conv and, in parallel, a pool -> conv -> upsample path whose
    sigmoid (after adding the branch input) multiplies the local features
    before the closing convolution.  Output halves are concatenated, so the
    channel count and spatial extent are preserved.
    """

    def __init__(self, cfg: FCConvConfig, rng=None, dtype=np.float32):
        super().__init__()
        half = cfg.channels // 2
        k1, k2 = cfg.k1, cfg.k2
        self.f1 = Conv2D(k1, k1, half, half, activation="linear", init="he", rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2D(half, dtype=dtype)
        self.f2 = Conv2D(k2, k2, half, half, activation="relu", rng=rng, dtype=dtype)
        self.f3 = Conv2D(k1, k1, half, half, activation="relu", rng=rng, dtype=dtype)
        self.f4 = Conv2D(k1, k1, half, half, activation="linear", init="he", rng=rng, dtype=dtype)
        self.bn4 = BatchNorm2D(half, dtype=dtype)
        object.__setattr__(self, "cfg", cfg)

    def forward(self, x: Tensor) -> Tensor:
        n, h, w, c = x.data.shape
        if c != self.cfg.channels:
            raise ShapeError(f"expected {self.cfg.channels} channels, got {c}")
        p = self.cfg.pool
        if p > h or p > w:
            raise ShapeError(f"pool window {p} exceeds spatial extent {(h, w)}")
        i1, i2 = channel_split(x)
        i1_out = self.bn1(self.f1(i1)).relu()
        local = self.f3(i2)
        pooled = avg_pool2d(i2, (p, p), stride=(p, p), ceil_mode=True)
        glob = bilinear_upsample(self.f2(pooled), (h, w))
        gate = sigmoid(glob + i2)
        i2_out = self.bn4(self.f4(local * gate)).relu()
        return channel_concat(i1_out, i2_out)


class FCBlock(Module):
    """Three identically configured FCConvs; the first one's output is
    residually added to the third one's output."""

    def __init__(self, cfg: FCConvConfig, rng=None, dtype=np.float32):
        super().__init__()
        self.conv1 = FCConv(cfg, rng=rng, dtype=dtype)
        self.conv2 = FCConv(cfg, rng=rng, dtype=dtype)
        self.conv3 = FCConv(cfg, rng=rng, dtype=dtype)
        object.__setattr__(self, "cfg", cfg)

    def forward(self, x: Tensor) -> Tensor:
        a = self.conv1(x)
        b = self.conv2(a)
        c = self.conv3(b)
        if c.data.shape != a.data.shape:
            raise ShapeError(f"shape drift inside block: {a.data.shape} -> {c.data.shape}")
        return c + a


DEFAULT_IFC_BLOCKS = ((3, 7, 11), (3, 7, 11), (3, 5, 9), (3, 5, 9), (3, 3, 7))
DEFAULT_IFC_TRANSITIONS = (2, 4)


class IFCNet(Module):
    """Pyramid of FC-Blocks.  After each block index listed in
    ``transitions`` a 2x2/stride-2 average pool plus a channel-doubling 1x1
    convolution downsamples the stream."""

    def __init__(self, in_channels, blocks=DEFAULT_IFC_BLOCKS,
                 transitions=DEFAULT_IFC_TRANSITIONS, rng=None, dtype=np.float32):
        super().__init__()
        transitions = tuple(transitions)
        chans = in_channels
        block_mods, trans_mods = [], {}
        for i, (k1, k2, pool) in enumerate(blocks, start=1):
            block_mods.append(FCBlock(FCConvConfig(chans, k1, k2, pool), rng=rng, dtype=dtype))
            if i in transitions:
                trans_mods[i] = Conv2D(1, 1, chans, 2 * chans, activation="linear",
                                       init="glorot", rng=rng, dtype=dtype)
                chans *= 2
        self.blocks = block_mods
        for i, conv in trans_mods.items():
            setattr(self, f"transition{i}", conv)
        object.__setattr__(self, "in_channels", in_channels)
        object.__setattr__(self, "out_channels", chans)
        object.__setattr__(self, "transitions", transitions)

    def forward(self, x: Tensor, taps=None) -> Tensor:
        if x.data.shape[-1] != self.in_channels:
            raise ShapeError(
                f"pyramid expects {self.in_channels} input channels, got {x.data.shape[-1]}"
            )
        t = x
        for i, block in enumerate(self.blocks, start=1):
            t = block(t)
            if taps is not None and f"fcblock{i}" in taps:
                taps[f"fcblock{i}"] = t.data.copy()
            if i in self.transitions:
                t = avg_pool2d(t, (2, 2), stride=(2, 2))
                t = getattr(self, f"transition{i}")(t)
        return t


class ChannelAttention(Module):
    """Zero-parameter channel reweighting via the softmaxed channel Gram
    matrix; the refined maps are blended back with weight ``beta``."""

    def __init__(self, beta: float = 1.0):
        super().__init__()
        if not 0.0 <= beta <= 1.0:
            raise ValueError(f"beta must lie in [0,1], got {beta}")
        object.__setattr__(self, "beta", float(beta))

    def forward(self, x: Tensor) -> Tensor:
        n, h, w, c = x.data.shape
        q = transpose(reshape(x, (n, h * w, c)), (0, 2, 1))
        u = softmax_rows(bmm(q, transpose(q, (0, 2, 1))))
        refined = reshape(transpose(bmm(u, q), (0, 2, 1)), (n, h, w, c))
        if self.beta == 0.0:
            return x
        return self.beta * refined + x

    def attention_matrix(self, x: Tensor) -> np.ndarray:
        n, h, w, c = x.data.shape
        q = transpose(reshape(x, (n, h * w, c)), (0, 2, 1))
        return softmax_rows(bmm(q, transpose(q, (0, 2, 1)))).data


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    growth: int = 12
    num_layers: int = 6
    out_channels: int = 128


class MiniDenseBackbone(Module):
    """Compact densely connected feature extractor.

    A 7x7/stride-2 stem plus 3x3/stride-2 max pool brings the input to a
    quarter of its resolution; one dense block (each layer sees the
    concatenation of the stem and all previous layer outputs) feeds a 1x1
    transition onto ``out_channels``.
    """

    def __init__(self, cfg: BackboneConfig, in_channels=3, rng=None, dtype=np.float32):
        super().__init__()
        self.stem_conv = Conv2D(7, 7, in_channels, cfg.stem_channels, stride=(2, 2),
                                padding="same", activation="linear", init="he", rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2D(cfg.stem_channels, dtype=dtype)
        convs, bns, in_chans = [], [], []
        chans = cfg.stem_channels
        for _ in range(cfg.num_layers):
            in_chans.append(chans)
            convs.append(Conv2D(3, 3, chans, cfg.growth, activation="linear", init="he",
                                rng=rng, dtype=dtype))
            bns.append(BatchNorm2D(cfg.growth, dtype=dtype))
            chans += cfg.growth
        self.dense_convs = convs
        self.dense_bns = bns
        self.transition = Conv2D(1, 1, chans, cfg.out_channels, activation="linear",
                                 init="he", rng=rng, dtype=dtype)
        self.transition_bn = BatchNorm2D(cfg.out_channels, dtype=dtype)
        object.__setattr__(self, "cfg", cfg)
        object.__setattr__(self, "dense_in_channels", in_chans)
        object.__setattr__(self, "out_channels", cfg.out_channels)

    def forward(self, x: Tensor) -> Tensor:
        n, h, w, c = x.data.shape
        if h % 4 != 0 or w % 4 != 0:
            raise ShapeError(f"input spatial size must be divisible by 4, got {(h, w)}")
        t = self.stem_bn(self.stem_conv(x)).relu()
        t = max_pool2d(t, (3, 3), (2, 2), padding="same")
        for conv, bn in zip(self.dense_convs, self.dense_bns):
            grown = bn(conv(t)).relu()
            t = channel_concat(t, grown)
        return self.transition_bn(self.transition(t)).relu()


@dataclass
class DFCANetConfig:
    """Assembly switches for the full detector.

    ``task`` selects the output: ``pad`` ends in a single sigmoid unit whose
    score is the probability of the attack class, ``lens`` in a
    ``num_classes``-way softmax.  ``use_ifcnet``/``use_cam`` are the
    ablation flags.
    """

    input_size: int = 224
    in_channels: int = 3
    task: str = "pad"
    num_classes: int = 3
    use_ifcnet: bool = True
    use_cam: bool = True
    cam_beta: float = 1.0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    ifc_blocks: tuple = DEFAULT_IFC_BLOCKS
    ifc_transitions: tuple = DEFAULT_IFC_TRANSITIONS
    head_units: int = 256
    dropout_rate: float = 0.2
    seed: int = 0
    dtype: str = "f32"

    def np_dtype(self):
        return DTYPE_NAMES[self.dtype]


def config_to_dict(cfg: DFCANetConfig) -> dict:
    d = asdict(cfg)
    d["ifc_blocks"] = [list(b) for b in cfg.ifc_blocks]
    d["ifc_transitions"] = list(cfg.ifc_transitions)
    return d


def config_from_dict(d: dict) -> DFCANetConfig:
    d = dict(d)
    if "backbone" in d and isinstance(d["backbone"], dict):
        d["backbone"] = BackboneConfig(**d["backbone"])
    if "ifc_blocks" in d:
        d["ifc_blocks"] = tuple(tuple(b) for b in d["ifc_blocks"])
    if "ifc_transitions" in d:
        d["ifc_transitions"] = tuple(d["ifc_transitions"])
    return DFCANetConfig(**d)


class DFCANet(Module):
    """Backbone -> calibration pyramid -> channel attention -> pooled head."""

    def __init__(self, cfg: DFCANetConfig):
        super().__init__()
        if cfg.task not in ("pad", "lens"):
            raise ValueError(f"task must be 'pad' or 'lens', got {cfg.task!r}")
        dtype = cfg.np_dtype()
        rng = np.random.default_rng(np.random.SeedSequence([0x0DFCA, cfg.seed]))
        self.backbone = MiniDenseBackbone(cfg.backbone, cfg.in_channels, rng=rng, dtype=dtype)
        feat_channels = cfg.backbone.out_channels
        if cfg.use_ifcnet:
            self.ifcnet = IFCNet(feat_channels, cfg.ifc_blocks, cfg.ifc_transitions,
                                 rng=rng, dtype=dtype)
            feat_channels = self.ifcnet.out_channels
        if cfg.use_cam:
            self.cam = ChannelAttention(cfg.cam_beta)
        self.dense1 = Dense(feat_channels, cfg.head_units, activation="relu", rng=rng, dtype=dtype)
        self.drop = Dropout(cfg.dropout_rate, seed=cfg.seed)
        self.dense2 = Dense(cfg.head_units, cfg.head_units, activation="relu", rng=rng, dtype=dtype)
        n_out = 1 if cfg.task == "pad" else cfg.num_classes
        self.final = Dense(cfg.head_units, n_out, activation="linear", rng=rng, dtype=dtype)
        object.__setattr__(self, "cfg", cfg)

    def stage_names(self):
        names = ["backbone"]
        if self.cfg.use_ifcnet:
            names += [f"fcblock{i}" for i in range(1, len(self.cfg.ifc_blocks) + 1)]
        if self.cfg.use_cam:
            names.append("cam")
        names.append("embedding")
        return names

    def forward(self, x: Tensor, taps=None, return_logits=False) -> Tensor:
        if self.mode not in (TRAIN, INFER):
            raise RuntimeError("model mode not set; call set_mode('train'|'infer') first")
        t = self.backbone(x)
        if taps is not None and "backbone" in taps:
            taps["backbone"] = t.data.copy()
        if self.cfg.use_ifcnet:
            t = self.ifcnet(t, taps)
        if self.cfg.use_cam:
            t = self.cam(t)
            if taps is not None and "cam" in taps:
                taps["cam"] = t.data.copy()
        e = global_avg_pool(t)
        e = self.dense1(e)
        e = self.drop(e)
        e = self.dense2(e)
        if taps is not None and "embedding" in taps:
            taps["embedding"] = e.data.copy()
        logits = self.final(e)
        if return_logits:
            return logits
        if self.cfg.task == "pad":
            return sigmoid(logits)
        return softmax_rows(logits)


def build_model(cfg: DFCANetConfig) -> DFCANet:
    return DFCANet(cfg)


def dump_feature_maps(model: DFCANet, image: Tensor, stages, out_dir):
    """Run one forward pass and write each requested stage activation to
    ``<out_dir>/<stage>.dfct`` in the single-tensor file encoding."""
    import os

    valid = model.stage_names()
    stages = list(stages)
    for s in stages:
        if s not in valid:
            raise ValueError(f"unknown stage {s!r}; valid stages: {', '.join(valid)}")
    paths = {}
    if not stages:
        return paths
    taps = {s: None for s in stages}
    from .tensor import no_grad

    with no_grad():
        model.forward(image, taps=taps)
    os.makedirs(out_dir, exist_ok=True)
    for s in stages:
        path = os.path.join(out_dir, f"{s}.dfct")
        ckpt.write_tensor_file(path, s, taps[s])
        paths[s] = path
    return paths
