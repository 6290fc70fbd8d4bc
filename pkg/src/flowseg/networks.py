"""Desk-scale network architectures and their shape/cost contracts.

All four networks share output stride 4 so segmentation features,
correction cues, and distortion maps live on one grid. Widths come from
NetworkConfig; the defaults below are the documented desk-scale set
(segnet base 32, flownet base 16, dmnet 16, cfnet base 16).

Every network accepts (3, H, W) or (N, 3, H, W) input and returns output
of matching batchness. FLOPs accounting walks the real modules with
forward hooks, so the cost ledger can never drift from the architecture.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .config import NetworkConfig
from .errors import ConfigError, DataIntegrityError

FEATURE_STRIDE = 4
SEGNET_INPUT_DIVISOR = 32
CFNET_ENCODER_STRIDE = 64
LRELU_SLOPE = 0.1


def _check_divisible(h: int, w: int, divisor: int, who: str) -> None:
    if h % divisor or w % divisor:
        raise DataIntegrityError(f"{who}: input {h}x{w} must be divisible by {divisor}")


def _conv_block(c_in: int, c_out: int, stride: int = 1, slope: float | None = None) -> nn.Sequential:
    act = nn.ReLU(inplace=True) if slope is None else nn.LeakyReLU(slope, inplace=True)
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        act,
    )


def _deconv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1),
        nn.LeakyReLU(LRELU_SLOPE, inplace=True),
    )


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, a=LRELU_SLOPE)
            if m.bias is not None:
                nn.init.constant_(m.bias, 0.0)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.constant_(m.weight, 1.0)
            nn.init.constant_(m.bias, 0.0)


class _SingleOrBatch:
    """Mixin: lift (C,H,W) to (1,C,H,W) around the batched forward."""

    def _lift(self, x: Tensor) -> tuple[Tensor, bool]:
        if x.ndim == 3:
            return x[None], True
        if x.ndim == 4:
            return x, False
        raise DataIntegrityError(f"expected 3 or 4 dims, got {tuple(x.shape)}")


class SegNet(nn.Module, _SingleOrBatch):
    """Per-frame segmentation encoder-decoder, output stride 4.

    forward returns (feature, logits); the shared 1x1 head maps any
    stride-4 feature (propagated, corrected, or cue) to class scores and is
    frozen together with the backbone after its own training stage.
    """

    def __init__(self, num_classes: int, base: int = 32, feature_channels: int = 32):
        super().__init__()
        if num_classes < 2:
            raise ConfigError("SegNet needs at least 2 classes")
        self.num_classes = num_classes
        self.feature_channels = feature_channels
        self.encoder = nn.Sequential(
            _conv_block(3, base, stride=2),
            _conv_block(base, 2 * base, stride=2),
            _conv_block(2 * base, 2 * base),
            _conv_block(2 * base, 4 * base, stride=2),
            _conv_block(4 * base, 4 * base),
            _conv_block(4 * base, 4 * base),
        )
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            _conv_block(4 * base, 2 * base),
            _conv_block(2 * base, feature_channels),
        )
        self.head = nn.Conv2d(feature_channels, num_classes, 1)
        _init_weights(self)

    def features(self, frame: Tensor) -> Tensor:
        x, single = self._lift(frame)
        _check_divisible(x.shape[-2], x.shape[-1], SEGNET_INPUT_DIVISOR, "SegNet")
        feat = self.decoder(self.encoder(x))
        return feat[0] if single else feat

    def head_logits(self, feature: Tensor) -> Tensor:
        x, single = self._lift(feature)
        if x.shape[1] != self.feature_channels:
            raise DataIntegrityError(
                f"head expects {self.feature_channels} channels, got {x.shape[1]}"
            )
        out = self.head(x)
        return out[0] if single else out

    def forward(self, frame: Tensor) -> tuple[Tensor, Tensor]:
        feat = self.features(frame)
        return feat, self.head_logits(feat)


class FlowNet(nn.Module, _SingleOrBatch):
    """Two-frame flow estimator: concatenated frames in, (2, H, W) out.

    The output flow is defined on the second frame's pixels and points into
    the first frame, i.e. warp_bilinear(frame_a, flow) aligns with frame_b.
    Flow is predicted at stride 4 and bilinearly upsampled to full
    resolution (values are already in full-resolution pixel units).
    """

    def __init__(self, base: int = 16):
        super().__init__()
        self.encoder = nn.Sequential(
            _conv_block(6, base, stride=2, slope=LRELU_SLOPE),
            _conv_block(base, 2 * base, stride=2, slope=LRELU_SLOPE),
            _conv_block(2 * base, 4 * base, stride=2, slope=LRELU_SLOPE),
            _conv_block(4 * base, 4 * base, slope=LRELU_SLOPE),
            _conv_block(4 * base, 4 * base, slope=LRELU_SLOPE),
        )
        self.decoder = _deconv_block(4 * base, 2 * base)
        self.flow_out = nn.Conv2d(2 * base, 2, 3, padding=1)
        self.upsample = nn.Upsample(scale_factor=4, mode="bilinear", align_corners=False)
        _init_weights(self)

    def forward(self, frame_a: Tensor, frame_b: Tensor) -> Tensor:
        if frame_a.shape != frame_b.shape:
            raise DataIntegrityError(
                f"frame shapes differ: {tuple(frame_a.shape)} vs {tuple(frame_b.shape)}"
            )
        a, single = self._lift(frame_a)
        b, _ = self._lift(frame_b)
        _check_divisible(a.shape[-2], a.shape[-1], 8, "FlowNet")
        x = torch.cat([a, b], dim=1)
        flow = self.upsample(self.flow_out(self.decoder(self.encoder(x))))
        return flow[0] if single else flow


class _SeparableConv(nn.Module):
    """Depthwise 3x3 followed by pointwise 1x1."""

    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.depthwise = nn.Conv2d(c_in, c_in, 3, stride=stride, padding=1, groups=c_in)
        self.pointwise = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class DMNet(nn.Module, _SingleOrBatch):
    """Siamese image-space feature extractor for distortion prediction.

    Four separable convolutions, strides (2, 2, 1, 1), interlaced with
    BatchNorm+ReLU between them (none after the last, so features are
    signed and the cosine similarity spans the full [-1, 1] range).
    The same weights embed both frames of a pair.
    """

    def __init__(self, channels: int = 16):
        super().__init__()
        self.channels = channels
        layers: list[nn.Module] = []
        c_in = 3
        for i, stride in enumerate((2, 2, 1, 1)):
            layers.append(_SeparableConv(c_in, channels, stride))
            if i < 3:
                layers.append(nn.BatchNorm2d(channels))
                layers.append(nn.ReLU(inplace=True))
            c_in = channels
        self.extractor = nn.Sequential(*layers)
        _init_weights(self)

    def features(self, frame: Tensor) -> Tensor:
        x, single = self._lift(frame)
        _check_divisible(x.shape[-2], x.shape[-1], FEATURE_STRIDE, "DMNet")
        out = self.extractor(x)
        return out[0] if single else out

    forward = features


class CFNet(nn.Module, _SingleOrBatch):
    """Correction-cue extractor: ten conv(+BN+LReLU) encoder layers with
    cumulative stride 64 (stride 2 at layers 1,2,4,6,8,10), four stride-2
    deconv(+LReLU) decoder layers, output stride 4 and feature_channels
    channels so the cue fuses directly with propagated features."""

    def __init__(self, feature_channels: int = 32, base: int = 16):
        super().__init__()
        if CFNET_ENCODER_STRIDE // 16 != FEATURE_STRIDE:
            raise ConfigError("CFNet encoder stride / 16 must equal the feature stride")
        self.feature_channels = feature_channels
        widths = [base, (3 * base) // 2, (3 * base) // 2, 2 * base, 2 * base,
                  3 * base, 3 * base, 4 * base, 4 * base, 4 * base]
        strides = [2, 2, 1, 2, 1, 2, 1, 2, 1, 2]
        enc: list[nn.Module] = []
        c_in = 3
        for width, stride in zip(widths, strides):
            enc.append(_conv_block(c_in, width, stride=stride, slope=LRELU_SLOPE))
            c_in = width
        self.encoder = nn.Sequential(*enc)
        dec_widths = [4 * base, 3 * base, (5 * base) // 2, feature_channels]
        dec: list[nn.Module] = []
        for width in dec_widths:
            dec.append(_deconv_block(c_in, width))
            c_in = width
        self.decoder = nn.Sequential(*dec)
        _init_weights(self)

    def forward(self, frame: Tensor) -> Tensor:
        x, single = self._lift(frame)
        _check_divisible(x.shape[-2], x.shape[-1], CFNET_ENCODER_STRIDE, "CFNet")
        out = self.decoder(self.encoder(x))
        return out[0] if single else out


@dataclass
class Networks:
    """The four networks plus the shapes they were built for."""

    segnet: SegNet
    flownet: FlowNet
    dmnet: DMNet
    cfnet: CFNet
    num_classes: int
    feature_channels: int

    def named(self) -> dict[str, nn.Module]:
        return {"segnet": self.segnet, "flownet": self.flownet,
                "dmnet": self.dmnet, "cfnet": self.cfnet}

    def eval_all(self) -> "Networks":
        for m in self.named().values():
            m.eval()
        return self


def build_networks(cfg: NetworkConfig, num_classes: int) -> Networks:
    return Networks(
        segnet=SegNet(num_classes, base=cfg.segnet_base, feature_channels=cfg.feature_channels),
        flownet=FlowNet(base=cfg.flownet_base),
        dmnet=DMNet(channels=cfg.dmnet_channels),
        cfnet=CFNet(feature_channels=cfg.feature_channels, base=cfg.cfnet_base),
        num_classes=num_classes,
        feature_channels=cfg.feature_channels,
    )


def upsample_logits(logits: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear upsampling of class scores (or maps) to label resolution."""
    x = logits[None] if logits.ndim == 3 else logits
    out = torch.nn.functional.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return out[0] if logits.ndim == 3 else out


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def params_digest(module: nn.Module) -> str:
    """Order-stable hash of every parameter and buffer byte (detects any
    drift of nominally frozen networks, including BatchNorm statistics)."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# FLOPs accounting
# ---------------------------------------------------------------------------

LAYER_KINDS = (
    "convolution",
    "separable-convolution",
    "deconvolution",
    "batch-normalization",
    "activation",
    "bilinear-upsampling",
)


@dataclass
class LayerSpec:
    """One costed operator; fields mirror the FLOPs formula inputs."""

    kind: str
    name: str
    c_in: int
    c_out: int
    k_h: int = 1
    k_w: int = 1
    stride: int = 1
    h_in: int = 0
    w_in: int = 0
    h_out: int = 0
    w_out: int = 0
    groups: int = 1


@dataclass
class NetworkSpec:
    name: str
    layers: list[LayerSpec]
    output_stride: int = FEATURE_STRIDE
    feature_channels: int = 0


def layer_flops(layer: LayerSpec) -> int:
    """FLOPs of one operator.

    convolution / deconvolution: 2*Ho*Wo*((Ci/groups)*Kh*Kw + 1)*Co
    separable-convolution: depthwise + pointwise, each via the conv formula
    batch-normalization: 2*Hi*Wi*Ci ; activation: Hi*Wi*Ci
    bilinear-upsampling: 11*Ho*Wo*Co
    """
    if layer.kind in ("convolution", "deconvolution"):
        per_group_c = layer.c_in // layer.groups
        return 2 * layer.h_out * layer.w_out * (per_group_c * layer.k_h * layer.k_w + 1) * layer.c_out
    if layer.kind == "separable-convolution":
        depthwise = 2 * layer.h_out * layer.w_out * (layer.k_h * layer.k_w + 1) * layer.c_in
        pointwise = 2 * layer.h_out * layer.w_out * (layer.c_in + 1) * layer.c_out
        return depthwise + pointwise
    if layer.kind == "batch-normalization":
        return 2 * layer.h_in * layer.w_in * layer.c_in
    if layer.kind == "activation":
        return layer.h_in * layer.w_in * layer.c_in
    if layer.kind == "bilinear-upsampling":
        return 11 * layer.h_out * layer.w_out * layer.c_out
    raise ConfigError(f"unknown layer kind {layer.kind!r}")


@dataclass
class FlopsReport:
    network: str
    input_size: tuple[int, int]
    layers: list[LayerSpec]
    per_layer: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.per_layer:
            self.per_layer = [layer_flops(l) for l in self.layers]

    @property
    def total(self) -> int:
        return sum(self.per_layer)

    def to_dict(self) -> dict:
        return {
            "network": self.network,
            "input_size": list(self.input_size),
            "total_flops": self.total,
            "layers": [
                {"name": l.name, "kind": l.kind, "c_in": l.c_in, "c_out": l.c_out,
                 "kernel": [l.k_h, l.k_w], "stride": l.stride, "groups": l.groups,
                 "out_size": [l.h_out, l.w_out], "flops": f}
                for l, f in zip(self.layers, self.per_layer)
            ],
        }


def describe_flops(spec: NetworkSpec, input_size: tuple[int, int]) -> FlopsReport:
    return FlopsReport(network=spec.name, input_size=input_size, layers=spec.layers)


_TRACEABLE = (nn.Conv2d, nn.ConvTranspose2d, nn.BatchNorm2d, nn.ReLU, nn.LeakyReLU, nn.Upsample)


def trace_network_spec(module: nn.Module, example_args: tuple, name: str) -> NetworkSpec:
    """Build a NetworkSpec by running the module once and recording every
    costed operator with its actual shapes."""
    layers: list[LayerSpec] = []

    def hook(mod, inputs, output):
        x = inputs[0]
        h_in, w_in = x.shape[-2:]
        h_out, w_out = output.shape[-2:]
        c_in = x.shape[-3]
        c_out = output.shape[-3]
        label = f"{name}.{_names[id(mod)]}"
        if isinstance(mod, nn.Conv2d):
            layers.append(LayerSpec("convolution", label, c_in, c_out,
                                    mod.kernel_size[0], mod.kernel_size[1], mod.stride[0],
                                    h_in, w_in, h_out, w_out, mod.groups))
        elif isinstance(mod, nn.ConvTranspose2d):
            layers.append(LayerSpec("deconvolution", label, c_in, c_out,
                                    mod.kernel_size[0], mod.kernel_size[1], mod.stride[0],
                                    h_in, w_in, h_out, w_out, mod.groups))
        elif isinstance(mod, nn.BatchNorm2d):
            layers.append(LayerSpec("batch-normalization", label, c_in, c_out,
                                    h_in=h_in, w_in=w_in, h_out=h_out, w_out=w_out))
        elif isinstance(mod, (nn.ReLU, nn.LeakyReLU)):
            layers.append(LayerSpec("activation", label, c_in, c_out,
                                    h_in=h_in, w_in=w_in, h_out=h_out, w_out=w_out))
        elif isinstance(mod, nn.Upsample):
            layers.append(LayerSpec("bilinear-upsampling", label, c_in, c_out,
                                    h_in=h_in, w_in=w_in, h_out=h_out, w_out=w_out))

    _names = {id(m): n for n, m in module.named_modules()}
    handles = [m.register_forward_hook(hook) for m in module.modules() if isinstance(m, _TRACEABLE)]
    was_training = module.training
    module.eval()
    with torch.no_grad():
        module(*example_args)
    for h in handles:
        h.remove()
    module.train(was_training)
    feature_channels = layers[-1].c_out if layers else 0
    return NetworkSpec(name=name, layers=layers, feature_channels=feature_channels)
