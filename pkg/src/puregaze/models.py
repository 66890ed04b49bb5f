"""Backbone, gaze head and SA-Module, and their composition.

The backbone is shared: the gaze path (backbone + head) and the
reconstruction path (backbone + SA-Module) hold the very same module object.
The SA-Module is only needed for training; :meth:`PureGaze.predict` never
touches it.
"""
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError

SA_CHANNELS = (512, 256, 128, 64, 32, 16)
MAX_SA_DEPTH = len(SA_CHANNELS)
PARAMETER_GROUPS = ("backbone", "head", "sa")


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, inplanes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.downsample = None
        if stride != 1 or inplanes != planes:
            self.downsample = nn.Sequential(
                nn.Conv2d(inplanes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResNet18Features(nn.Module):
    """Convolutional part of ResNet-18 (no pooling, no classifier).

    Parameter names follow torchvision so its ``resnet18`` state dicts load
    directly (minus ``fc.*``). ``width`` scales every stage; 64 is the
    standard network, with ``8 * width`` output channels at stride 32.
    """

    def __init__(self, width: int = 64):
        super().__init__()
        self.width = width
        self.conv1 = nn.Conv2d(3, width, 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        planes = [width, 2 * width, 4 * width, 8 * width]
        inplanes = width
        for i, p in enumerate(planes):
            stride = 1 if i == 0 else 2
            setattr(self, f"layer{i + 1}", nn.Sequential(BasicBlock(inplanes, p, stride), BasicBlock(p, p)))
            inplanes = p
        self.out_channels = inplanes
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))


class GazeHead(nn.Module):
    """Global average pooling followed by a two-layer MLP ending in (pitch, yaw)."""

    def __init__(self, in_channels: int, hidden: int = 1000):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Linear(in_channels, hidden)
        self.relu = nn.ReLU(inplace=True)
        self.fc2 = nn.Linear(hidden, 2)

    def forward(self, features):
        x = self.pool(features).flatten(1)
        return self.fc2(self.relu(self.fc1(x)))


def _fold_taps(w, dim, phase):
    # Nearest 2x upsampling makes neighbouring 3x3 taps read the same source
    # pixel: phase 0 sees sources (i-1, i, i), phase 1 sees (i, i, i+1).
    w0, w1, w2 = w.unbind(dim)
    if phase == 0:
        return torch.stack([w0, w1 + w2], dim)
    return torch.stack([w0 + w1, w2], dim)


class UpConv(nn.Module):
    """Nearest-neighbour 2x upsampling followed by a 3x3 convolution (padding 1).

    Computed as four 2x2 convolutions at the input resolution, one per output
    phase, which is exactly equal to upsample-then-convolve but needs 2.25x
    fewer multiply-adds. Parameters live in a plain ``nn.Conv2d``.
    """

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)

    def forward(self, x):
        w, b = self.conv.weight, self.conv.bias
        rows = []
        for a in (0, 1):
            wa = _fold_taps(w, 2, a)
            cols = []
            for c in (0, 1):
                k = _fold_taps(wa, 3, c)
                cols.append(F.conv2d(F.pad(x, (1 - c, c, 1 - a, a)), k, b))
            rows.append(torch.stack(cols, dim=-1))
        y = torch.stack(rows, dim=3)  # (B, C, H, 2, W, 2)
        n, ch, h, _, w_, _ = y.shape
        return y.reshape(n, ch, 2 * h, 2 * w_)


class SAModule(nn.Module):
    """Upsampling decoder from a stride-``2**depth`` feature map back to RGB.

    Each block is a 2x nearest-neighbour resize, a 3x3 convolution and a
    ReLU; a final 1x1 convolution maps to 3 channels and a sigmoid keeps the
    output in [0, 1].
    """

    def __init__(self, in_channels: int, depth: int = 5, channels=None):
        super().__init__()
        if channels is None:
            if not 1 <= depth <= MAX_SA_DEPTH:
                raise ConfigurationError(f"SA-Module depth must be in 1..{MAX_SA_DEPTH}, got {depth}")
            channels = SA_CHANNELS[-depth:]
        channels = tuple(channels)
        self.depth = len(channels)
        blocks = []
        prev = in_channels
        for c in channels:
            blocks.append(nn.Sequential(UpConv(prev, c), nn.ReLU(inplace=True)))
            prev = c
        self.blocks = nn.Sequential(*blocks)
        self.to_rgb = nn.Conv2d(prev, 3, 1)

    def forward(self, features):
        return torch.sigmoid(self.to_rgb(self.blocks(features)))


class PureGaze(nn.Module):
    """Backbone + gaze head + SA-Module sharing one backbone instance."""

    def __init__(self, backbone: nn.Module, head: nn.Module, sa: nn.Module):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.sa = sa

    def forward(self, images):
        features = self.backbone(images)
        return features, self.head(features), self.sa(features)

    def predict(self, images):
        return self.head(self.backbone(images))

    def gaze_network(self) -> nn.Sequential:
        return nn.Sequential(self.backbone, self.head)

    def reconstruction_network(self) -> nn.Sequential:
        return nn.Sequential(self.backbone, self.sa)

    def parameter_groups(self) -> dict:
        return {name: list(getattr(self, name).parameters()) for name in PARAMETER_GROUPS}

    def inference_parameter_count(self) -> int:
        return count_parameters(self.backbone) + count_parameters(self.head)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def infer_sa_depth(extractor: nn.Module, probe_size: int = 2 ** MAX_SA_DEPTH * 2):
    """Return (depth, channels) for a feature extractor from one dry run.

    The extractor must reduce both spatial axes by the same power of two,
    between 2 and ``2**MAX_SA_DEPTH``. The dry run happens in eval mode
    without gradients so no statistics or parameters change.
    """
    was_training = extractor.training
    extractor.eval()
    try:
        with torch.no_grad():
            param = next(extractor.parameters(), None)
            dtype = param.dtype if param is not None else torch.float32
            out = extractor(torch.zeros(1, 3, probe_size, probe_size, dtype=dtype))
    finally:
        extractor.train(was_training)
    if out.dim() != 4:
        raise ConfigurationError(f"extractor must return a (B, C, H, W) feature map, got {tuple(out.shape)}")
    h, w = out.shape[-2:]
    for depth in range(1, MAX_SA_DEPTH + 1):
        if h * 2 ** depth == probe_size and w * 2 ** depth == probe_size:
            return depth, out.shape[1]
    raise ConfigurationError(
        f"extractor maps {probe_size}x{probe_size} to {h}x{w}; stride must be 2**N with N in 1..{MAX_SA_DEPTH}")


def attach_sa(extractor: nn.Module, channels: int, head: nn.Module = None) -> PureGaze:
    """Attach a fresh SA-Module (and a gaze head if none is given) to ``extractor``.

    The extractor is used as is: its parameters are neither copied nor
    re-initialized.
    """
    depth, found = infer_sa_depth(extractor)
    if found != channels:
        raise ConfigurationError(f"extractor outputs {found} channels, expected {channels}")
    if head is None:
        head = GazeHead(channels)
    return PureGaze(extractor, head, SAModule(channels, depth))


def build_puregaze(resolution: int = 224, width: int = 64, head_hidden: int = 1000) -> PureGaze:
    """ResNet-18 backbone, 1000-2 MLP head and a 5-block SA-Module.

    Modules are created in the order backbone, head, SA-Module, so for a
    fixed torch seed the backbone and head do not depend on whether the
    SA-Module is ever used.
    """
    if resolution <= 0 or resolution % 32:
        raise ConfigurationError(f"resolution {resolution} is not divisible by 32")
    backbone = ResNet18Features(width)
    head = GazeHead(backbone.out_channels, head_hidden)
    sa = SAModule(backbone.out_channels, 5)
    return PureGaze(backbone, head, sa)


@dataclass(frozen=True)
class Route:
    loss: str
    updates: tuple
    constant_inputs: tuple
    description: str


def stop_gradient_boundaries(bundle: PureGaze) -> dict:
    """Which parameter group each loss may update.

    Each loss is differentiated only with respect to the parameters of its
    own group; everything upstream of those parameters acts as a constant
    for that loss. The backbone receives gaze gradients through the
    ``beta * L_gaze`` part of its own loss, never through the head's.
    """
    return {
        "sa": Route("sa", ("sa",), ("backbone",),
                    "L_SA = L_rec; features entering the SA-Module are constants"),
        "mlp": Route("mlp", ("head",), ("backbone",),
                     "L_MLP = L_gaze; features entering the head are constants"),
        "backbone": Route("backbone", ("backbone",), ("head", "sa"),
                          "L_backbone = alpha * adversarial term + beta * L_gaze; head and SA-Module frozen"),
    }
