"""The aggregate-image classification network and its building blocks.

The network is a stem convolution (3x3, default depth 32), four
multi-scale residual encoder modules, a 1x1 convolution down to one
channel per class, global average pooling, and a softmax. Each encoder
module halves the spatial size: a stride-2 residual convolution is added
elementwise to a branch path made of three parallel dilated convolutions
(rates 1/2/4 in the MS variant, 1/1/1 in Base), concatenated, mixed by a
depthwise-separable convolution, and 2x2 max pooled. ReLU follows the
stem and each residual addition. Global pooling makes the net fully
convolutional: any input of at least 16x16 pixels is accepted.

Parameters live in a flat ordered dict keyed by dotted names; the same
names key optimizer state, checkpoints, and gradient reports. Both
variants share the exact parameter table (dilation adds no weights), so
their parameter counts are identical by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import GradTape, RawExec
from .errors import ContractError
from .ops import DTYPE, ConvSpec, softmax

MIN_INPUT_SIZE = 16

CANONICAL_NINE = ("A8", "A16", "A32", "B8", "B16", "B32", "C8", "C16", "C32")

_DILATIONS = {"MS": (1, 2, 4), "Base": (1, 1, 1)}


@dataclass(frozen=True)
class AggNetConfig:
    variant: str
    class_count: int
    stem_depth: int = 32
    module_depths: tuple = (64, 128, 256, 256)
    input_channels: int = 3

    def __post_init__(self):
        if self.variant not in _DILATIONS:
            raise ContractError(f"variant must be 'MS' or 'Base', got {self.variant!r}")
        if self.class_count < 2:
            raise ContractError(f"class_count must be >= 2, got {self.class_count}")
        if len(self.module_depths) != 4:
            raise ContractError(
                f"exactly 4 encoder modules are required, got {len(self.module_depths)}")
        if any(d < 2 for d in self.module_depths):
            raise ContractError("module depths must be >= 2")
        if self.stem_depth < 1 or self.input_channels < 1:
            raise ContractError("stem_depth and input_channels must be >= 1")
        object.__setattr__(self, "module_depths", tuple(int(d) for d in self.module_depths))

    @property
    def dilation_rates(self):
        return _DILATIONS[self.variant]


@dataclass(frozen=True)
class GradingCurveLabel:
    """A predicted class: 1-based index plus display name."""

    index: int
    name: str


def class_name(index, class_count):
    """Display name for a 1-based class index.

    With nine classes the canonical granularity-by-grain names are used;
    other class counts fall back to numbered names.
    """
    if not 1 <= index <= class_count:
        raise ContractError(f"class index {index} outside [1, {class_count}]")
    if class_count == len(CANONICAL_NINE):
        return CANONICAL_NINE[index - 1]
    return f"class{index}"


def he_init(shape, rng):
    """He-normal weight draw: N(0, 2/fan_in) per element; biases zero.

    fan_in is inferred from the tensor rank: (k, k, c, o) spatial kernels
    use k*k*c, (k, k, c) depthwise kernels k*k, (c, o) dense maps c.
    Rank-1 shapes are biases and come back as zeros.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 1:
        return np.zeros(shape, dtype=DTYPE)
    if len(shape) == 4:
        fan_in = shape[0] * shape[1] * shape[2]
    elif len(shape) == 3:
        fan_in = shape[0] * shape[1]
    elif len(shape) == 2:
        fan_in = shape[0]
    else:
        raise ContractError(f"no fan-in rule for rank-{len(shape)} shape {shape}")
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(DTYPE)


def _module_param_shapes(in_depth, depth):
    branch = depth // 2
    return [
        ("res.w", (3, 3, in_depth, depth)),
        ("res.b", (depth,)),
        ("br0.w", (3, 3, in_depth, branch)),
        ("br0.b", (branch,)),
        ("br1.w", (3, 3, in_depth, branch)),
        ("br1.b", (branch,)),
        ("br2.w", (3, 3, in_depth, branch)),
        ("br2.b", (branch,)),
        ("sep.dw", (3, 3, 3 * branch)),
        ("sep.dwb", (3 * branch,)),
        ("sep.pw", (1, 1, 3 * branch, depth)),
        ("sep.pwb", (depth,)),
    ]


def param_shapes(config: AggNetConfig):
    """Ordered (name, shape) pairs; this order is the checkpoint layout."""
    shapes = [
        ("stem.w", (3, 3, config.input_channels, config.stem_depth)),
        ("stem.b", (config.stem_depth,)),
    ]
    c = config.stem_depth
    for i, d in enumerate(config.module_depths):
        shapes.extend((f"mod{i}.{n}", s) for n, s in _module_param_shapes(c, d))
        c = d
    shapes.append(("head.w", (1, 1, c, config.class_count)))
    shapes.append(("head.b", (config.class_count,)))
    return shapes


def init_params(config: AggNetConfig, rng):
    """Freshly initialized parameter table (dict name -> array)."""
    return {name: he_init(shape, rng) for name, shape in param_shapes(config)}


def param_count(config: AggNetConfig):
    return sum(int(np.prod(s)) for _, s in param_shapes(config))


def is_bias(name):
    """Whether a parameter-table key names a bias vector."""
    return name.endswith("b")


def perturb_biases(params, rng, scale=0.05):
    """Copy of the table with biases drawn from N(0, scale).

    Freshly initialized biases are exactly zero, which parks many
    pre-ReLU values exactly on the activation kink (zero regions stay
    zero through whole modules). Finite-difference gradient checks need
    a generic point in parameter space, so they evaluate on a perturbed
    copy; training still starts from zero biases.
    """
    out = {}
    for name, value in params.items():
        if is_bias(name):
            out[name] = rng.normal(0.0, scale, size=value.shape).astype(value.dtype)
        else:
            out[name] = value.copy()
    return out


def _msenc(ex, x, p, variant):
    """One encoder module on executor `ex`; `p` maps local names to tensors."""
    res = ex.conv(x, p["res.w"], p["res.b"],
                  ConvSpec(3, _depth_of(p["res.w"]), _depth_out(p["res.w"]), stride=2))
    parts = []
    for j, dr in enumerate(_DILATIONS[variant]):
        w = p[f"br{j}.w"]
        parts.append(ex.conv(x, w, p[f"br{j}.b"],
                             ConvSpec(3, _depth_of(w), _depth_out(w), dilation=dr)))
    cat = ex.concat(parts)
    sep = ex.dwsep(cat, p["sep.dw"], p["sep.pw"], p["sep.dwb"], p["sep.pwb"])
    return ex.relu(ex.add(res, ex.maxpool(sep)))


def _depth_of(w):
    return (w.value if hasattr(w, "value") else w).shape[2]


def _depth_out(w):
    return (w.value if hasattr(w, "value") else w).shape[3]


def forward_on_executor(ex, image, params, config: AggNetConfig):
    """Shared forward pass. Returns (class scores, pre-pooling head map).

    `params` values may be arrays (RawExec) or get wrapped into tape nodes;
    registration order follows the parameter table.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != config.input_channels:
        raise ContractError(
            f"expected (h, w, {config.input_channels}) image, got shape {img.shape}")
    if img.shape[0] < MIN_INPUT_SIZE or img.shape[1] < MIN_INPUT_SIZE:
        raise ContractError(
            f"input {img.shape[0]}x{img.shape[1]} is below the minimum "
            f"{MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}")
    reg = {name: ex.param(name, params[name]) for name, _ in param_shapes(config)}
    x = ex.input(img.astype(DTYPE, copy=False))
    x = ex.relu(ex.conv(x, reg["stem.w"], reg["stem.b"],
                        ConvSpec(3, config.input_channels, config.stem_depth)))
    for i in range(4):
        prefix = f"mod{i}."
        local = {k[len(prefix):]: v for k, v in reg.items() if k.startswith(prefix)}
        x = _msenc(ex, x, local, config.variant)
    c = config.module_depths[-1]
    head = ex.conv(x, reg["head.w"], reg["head.b"], ConvSpec(1, c, config.class_count))
    return ex.gap(head), head


def msenc_forward(input, module_params, variant):
    """Standalone encoder module evaluation on plain arrays.

    `module_params` uses the local names res.w/res.b, br{0,1,2}.{w,b},
    sep.{dw,dwb,pw,pwb}. Output is ceil(m/2) x ceil(n/2) x depth.
    """
    if variant not in _DILATIONS:
        raise ContractError(f"variant must be 'MS' or 'Base', got {variant!r}")
    ex = RawExec()
    return _msenc(ex, ex.input(input), module_params, variant)


def aggnet_forward(image, params, config: AggNetConfig):
    """Class probabilities for one image; always a point on the N-simplex."""
    scores, _ = forward_on_executor(RawExec(), image, params, config)
    return softmax(scores)


def aggnet_head_map(image, params, config: AggNetConfig):
    """The N-channel map feeding global average pooling (for inspection)."""
    _, head = forward_on_executor(RawExec(), image, params, config)
    return head


def tape_loss(image, true_index, params, config: AggNetConfig):
    """Record one sample's forward pass and return (tape, loss node).

    `true_index` is 0-based here; callers translate from 1-based labels.
    """
    tape = GradTape()
    scores, _ = forward_on_executor(tape, image, params, config)
    loss = tape.softmax_cross_entropy(scores, true_index)
    return tape, loss


def predict_class(probabilities):
    """Argmax class of a probability vector, ties to the lowest index."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ContractError(f"expected a probability vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > 1e-6 or p.min() < -1e-12:
        raise ContractError("input is not a probability distribution")
    idx = int(np.argmax(p)) + 1
    return GradingCurveLabel(index=idx, name=class_name(idx, p.size))


@dataclass(frozen=True)
class RFStage:
    name: str
    extent: int
    stride: int
    rf: int


@dataclass(frozen=True)
class RFReport:
    stages: tuple
    total: int
    branch_extents: tuple

    def table(self):
        lines = [f"{'stage':<14}{'extent':>7}{'stride':>7}{'rf':>6}"]
        lines += [f"{s.name:<14}{s.extent:>7}{s.stride:>7}{s.rf:>6}" for s in self.stages]
        return "\n".join(lines)


def receptive_field(config: AggNetConfig):
    """Receptive-field recursion rf += (extent - 1) * jump over the net.

    Within each encoder module the branch path (dilated conv, separable
    conv, pool) dominates the residual conv, so the recursion follows it.
    Per-module branch extents are (k-1)*rate+1 for the three dilated
    convolutions.
    """
    rates = _DILATIONS[config.variant]
    extents = tuple((3 - 1) * r + 1 for r in rates)
    rf, jump = 1, 1
    stages = []

    def push(name, extent, stride):
        nonlocal rf, jump
        rf += (extent - 1) * jump
        stages.append(RFStage(name, extent, stride, rf))
        jump *= stride

    push("stem", 3, 1)
    for i in range(4):
        push(f"mod{i}.branch", max(extents), 1)
        push(f"mod{i}.sep", 3, 1)
        push(f"mod{i}.pool", 2, 2)
    push("head", 1, 1)
    return RFReport(stages=tuple(stages), total=rf,
                    branch_extents=tuple(extents for _ in range(4)))
