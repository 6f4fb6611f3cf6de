"""Model families, construction, forward pass, and checkpoint files.

Two families over NCHW weather maps, both regressing two nonnegative
outputs (solar MW, wind MW):

* "linear": flatten, then a chain of dropout -> fully-connected -> relu
  blocks (widths 800/400/200/2 by default). The trailing relu clamps
  predictions at zero.
* "resnet": 7x7/stride-2 stem conv + batchnorm + relu, four stages of
  bottleneck blocks (1x1 down, 3x3, 1x1 up, batchnorm + relu on each,
  additive shortcut before the block's final relu), 2x2/stride-2 average
  pooling between stages, global average pooling, then a small
  relu-capped regression head.

A Model owns named parameter and buffer tensors; builders consume an Rng
in a fixed construction order, so (seed -> initial weights) is
reproducible bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .layers import BatchNorm2d, DropoutSpec, LinearLayer, Rng, batchnorm2d_forward, dropout, kaiming_init, linear_forward

CHECKPOINT_MAGIC = b"WXPM"
CHECKPOINT_VERSION = 1

FAMILIES = ("linear", "resnet")


@dataclass(frozen=True)
class ArchitectureSpec:
    """Everything needed to rebuild a model skeleton (not its weights)."""

    family: str
    input_channels: int
    input_hw: tuple[int, int] = (115, 108)
    outputs: int = 2
    # linear family
    fc_widths: tuple[int, ...] = (800, 400, 200)
    dropout_p: float = 0.2
    # resnet family
    stem_width: int = 32
    stage_blocks: tuple[int, ...] = (3, 3, 2, 2)
    stage_widths: tuple[int, ...] = (64, 128, 256, 512)
    head_hidden: int = 64

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.input_channels <= 0:
            raise ValueError("input_channels must be positive")
        h, w = self.input_hw
        if h <= 0 or w <= 0:
            raise ValueError(f"bad input_hw {self.input_hw}")
        if self.outputs <= 0:
            raise ValueError("outputs must be positive")
        if self.family == "linear":
            if not self.fc_widths or any(v <= 0 for v in self.fc_widths):
                raise ValueError(f"bad fc_widths {self.fc_widths}")
            if not 0.0 <= self.dropout_p < 1.0:
                raise ValueError(f"bad dropout_p {self.dropout_p}")
        else:
            if len(self.stage_blocks) != len(self.stage_widths) or not self.stage_blocks:
                raise ValueError("stage_blocks and stage_widths must be equal-length, non-empty")
            if any(b <= 0 for b in self.stage_blocks):
                raise ValueError(f"bad stage_blocks {self.stage_blocks}")
            if any(wd <= 0 or wd % 4 for wd in self.stage_widths):
                raise ValueError("stage widths must be positive multiples of 4")
            if self.stem_width <= 0 or self.head_hidden <= 0:
                raise ValueError("stem_width and head_hidden must be positive")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureSpec":
        kv = {}
        for ln in text.strip().splitlines():
            if not ln.strip():
                continue
            if "=" not in ln:
                raise ValueError(f"bad architecture line {ln!r}")
            k, v = ln.split("=", 1)
            kv[k.strip()] = v.strip()
        known = {f.name: f for f in fields(cls)}
        unknown = set(kv) - set(known)
        if unknown:
            raise ValueError(f"unknown architecture keys {sorted(unknown)}")
        args = {}
        for name, f in known.items():
            if name not in kv:
                continue
            raw = kv[name]
            if name == "family":
                args[name] = raw
            elif name == "dropout_p":
                args[name] = float(raw)
            elif name in ("input_hw", "fc_widths", "stage_blocks", "stage_widths"):
                args[name] = tuple(int(x) for x in raw.split(","))
            else:
                args[name] = int(raw)
        if "family" not in args or "input_channels" not in args:
            raise ValueError("architecture text must carry family and input_channels")
        return cls(**args)


@dataclass
class Conv2dLayer:
    kernel: T.Tensor  # (F, C, kh, kw)
    bias: T.Tensor    # (F,)
    stride: int
    pad: int

    @classmethod
    def new(cls, in_ch: int, out_ch: int, k: int, stride: int, pad: int,
            rng: Rng, dtype=np.float32) -> "Conv2dLayer":
        kernel = kaiming_init((out_ch, in_ch, k, k), in_ch * k * k, rng, dtype)
        bias = T.create([out_ch], 0.0, dtype=dtype, requires_grad=True)
        return cls(kernel, bias, stride, pad)

    def forward(self, x: T.Tensor) -> T.Tensor:
        return T.conv2d(x, self.kernel, self.bias, stride=self.stride, pad=self.pad)


@dataclass
class _Bottleneck:
    conv1: Conv2dLayer
    bn1: BatchNorm2d
    conv2: Conv2dLayer
    bn2: BatchNorm2d
    conv3: Conv2dLayer
    bn3: BatchNorm2d
    proj: Conv2dLayer | None
    proj_bn: BatchNorm2d | None


class Model:
    """Named parameters/buffers plus the wiring to run them."""

    def __init__(self, spec: ArchitectureSpec, params: dict, buffers: dict, net: dict):
        self.spec = spec
        self.params = params
        self.buffers = buffers
        self.net = net
        self.mode = "train"

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self

    def __repr__(self):
        return (f"Model(family={self.spec.family}, params={param_count(self)}, "
                f"mode={self.mode})")


def param_count(model: Model) -> int:
    """Trainable parameter entries (buffers excluded)."""
    return int(sum(p.data.size for p in model.params.values()))


# ---------------------------------------------------------------------------
# builders

def _register_linear(params: dict, name: str, lay: LinearLayer) -> LinearLayer:
    params[f"{name}.weight"] = lay.weight
    params[f"{name}.bias"] = lay.bias
    return lay


def _register_conv(params: dict, name: str, lay: Conv2dLayer) -> Conv2dLayer:
    params[f"{name}.kernel"] = lay.kernel
    params[f"{name}.bias"] = lay.bias
    return lay


def _register_bn(params: dict, buffers: dict, name: str, bn: BatchNorm2d) -> BatchNorm2d:
    params[f"{name}.gamma"] = bn.gamma
    params[f"{name}.beta"] = bn.beta
    buffers[f"{name}.running_mean"] = bn.running_mean
    buffers[f"{name}.running_var"] = bn.running_var
    return bn


def build_model(spec: ArchitectureSpec, rng: Rng, dtype=np.float32) -> Model:
    if spec.family == "linear":
        return _build_linear(spec, rng, dtype)
    return _build_resnet(spec, rng, dtype)


def build_linear(input_channels: int, rng: Rng, *, input_hw=(115, 108),
                 fc_widths=(800, 400, 200), dropout_p=0.2, outputs=2,
                 dtype=np.float32) -> Model:
    spec = ArchitectureSpec("linear", input_channels, tuple(input_hw),
                            outputs, tuple(fc_widths), dropout_p)
    return build_model(spec, rng, dtype)


def build_resnet(input_channels: int, rng: Rng, *, input_hw=(115, 108),
                 stem_width=32, stage_blocks=(3, 3, 2, 2),
                 stage_widths=(64, 128, 256, 512), head_hidden=64, outputs=2,
                 dtype=np.float32) -> Model:
    spec = ArchitectureSpec("resnet", input_channels, tuple(input_hw), outputs,
                            stem_width=stem_width,
                            stage_blocks=tuple(stage_blocks),
                            stage_widths=tuple(stage_widths),
                            head_hidden=head_hidden)
    return build_model(spec, rng, dtype)


def _build_linear(spec: ArchitectureSpec, rng: Rng, dtype) -> Model:
    params: dict = {}
    h, w = spec.input_hw
    sizes = [spec.input_channels * h * w, *spec.fc_widths, spec.outputs]
    layers = []
    for i in range(len(sizes) - 1):
        lay = LinearLayer.new(sizes[i], sizes[i + 1], rng, dtype)
        layers.append(_register_linear(params, f"fc{i + 1}", lay))
    net = {"layers": layers, "drop": DropoutSpec(spec.dropout_p)}
    return Model(spec, params, {}, net)


def _resnet_spatial_plan(spec: ArchitectureSpec) -> list[tuple[int, int]]:
    """(H, W) entering each stage; raises if a pool would underflow."""
    h, w = spec.input_hw
    h = (h + 2 * 3 - 7) // 2 + 1
    w = (w + 2 * 3 - 7) // 2 + 1
    dims = [(h, w)]
    for _ in range(len(spec.stage_blocks) - 1):
        if h < 2 or w < 2:
            raise ValueError(
                f"input {spec.input_hw} too small: inter-stage pool needs >=2x2, got {h}x{w}")
        h = (h - 2) // 2 + 1
        w = (w - 2) // 2 + 1
        dims.append((h, w))
    return dims


def _build_resnet(spec: ArchitectureSpec, rng: Rng, dtype) -> Model:
    params: dict = {}
    buffers: dict = {}
    _resnet_spatial_plan(spec)  # validate geometry up front

    stem_conv = _register_conv(params, "stem.conv",
                               Conv2dLayer.new(spec.input_channels, spec.stem_width,
                                               7, 2, 3, rng, dtype))
    stem_bn = _register_bn(params, buffers, "stem.bn",
                           BatchNorm2d(spec.stem_width, dtype=dtype))

    stages: list[list[_Bottleneck]] = []
    in_ch = spec.stem_width
    for si, (nblocks, width) in enumerate(zip(spec.stage_blocks, spec.stage_widths), 1):
        mid = width // 4
        blocks = []
        for bi in range(1, nblocks + 1):
            base = f"s{si}.b{bi}"
            conv1 = _register_conv(params, f"{base}.conv1",
                                   Conv2dLayer.new(in_ch, mid, 1, 1, 0, rng, dtype))
            bn1 = _register_bn(params, buffers, f"{base}.bn1", BatchNorm2d(mid, dtype=dtype))
            conv2 = _register_conv(params, f"{base}.conv2",
                                   Conv2dLayer.new(mid, mid, 3, 1, 1, rng, dtype))
            bn2 = _register_bn(params, buffers, f"{base}.bn2", BatchNorm2d(mid, dtype=dtype))
            conv3 = _register_conv(params, f"{base}.conv3",
                                   Conv2dLayer.new(mid, width, 1, 1, 0, rng, dtype))
            bn3 = _register_bn(params, buffers, f"{base}.bn3", BatchNorm2d(width, dtype=dtype))
            proj = proj_bn = None
            if in_ch != width:
                proj = _register_conv(params, f"{base}.proj",
                                      Conv2dLayer.new(in_ch, width, 1, 1, 0, rng, dtype))
                proj_bn = _register_bn(params, buffers, f"{base}.proj_bn",
                                       BatchNorm2d(width, dtype=dtype))
            blocks.append(_Bottleneck(conv1, bn1, conv2, bn2, conv3, bn3, proj, proj_bn))
            in_ch = width
        stages.append(blocks)

    fc1 = _register_linear(params, "head.fc1",
                           LinearLayer.new(spec.stage_widths[-1], spec.head_hidden, rng, dtype))
    fc2 = _register_linear(params, "head.fc2",
                           LinearLayer.new(spec.head_hidden, spec.outputs, rng, dtype))

    net = {"stem_conv": stem_conv, "stem_bn": stem_bn, "stages": stages,
           "fc1": fc1, "fc2": fc2}
    return Model(spec, params, buffers, net)


# ---------------------------------------------------------------------------
# forward

def model_forward(model: Model, x: T.Tensor, rng: Rng | None = None) -> T.Tensor:
    """Run a batch through the model. Train mode may draw from rng (dropout)."""
    spec = model.spec
    h, w = spec.input_hw
    if x.data.ndim != 4 or x.shape[1:] != (spec.input_channels, h, w):
        raise T.ShapeError(
            f"model expects (N,{spec.input_channels},{h},{w}), got {x.shape}")
    if spec.family == "linear":
        return _forward_linear(model, x, rng)
    return _forward_resnet(model, x)


def _forward_linear(model: Model, x: T.Tensor, rng: Rng | None) -> T.Tensor:
    spec = model.spec
    drop: DropoutSpec = model.net["drop"]
    if model.mode == "train" and drop.p > 0.0 and rng is None:
        raise ValueError("train-mode forward of the linear family needs an Rng for dropout")
    n = x.shape[0]
    h = T.reshape(x, (n, spec.input_channels * spec.input_hw[0] * spec.input_hw[1]))
    for lay in model.net["layers"]:
        h = dropout(h, drop, model.mode, rng)
        h = T.relu(linear_forward(lay, h))
    return h


def _block_forward(blk: _Bottleneck, x: T.Tensor, mode: str) -> T.Tensor:
    h = T.relu(batchnorm2d_forward(blk.bn1, blk.conv1.forward(x), mode))
    h = T.relu(batchnorm2d_forward(blk.bn2, blk.conv2.forward(h), mode))
    h = batchnorm2d_forward(blk.bn3, blk.conv3.forward(h), mode)
    shortcut = x
    if blk.proj is not None:
        shortcut = batchnorm2d_forward(blk.proj_bn, blk.proj.forward(x), mode)
    return T.relu(T.add(h, shortcut))


def _forward_resnet(model: Model, x: T.Tensor) -> T.Tensor:
    mode = model.mode
    net = model.net
    h = T.relu(batchnorm2d_forward(net["stem_bn"], net["stem_conv"].forward(x), mode))
    stages = net["stages"]
    for si, blocks in enumerate(stages):
        for blk in blocks:
            h = _block_forward(blk, h, mode)
        if si < len(stages) - 1:
            h = T.avgpool2d(h, k=2, stride=2)
    h = T.reduce_mean(h, axes=(2, 3))          # global average pool -> (N, C)
    h = T.relu(linear_forward(model.net["fc1"], h))
    return T.relu(linear_forward(model.net["fc2"], h))


# ---------------------------------------------------------------------------
# checkpoint files

def _write_block(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(model: Model, path) -> None:
    """Write architecture text plus every parameter and buffer as float32."""
    for name, p in {**model.params, **model.buffers}.items():
        if p.dtype != np.float32:
            raise ValueError(f"checkpoints are float32-only; {name} is {p.dtype}")
    spec_text = model.spec.to_text().encode("utf-8")
    records = list(model.params.items()) + list(model.buffers.items())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(spec_text)))
        fh.write(spec_text)
        fh.write(struct.pack("<I", len(records)))
        for name, p in records:
            _write_block(fh, name, p.data)


class CheckpointError(ValueError):
    """Malformed or mismatched checkpoint file."""


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def load_checkpoint(path) -> Model:
    """Rebuild the model skeleton from the stored architecture, then fill
    every tensor by name. Returns the model in eval mode."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (spec_len,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            spec = ArchitectureSpec.from_text(_read_exact(fh, spec_len).decode("utf-8"))
        except ValueError as e:
            raise CheckpointError(f"{path}: {e}") from e
        model = build_model(spec, Rng(0))
        slots = {**model.params, **model.buffers}
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        seen = set()
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            data = np.frombuffer(_read_exact(fh, 4 * int(np.prod(shape))), dtype="<f4")
            if name not in slots:
                raise CheckpointError(f"{path}: unknown tensor {name!r}")
            if name in seen:
                raise CheckpointError(f"{path}: duplicate tensor {name!r}")
            if tuple(shape) != slots[name].shape:
                raise CheckpointError(
                    f"{path}: {name} stored {tuple(shape)}, model wants {slots[name].shape}")
            slots[name].data[...] = data.reshape(shape)
            seen.add(name)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    missing = set(slots) - seen
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:4]}")
    return model.eval()
