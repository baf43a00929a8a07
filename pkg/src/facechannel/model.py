"""FaceChannel network: ten 3x3 convolutions in four max-pooled blocks, a
shunting-inhibition unit on the final convolution, a ReLU hidden layer and
two linear heads (arousal, valence).
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, MissingPretrainedError, ShapeError

SHUNTING_EPS = 1e-4
WEIGHTS_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 96
    input_channels: int = 1
    channel_plan: tuple[int, ...] = (16, 16, 32, 32, 64, 64, 64, 128, 128, 128)
    kernel_size: int = 3
    pool_after: tuple[int, ...] = (2, 4, 7, 10)
    dense_units: int = 256
    dense_layers: int = 1
    shunting_on_last: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channel_plan", tuple(int(c) for c in self.channel_plan))
        object.__setattr__(self, "pool_after", tuple(sorted(int(p) for p in self.pool_after)))
        self.validate()

    def validate(self):
        if len(self.channel_plan) != 10:
            raise ConfigError(f"channel_plan needs exactly 10 entries, got {len(self.channel_plan)}")
        if len(self.pool_after) != 4 or len(set(self.pool_after)) != 4:
            raise ConfigError(f"pool_after needs exactly 4 distinct positions, got {self.pool_after}")
        if self.pool_after[-1] != 10 or self.pool_after[0] < 1:
            raise ConfigError("pool positions must lie in 1..10 and the last one must follow conv 10")
        if self.input_size <= 0 or self.input_size % 16:
            raise ConfigError(f"input_size {self.input_size} is not divisible by 16")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd number")
        if self.input_channels not in (1, 3):
            raise ConfigError("input_channels must be 1 or 3")
        if self.dense_units < 1 or self.dense_layers < 1:
            raise ConfigError("dense_units and dense_layers must be >= 1")
        if any(c < 1 for c in self.channel_plan):
            raise ConfigError("channel counts must be positive")

    @property
    def feature_size(self) -> int:
        return self.input_size // 16

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_plan"] = list(self.channel_plan)
        d["pool_after"] = list(self.pool_after)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


class FreezeScheme(str, enum.Enum):
    SCRATCH = "scratch"
    LAST_CONV = "last-conv"
    ALL_LAYERS = "all-layers"

    @classmethod
    def parse(cls, value: "str | FreezeScheme") -> "FreezeScheme":
        if isinstance(value, cls):
            return value
        norm = str(value).strip().lower().replace("_", "-").replace(" ", "-")
        aliases = {"lastconv": "last-conv", "alllayers": "all-layers"}
        return cls(aliases.get(norm, norm))


def shunting_forward(u: torch.Tensor, inhibition: torch.Tensor, decay: torch.Tensor, eps: float = SHUNTING_EPS):
    """Divisive inhibition ``u / (max(a, eps) + I)``.

    ``decay`` holds one value per filter. For 4-D ``(N, C, H, W)`` maps it is
    broadcast over batch and space; otherwise plain broadcasting applies.
    """
    if u.shape != inhibition.shape:
        raise ShapeError(f"excitatory {tuple(u.shape)} and inhibitory {tuple(inhibition.shape)} maps differ")
    if u.dim() == 4 and decay.dim() == 1:
        if decay.shape[0] != u.shape[1]:
            raise ShapeError(f"decay has {decay.shape[0]} entries for {u.shape[1]} filters")
        decay = decay.view(1, -1, 1, 1)
    return u / (torch.clamp(decay, min=eps) + inhibition)


class ShuntingConv2d(nn.Module):
    """Convolution whose ReLU output is divisively gated by a parallel
    inhibitory convolution over the same input."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, eps: float = SHUNTING_EPS):
        super().__init__()
        pad = kernel_size // 2
        self.excitatory = nn.Conv2d(in_channels, out_channels, kernel_size, padding=pad)
        self.inhibitory = nn.Conv2d(in_channels, out_channels, kernel_size, padding=pad)
        self.decay = nn.Parameter(torch.ones(out_channels))
        self.eps = eps

    def forward(self, x):
        u = F.relu(self.excitatory(x))
        inhibition = F.relu(self.inhibitory(x))
        return shunting_forward(u, inhibition, self.decay, self.eps)


class FaceChannelModel(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        config.validate()
        self.config = config
        self.pretrained_source: str | None = None

        k = config.kernel_size
        blocks = []
        block: list[nn.Module] = []
        in_ch = config.input_channels
        for i, out_ch in enumerate(config.channel_plan, start=1):
            if i == 10 and config.shunting_on_last:
                block.append(ShuntingConv2d(in_ch, out_ch, k))
            else:
                block.append(nn.Sequential(nn.Conv2d(in_ch, out_ch, k, padding=k // 2), nn.ReLU()))
            in_ch = out_ch
            if i in config.pool_after:
                blocks.append(nn.Sequential(*block))
                block = []
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(2, 2)

        flat = in_ch * config.feature_size**2
        dense = []
        for _ in range(config.dense_layers):
            dense += [nn.Linear(flat, config.dense_units), nn.ReLU()]
            flat = config.dense_units
        self.dense = nn.Sequential(*dense)
        self.arousal_head = nn.Linear(flat, 1)
        self.valence_head = nn.Linear(flat, 1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Output of the final (shunting) convolution, before the last pool."""
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < len(self.blocks) - 1:
                x = self.pool(x)
        return x

    def forward(self, x: torch.Tensor):
        c = self.config
        if x.dim() != 4 or tuple(x.shape[1:]) != (c.input_channels, c.input_size, c.input_size):
            raise ShapeError(
                f"expected (N, {c.input_channels}, {c.input_size}, {c.input_size}) input, got {tuple(x.shape)}"
            )
        h = self.pool(self.features(x))
        h = self.dense(torch.flatten(h, 1))
        return self.arousal_head(h).squeeze(1), self.valence_head(h).squeeze(1)

    def conv_layers(self) -> list[nn.Module]:
        out = []
        for block in self.blocks:
            for layer in block:
                out.append(layer if isinstance(layer, ShuntingConv2d) else layer[0])
        return out

    def parameter_groups(self) -> dict[str, str]:
        """Map each parameter name to ``block1``..``block4``, ``dense`` or ``head``."""
        groups = {}
        for name, _ in self.named_parameters():
            if name.startswith("blocks."):
                groups[name] = f"block{int(name.split('.')[1]) + 1}"
            elif name.startswith("dense."):
                groups[name] = "dense"
            else:
                groups[name] = "head"
        return groups


def _init_weights(model: FaceChannelModel):
    # He-normal for ReLU layers, Glorot-uniform linear heads, zero biases,
    # unit passive decay
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(m.bias)
        elif isinstance(m, ShuntingConv2d):
            nn.init.ones_(m.decay)
    for head in (model.arousal_head, model.valence_head):
        nn.init.xavier_uniform_(head.weight)


def build_model(config: ModelConfig = ModelConfig(), seed: int = 0) -> FaceChannelModel:
    """Build a freshly initialised model. Initialisation draws from a private
    generator, so the global torch RNG is left alone."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = FaceChannelModel(config)
        _init_weights(model)
    return model


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def analytic_parameter_count(config: ModelConfig = ModelConfig()) -> int:
    """Closed-form parameter count of :func:`build_model`'s network."""
    k2 = config.kernel_size**2
    total = 0
    c_in = config.input_channels
    for i, c_out in enumerate(config.channel_plan, start=1):
        conv = k2 * c_in * c_out + c_out
        if i == 10 and config.shunting_on_last:
            conv = 2 * conv + c_out
        total += conv
        c_in = c_out
    flat = c_in * config.feature_size**2
    for _ in range(config.dense_layers):
        total += flat * config.dense_units + config.dense_units
        flat = config.dense_units
    return total + 2 * (flat + 1)


def apply_freeze_policy(model: FaceChannelModel, scheme: FreezeScheme | str) -> dict[str, bool]:
    """Set ``requires_grad`` per parameter for a training scheme and return
    the resulting trainability mask.

    ``last-conv`` trains only the final conv block (including the shunting
    parameters), the dense layers and both heads.
    """
    scheme = FreezeScheme.parse(scheme)
    if scheme is not FreezeScheme.SCRATCH and model.pretrained_source is None:
        raise MissingPretrainedError(f"scheme {scheme.value!r} needs pretrained weights loaded into the model")
    last_block = f"block{len(model.blocks)}"
    mask = {}
    for name, group in model.parameter_groups().items():
        if scheme is FreezeScheme.LAST_CONV:
            mask[name] = group in (last_block, "dense", "head")
        else:
            mask[name] = True
    params = dict(model.named_parameters())
    for name, trainable in mask.items():
        params[name].requires_grad_(trainable)
    return mask


def architecture_summary(model: FaceChannelModel) -> dict[str, int]:
    """Count conv layers, pools and scalar heads by walking the module tree."""
    convs = len(model.conv_layers())
    pools = len(model.blocks)  # one max-pool after every block
    heads = sum(1 for h in (model.arousal_head, model.valence_head) if h.out_features == 1)
    shunting = sum(1 for m in model.modules() if isinstance(m, ShuntingConv2d))
    return {"conv_layers": convs, "pool_layers": pools, "heads": heads, "shunting_layers": shunting}


# weights archive


def save_weights(model: FaceChannelModel, directory: str | os.PathLike) -> Path:
    """Write ``index.json`` plus one raw little-endian float32 file per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, tensor in model.state_dict().items():
        fname = name + ".f32"
        arr = tensor.detach().cpu().numpy().astype("<f4")
        arr.tofile(directory / fname)
        tensors[name] = {"shape": list(arr.shape), "dtype": "float32", "file": fname}
    index = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "tensors": tensors,
    }
    (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return directory


def read_weights_config(directory: str | os.PathLike) -> ModelConfig:
    index = json.loads((Path(directory) / "index.json").read_text())
    return ModelConfig.from_dict(index["model_config"])


def load_weights(directory: str | os.PathLike, model: FaceChannelModel | None = None) -> FaceChannelModel:
    """Load a weights archive, validating every tensor shape against the
    model's config. Builds the model from the stored config when none is
    given. Marks the model as pretrained."""
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    if index.get("format_version") != WEIGHTS_FORMAT_VERSION:
        raise ConfigError(f"unsupported weights format version {index.get('format_version')}")
    if model is None:
        model = build_model(ModelConfig.from_dict(index["model_config"]))
    expected = model.state_dict()
    stored = index["tensors"]
    missing = set(expected) - set(stored)
    extra = set(stored) - set(expected)
    if missing or extra:
        raise ShapeError(f"weights archive mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    state = {}
    for name, ref in expected.items():
        meta = stored[name]
        if tuple(meta["shape"]) != tuple(ref.shape):
            raise ShapeError(f"{name}: archive shape {meta['shape']} != model shape {list(ref.shape)}")
        if meta.get("dtype", "float32") != "float32":
            raise ConfigError(f"{name}: unsupported dtype {meta['dtype']}")
        arr = np.fromfile(directory / meta["file"], dtype="<f4")
        if arr.size != ref.numel():
            raise ShapeError(f"{name}: file holds {arr.size} values, expected {ref.numel()}")
        state[name] = torch.from_numpy(arr.reshape(meta["shape"]).astype(np.float32))
    model.load_state_dict(state)
    model.pretrained_source = str(directory)
    return model


def parameter_checksums(model: nn.Module) -> dict[str, str]:
    return {
        name: hashlib.sha256(p.detach().cpu().numpy().tobytes()).hexdigest()
        for name, p in model.named_parameters()
    }
