"""
Low-rank adapters and training-stage freeze contracts.

Adapters are attached to host modules as named branches under ``host.adapters`` and summed into the host
output by a forward hook, so base parameter names never change and base and adapter checkpoints compose.
Two families exist: ``lora2d`` on linear projections (``ΔW = (α/r)·B·A``) and ``causal3d`` on causal 3D
convolutions (a ``1×1×1`` down projection followed by a causal up projection). Both start at zero.
"""

from copy import deepcopy
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from fnmatch import fnmatch
from json import dumps
from json import loads
from math import sqrt
from typing import Literal

import torch
import torch.nn as nn

from .causal_vae import CausalConv3d
from .exceptions import AdapterError
from .exceptions import ConfigError
from .exceptions import ContractError

AdapterKind = Literal["lora2d", "causal3d"]
Stage = Literal["P", "A", "H"]

RECON: str = "recon"
HARMON: str = "harmon"
DENOISE: str = "denoise"

DECODER_CONVS: tuple[str, ...] = ("vae.decoder.stages.*.block.conv1", "vae.decoder.stages.*.block.conv2")
ATTENTION_PROJECTIONS: tuple[str, ...] = ("denoiser.blocks.*.attn.q", "denoiser.blocks.*.attn.k",
                                          "denoiser.blocks.*.attn.v", "denoiser.blocks.*.attn.out")

PARAMETER_GROUPS: tuple[str, ...] = ("base_vae", "base_denoiser", "encoder2d", "cmfb", RECON, HARMON, DENOISE)
STAGE_GROUPS: dict[str, tuple[str, ...]] = {
    "P": ("base_vae", "base_denoiser"),
    "A": ("encoder2d", "cmfb", RECON),
    "H": (DENOISE, HARMON),
}


@dataclass(frozen=True)
class AdapterSpec:
    name: str
    kind: AdapterKind
    targets: tuple[str, ...]
    rank: int = 8
    alpha: float | None = None
    kernel: tuple[int, int, int] = (3, 3, 3)

    def __post_init__(self):
        if self.alpha is None:
            object.__setattr__(self, "alpha", float(self.rank))
        if self.kind not in ("lora2d", "causal3d"):
            raise ConfigError(f"Unknown adapter kind {self.kind!r}")
        if self.rank < 1:
            raise ConfigError(f"Adapter rank must be at least 1, got {self.rank}")
        if not self.targets:
            raise ConfigError(f"Adapter {self.name!r} has no targets")
        if len(self.kernel) != 3 or any(k < 1 for k in self.kernel):
            raise ConfigError(f"Invalid adapter kernel {self.kernel}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def to_json(self) -> str:
        return dumps(asdict(self))

    @classmethod
    def from_json(cls, data: str) -> "AdapterSpec":
        spec: dict = loads(data)
        return cls(**{**spec, "targets": tuple(spec["targets"]), "kernel": tuple(spec["kernel"])})


def recon_spec(rank: int = 8, alpha: float | None = None, kernel: tuple[int, int, int] = (3, 3, 3)) -> AdapterSpec:
    return AdapterSpec(RECON, "causal3d", DECODER_CONVS, rank, float(rank if alpha is None else alpha), kernel)


def harmon_spec(rank: int = 8, alpha: float | None = None, kernel: tuple[int, int, int] = (3, 3, 3)) -> AdapterSpec:
    return AdapterSpec(HARMON, "causal3d", DECODER_CONVS, rank, float(rank if alpha is None else alpha), kernel)


def denoise_spec(rank: int = 8, alpha: float | None = None) -> AdapterSpec:
    return AdapterSpec(DENOISE, "lora2d", ATTENTION_PROJECTIONS, rank, float(rank if alpha is None else alpha))


class LoraLinearBranch(nn.Module):
    def __init__(self, host: nn.Linear, rank: int, scale: float):
        super().__init__()
        self.scale: float = scale
        self.lora_A = nn.Parameter(torch.zeros(rank, host.in_features, dtype=host.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(host.out_features, rank, dtype=host.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * (x @ self.lora_A.t() @ self.lora_B.t())

    def delta(self) -> torch.Tensor:
        return self.scale * (self.lora_B @ self.lora_A)


class CausalLoraBranch(nn.Module):
    def __init__(self, host: CausalConv3d, rank: int, scale: float, kernel: tuple[int, int, int]):
        super().__init__()
        self.scale: float = scale
        self.down = nn.Conv3d(host.in_channels, rank, 1, bias=False)
        self.up = CausalConv3d(rank, host.out_channels, kernel, stride=host.stride, bias=False)
        nn.init.zeros_(self.up.conv.weight)
        self.to(host.conv.weight.dtype)

    @property
    def mergeable(self) -> bool:
        return self.up.kernel == (1, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * self.up(self.down(x))

    def delta(self) -> torch.Tensor:
        if not self.mergeable:
            raise AdapterError(f"runtime-branch only: causal branch with kernel {self.up.kernel} cannot be merged")
        return self.scale * (self.up.conv.weight[:, :, 0, 0, 0] @ self.down.weight[:, :, 0, 0, 0])


def _adapter_hook(module: nn.Module, args: tuple, output: torch.Tensor) -> torch.Tensor:
    for branch in module.adapters.values():
        output = output + branch(args[0])
    return output


def adaptable_modules(model: nn.Module, spec: AdapterSpec) -> dict[str, nn.Module]:
    host_type: type = nn.Linear if spec.kind == "lora2d" else CausalConv3d
    candidates: dict[str, nn.Module] = {n: m for n, m in model.named_modules() if isinstance(m, host_type)}
    selected: dict[str, nn.Module] = {}
    for pattern in spec.targets:
        if not (matches := {n: m for n, m in candidates.items() if fnmatch(n, pattern)}):
            raise ConfigError(f"Unknown adapter target {pattern!r}")
        selected |= matches
    return selected


@dataclass
class AdapterGroup:
    spec: AdapterSpec
    hosts: list[str] = field(default_factory=list)
    parameters: dict[str, nn.Parameter] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return sum(p.numel() for p in self.parameters.values())


def attach(model: nn.Module, spec: AdapterSpec) -> tuple[nn.Module, AdapterGroup]:
    hosts: dict[str, nn.Module] = adaptable_modules(model, spec)
    if adapted := [n for n, m in hosts.items() if spec.name in getattr(m, "adapters", {})]:
        raise AdapterError(f"{adapted[0]} already adapted with {spec.name!r}")
    group: AdapterGroup = AdapterGroup(spec)
    for host_name, host in hosts.items():
        if not hasattr(host, "adapters"):
            host.adapters = nn.ModuleDict()
            host.register_forward_hook(_adapter_hook)
        if spec.kind == "lora2d":
            branch: nn.Module = LoraLinearBranch(host, spec.rank, spec.scale)
        else:
            branch = CausalLoraBranch(host, spec.rank, spec.scale, spec.kernel)
        host.adapters[spec.name] = branch.to(next(host.parameters()).device)
        group.hosts.append(host_name)
        group.parameters |= {f"{host_name}.adapters.{spec.name}.{n}": p for n, p in branch.named_parameters()}
    if (specs := getattr(model, "adapter_specs", None)) is None:
        model.adapter_specs = specs = {}
    specs[spec.name] = spec
    return model, group


def attached_specs(model: nn.Module) -> dict[str, AdapterSpec]:
    return dict(getattr(model, "adapter_specs", None) or {})


def adapter_state(model: nn.Module, name: str | None = None) -> dict[str, torch.Tensor]:
    marker: str = ".adapters." if name is None else f".adapters.{name}."
    return {n: t for n, t in model.state_dict().items() if marker in n}


def base_state(model: nn.Module) -> dict[str, torch.Tensor]:
    return {n: t for n, t in model.state_dict().items() if ".adapters." not in n}


@torch.no_grad()
def merge(model: nn.Module) -> nn.Module:
    """A copy of ``model`` with every adapter branch folded into its host weights and removed."""
    merged: nn.Module = deepcopy(model)
    for host_name, host in merged.named_modules():
        if not hasattr(host, "adapters"):
            continue
        for branch_name, branch in host.adapters.items():
            try:
                delta: torch.Tensor = branch.delta()
            except AdapterError as err:
                raise AdapterError(f"{host_name}.adapters.{branch_name}: {err}") from err
            if isinstance(host, nn.Linear):
                host.weight += delta
            else:
                kt, kh, kw = host.kernel
                host.conv.weight[:, :, kt - 1, kh // 2, kw // 2] += delta
        host._forward_hooks = type(host._forward_hooks)(
            (k, h) for k, h in host._forward_hooks.items() if h is not _adapter_hook)
        del host.adapters
    if hasattr(merged, "adapter_specs"):
        merged.adapter_specs = {}
    return merged


def parameter_group(name: str) -> str:
    if ".adapters." in name:
        adapter: str = name.split(".adapters.", 1)[1].split(".", 1)[0]
        if adapter in (RECON, HARMON, DENOISE):
            return adapter
    elif name.startswith("injector.encoder2d."):
        return "encoder2d"
    elif name.startswith("injector.cmfbs."):
        return "cmfb"
    elif name.startswith("vae."):
        return "base_vae"
    elif name.startswith("denoiser."):
        return "base_denoiser"
    raise ContractError(f"Parameter {name!r} belongs to no training group")


@dataclass
class FreezePartition:
    stage: str
    groups: dict[str, str]
    trainable: list[str]
    frozen: list[str]


def freeze_contract(model: nn.Module, stage: Stage) -> FreezePartition:
    stage = stage.upper()
    if stage not in STAGE_GROUPS:
        raise ConfigError(f"Unknown training stage {stage!r}")
    groups: dict[str, str] = {n: parameter_group(n) for n, _ in model.named_parameters()}
    trainable: list[str] = [n for n, g in groups.items() if g in STAGE_GROUPS[stage]]
    frozen: list[str] = [n for n, g in groups.items() if g not in STAGE_GROUPS[stage]]
    for n, p in model.named_parameters():
        p.requires_grad_(n in trainable)
        p.grad = None
    return FreezePartition(stage, groups, trainable, frozen)


def check_frozen_gradients(model: nn.Module, partition: FreezePartition):
    parameters: dict[str, nn.Parameter] = dict(model.named_parameters())
    for n in partition.frozen:
        p = parameters[n]
        if p.requires_grad or (p.grad is not None and bool(p.grad.ne(0).any())):
            raise ContractError(f"Frozen parameter {n!r} received a gradient in stage {partition.stage}")


def parameter_fingerprint(model: nn.Module, group: str | None = None) -> dict[str, bytes]:
    return {n: p.detach().cpu().contiguous().numpy().tobytes() for n, p in model.named_parameters()
            if group is None or parameter_group(n) == group}


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 8
    alpha: float | None = None
    recon_kernel: tuple[int, int, int] = (3, 3, 3)
    harmon_kernel: tuple[int, int, int] = (3, 3, 3)

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"Adapter rank must be at least 1, got {self.rank}")
        # alpha follows rank unless set, keeping the scale alpha/rank at 1
        if self.alpha is None:
            object.__setattr__(self, "alpha", float(self.rank))
        elif self.alpha <= 0:
            raise ConfigError(f"Adapter alpha must be positive, got {self.alpha}")

    def specs(self, stage: Stage) -> list[AdapterSpec]:
        if stage.upper() == "A":
            return [recon_spec(self.rank, self.alpha, self.recon_kernel)]
        elif stage.upper() == "H":
            return [denoise_spec(self.rank, self.alpha), harmon_spec(self.rank, self.alpha, self.harmon_kernel)]
        return []


def attach_stage_adapters(model: nn.Module, stage: Stage, cfg: AdapterConfig = AdapterConfig()) -> list[AdapterGroup]:
    """Attach the adapters a training stage introduces, skipping those already present."""
    present: dict[str, AdapterSpec] = attached_specs(model)
    return [attach(model, spec)[1] for spec in cfg.specs(stage) if spec.name not in present]
