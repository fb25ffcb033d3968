from configparser import ConfigParser
from configparser import Error as ConfigParserError
from dataclasses import dataclass
from dataclasses import fields
from dataclasses import replace
from io import StringIO
from pathlib import Path
from typing import Literal

from click import Context
from click import echo
from click import group
from click import pass_context

from .util import CustomHelpColorsGroup
from .util import color_option
from .util import config_option
from .util import docstring_format
from .util import help_option
from .util import report
from ..adapters import AdapterConfig
from ..causal_vae import VaeConfig
from ..exceptions import ConfigError
from ..injection import InjectionConfig
from ..metrics import MetricsConfig
from ..pipeline import DenoiserConfig
from ..synth import SceneSpec
from ..training import StageConfig

Preset = Literal["desk", "full"]


@dataclass(frozen=True)
class DataConfig:
    preset: Preset = "desk"
    scenes: int = 4
    frames: int = 9
    height: int = 64
    width: int = 96
    candidates: int = 2
    gaussians: int = 160
    mismatch: float = 0.05
    max_pan: int = 2
    refinement: Literal["diagonal", "edges"] = "diagonal"
    val_fraction: float = 0.2
    fps: float = 10.0

    def __post_init__(self):
        if self.preset not in ("desk", "full"):
            raise ConfigError(f"Unknown preset {self.preset!r}")
        if self.scenes < 0:
            raise ConfigError(f"scenes must not be negative, got {self.scenes}")
        if self.refinement not in ("diagonal", "edges"):
            raise ConfigError(f"Unknown refinement mode {self.refinement!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(frames=self.frames, height=self.height, width=self.width, candidates=self.candidates,
                         object_gaussians=self.gaussians, asset_gaussians=self.gaussians, mismatch=self.mismatch,
                         max_pan=self.max_pan, fps=self.fps, focal=80.0 * self.width / 96)


SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "vae": VaeConfig,
    "injection": InjectionConfig,
    "adapters": AdapterConfig,
    "pipeline": DenoiserConfig,
    "training": StageConfig,
    "metrics": MetricsConfig,
}

PRESETS: dict[str, dict[str, dict[str, object]]] = {
    "desk": {
        "training": {"steps": 500, "batch_size": 2, "gram_activation_step": 200, "warmup_steps": 50, "lr": 1e-3},
    },
    "full": {
        "data": {"height": 512, "width": 768},
        "vae": {"encoder_channels": (128, 128, 256, 256), "decoder_channels": (512, 512, 256, 256),
                "latent_channels": 16, "norm_groups": 32},
        "injection": {"encoder2d_channels": (128, 256), "norm_groups": 32},
        "pipeline": {"latent_channels": 16, "width": 768, "depth": 12, "heads": 12},
        "training": {"steps": 10000, "batch_size": 8, "lr": 1e-4},
    },
}


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    vae: VaeConfig = VaeConfig()
    injection: InjectionConfig = InjectionConfig()
    adapters: AdapterConfig = AdapterConfig()
    pipeline: DenoiserConfig = DenoiserConfig()
    training: StageConfig = StageConfig()
    metrics: MetricsConfig = MetricsConfig()

    def stage(self, stage: str) -> StageConfig:
        return replace(self.training, stage=stage.upper())

    def to_ini(self) -> str:
        parser: ConfigParser = ConfigParser(interpolation=None)
        for name in SECTIONS:
            parser[name] = {f.name: format_value(getattr(getattr(self, name), f.name))
                            for f in fields(getattr(self, name))}
        buffer: StringIO = StringIO()
        parser.write(buffer)
        return buffer.getvalue()

    def save(self, folder: Path):
        folder.mkdir(parents=True, exist_ok=True)
        (folder / "config.ini").write_text(self.to_ini())

    def items(self) -> list[tuple[str, str]]:
        return [(f"{name}.{f.name}", format_value(getattr(getattr(self, name), f.name)))
                for name in SECTIONS for f in fields(getattr(self, name))]


def format_value(value: object) -> str:
    if isinstance(value, tuple):
        return ", ".join(map(str, value))
    return str(value).lower() if isinstance(value, bool) else str(value)


def coerce(key: str, raw: str, default: object) -> object:
    try:
        if isinstance(default, bool):
            if raw.strip().lower() not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return raw.strip().lower() in ("true", "yes", "1", "on")
        elif isinstance(default, tuple):
            return tuple(type(default[0])(v.strip()) for v in raw.split(",") if v.strip())
        elif isinstance(default, (int, float)):
            return type(default)(raw.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"Invalid value {raw!r} for {key}")


def parse_config(text: str) -> RunConfig:
    parser: ConfigParser = ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except ConfigParserError as err:
        raise ConfigError(f"Malformed config: {err.message}") from err
    if unknown := [s for s in parser.sections() if s not in SECTIONS]:
        raise ConfigError(f"Unknown config section {unknown[0]!r}")
    preset: str = parser.get("data", "preset", fallback="desk").strip()
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset {preset!r}")
    sections: dict[str, object] = {}
    for name, cls in SECTIONS.items():
        resolved: object = cls()
        defaults: dict[str, object] = {f.name: getattr(resolved, f.name) for f in fields(cls)}
        values: dict[str, object] = dict(PRESETS[preset].get(name, {}))
        for key, raw in (parser[name].items() if parser.has_section(name) else []):
            if key not in defaults:
                raise ConfigError(f"Unknown config key {name}.{key}")
            values[key] = coerce(f"{name}.{key}", raw, defaults[key])
        sections[name] = cls(**values)
    return RunConfig(**sections)


def load_config(path: Path | None) -> RunConfig:
    if path is None:
        return parse_config("")
    if not path.is_file():
        raise ConfigError(f"Config file not found {str(path)!r}")
    return parse_config(path.read_text())


@group("config", cls=CustomHelpColorsGroup, no_args_is_help=True, short_help="Show run configurations.")
@color_option
@help_option
def config_app():
    """
    The config command shows the run configuration used by the other commands.
    """
    pass


@config_app.command("show", short_help="Show the resolved configuration.")
@config_option
@color_option
@help_option
@pass_context
@docstring_format()
def config_show(ctx: Context, config: Path | None):
    """
    Print the configuration resolved from {yellow}--config{reset}, its preset and the defaults, one
    {cyan}section.key{reset} per line.
    """

    echo(report(load_config(config).items()), color=ctx.color)


@config_app.command("defaults", short_help="Print the default configuration file.")
@color_option
@help_option
@docstring_format()
def config_defaults():
    """
    Print the default configuration in the file format accepted by {yellow}--config{reset}.
    """

    echo(load_config(None).to_ini(), nl=False)
