"""Run configuration: one JSON file describing corpus, hierarchy, training and evaluation."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .corpus import CorpusConfig
from .errors import ConfigError, HdvocError
from .hierarchy import DESK_MEL, FULL_MEL, HierarchySpec, make_spec
from .nn.epsnet import EpsilonNetConfig
from .nn.optim import DEFAULT_LEARNING_RATE


def _strict(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class TrainingConfig:
    steps: list = field(default_factory=lambda: [6000, 6000])  # per level, top first
    batch_size: int = 16
    segment_frames: int = 16
    learning_rate: float = DEFAULT_LEARNING_RATE
    final_lr_fraction: float = 1.0  # linear decay to this fraction of learning_rate at the last step
    log_every: int = 50
    checkpoint_every: int = 500

    def __post_init__(self):
        if isinstance(self.steps, int):
            raise ConfigError("training.steps must list one step count per level")
        if any(int(s) != s or s < 0 for s in self.steps):
            raise ConfigError("training.steps must be non-negative integers")
        for name in ("batch_size", "segment_frames", "log_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"training.{name} must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("training.learning_rate must be positive")
        if not 0 < self.final_lr_fraction <= 1:
            raise ConfigError("training.final_lr_fraction must be in (0, 1]")

    def lr_at(self, step: int, total: int) -> float:
        """Learning rate for the update that takes a level from ``step`` to ``step + 1``."""
        frac = step / max(total - 1, 1)
        return self.learning_rate * (1.0 - (1.0 - self.final_lr_fraction) * min(frac, 1.0))


@dataclass
class EvalConfig:
    f0_frame: int = 400
    f0_hop: int = 100
    fmin_hz: float = 60.0
    fmax_hz: float = 1000.0
    voicing_threshold: float = 0.2


@dataclass
class PathsConfig:
    corpus_dir: str = "corpus"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "generated"


@dataclass
class RunConfig:
    seed: int
    hierarchy: HierarchySpec
    training: TrainingConfig
    corpus: CorpusConfig
    eval: EvalConfig
    paths: PathsConfig
    base_dir: Path = Path(".")

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else self.base_dir / p

    def checkpoint_path(self, level: int) -> Path:
        return self.path("checkpoint_dir") / f"level{level}_{self.hierarchy.rates[level]}hz.ckpt"

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "hierarchy": self.hierarchy.to_dict(),
            "training": asdict(self.training),
            "corpus": self.corpus.to_dict(),
            "eval": asdict(self.eval),
            "paths": asdict(self.paths),
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | os.PathLike = ".") -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        allowed = {"seed", "hierarchy", "training", "corpus", "eval", "paths"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        missing = {"seed", "hierarchy"} - set(d)
        if missing:
            raise ConfigError(f"missing keys {sorted(missing)}")
        if not isinstance(d["seed"], int) or d["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        cfg = cls(
            seed=d["seed"],
            hierarchy=_hierarchy(d["hierarchy"]),
            training=_strict(TrainingConfig, d.get("training", {}), "training"),
            corpus=_corpus(d.get("corpus", {})),
            eval=_strict(EvalConfig, d.get("eval", {}), "eval"),
            paths=_strict(PathsConfig, d.get("paths", {}), "paths"),
            base_dir=Path(base_dir),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        """Cross-section checks; every command runs these before touching disk."""
        spec = self.hierarchy
        if len(self.training.steps) != spec.n_levels:
            raise ConfigError(f"training.steps has {len(self.training.steps)} entries for {spec.n_levels} levels")
        if self.corpus.sample_rate != spec.rates[0]:
            raise ConfigError(f"corpus rate {self.corpus.sample_rate} Hz != top level rate {spec.rates[0]} Hz")
        frames = int(round(self.corpus.duration_s * spec.rates[0])) // spec.mel.hop
        if frames < self.training.segment_frames:
            raise ConfigError(f"utterances hold {frames} mel frames, fewer than training.segment_frames")
        ev = self.eval
        if ev.fmin_hz < 30 or not ev.fmin_hz < ev.fmax_hz <= spec.rates[0] / 2:
            raise ConfigError("eval needs 30 <= fmin_hz < fmax_hz <= top rate / 2")
        if ev.f0_frame < 2 * spec.rates[0] / ev.fmin_hz:
            raise ConfigError("eval.f0_frame must cover two periods of fmin_hz")


def _hierarchy(d) -> HierarchySpec:
    if not isinstance(d, dict):
        raise ConfigError("hierarchy: expected an object")
    allowed = {f.name for f in fields(HierarchySpec)}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"hierarchy: unknown keys {sorted(unknown)}")
    try:
        nets = tuple(_strict(EpsilonNetConfig, n, f"hierarchy.nets[{i}]") for i, n in enumerate(d.get("nets", [])))
        mel = _strict(type(DESK_MEL), d.get("mel", {}), "hierarchy.mel")
        return HierarchySpec(**{**d, "nets": nets, "mel": mel})
    except TypeError as exc:
        raise ConfigError(f"hierarchy: {exc}") from exc
    except HdvocError as exc:
        raise ConfigError(f"hierarchy: {exc}") from exc


def _corpus(d) -> CorpusConfig:
    try:
        return CorpusConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"corpus: {exc}") from exc


def load_config(path: str | os.PathLike) -> RunConfig:
    """Parse and validate; relative paths in the file resolve against its directory."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(data, base_dir=path.parent)


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


# -- presets --------------------------------------------------------------------------------------

DESK_TOP_NET = EpsilonNetConfig(layers=8, blocks=2, residual_channels=32)
DESK_LOW_NET = EpsilonNetConfig(layers=12, blocks=2, residual_channels=48, has_lower_conditioning=False)


def desk_config(seed: int = 0) -> RunConfig:
    """CI-scale run: (8 kHz, 2 kHz) hierarchy on the synthetic vibrato corpus."""
    top = EpsilonNetConfig(**{**DESK_TOP_NET.to_dict(), "has_lower_conditioning": True})
    spec = HierarchySpec((8000, 2000), (top, DESK_LOW_NET), DESK_MEL)
    return RunConfig(
        seed=seed,
        hierarchy=spec,
        training=TrainingConfig(
            steps=[6000, 12000], batch_size=8, segment_frames=16, learning_rate=1e-3, final_lr_fraction=0.1
        ),
        corpus=CorpusConfig(sample_rate=8000),
        eval=EvalConfig(),
        paths=PathsConfig(),
    )


def full_config(seed: int = 0) -> RunConfig:
    """Reference HPG-2 settings at 24 kHz; far beyond a CPU budget and never run in CI."""
    spec = make_spec(
        (24000, 6000),
        EpsilonNetConfig(layers=30, blocks=3, residual_channels=64, step_embed_dim=128, step_hidden=512),
        FULL_MEL,
    )
    return RunConfig(
        seed=seed,
        hierarchy=spec,
        training=TrainingConfig(steps=[1_000_000, 1_000_000], batch_size=16, segment_frames=20, learning_rate=DEFAULT_LEARNING_RATE),
        corpus=CorpusConfig(sample_rate=24000, max_harmonics=40),
        eval=EvalConfig(f0_frame=1200, f0_hop=300),
        paths=PathsConfig(),
    )


PRESETS = {"desk": desk_config, "full": full_config}
