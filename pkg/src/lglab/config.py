"""Layered run configuration (file < environment < flags) and run manifests."""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Union

import yaml

from lglab import __version__
from lglab.errors import UsageError
from lglab.numerics import PRECISIONS

# 定数
SUBCOMMANDS = ("gen", "train", "eval", "probe", "verify-construction", "compare")
SECTIONS = ("run", "model", "train", "data", "eval", "compare")
ENV_VARS: Mapping[str, str] = {
    "seed": "LGLAB_SEED",
    "threads": "LGLAB_THREADS",
    "precision": "LGLAB_PRECISION",
    "deterministic": "LGLAB_DETERMINISTIC",
    "output_dir": "LGLAB_OUTPUT_DIR",
}
TRUE_WORDS = ("1", "true", "yes", "on")
FALSE_WORDS = ("0", "false", "no", "off")
MANIFEST_NAME = "manifest.yml"

# ============================================
# Domain Layer
# ============================================


@dataclass(frozen=True)
class RunConfig:
    """1 回の実行の解決済み設定"""
    subcommand: str
    config_path: Optional[str] = None
    seed: int = 0
    output_dir: str = "runs/latest"
    precision: str = "float64"
    deterministic: bool = True
    threads: Optional[int] = None
    sections: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self):
        if self.subcommand not in SUBCOMMANDS:
            raise UsageError(f"Unknown subcommand '{self.subcommand}'")
        if self.precision not in PRECISIONS:
            raise UsageError(f"Unknown precision '{self.precision}', expected one of {sorted(PRECISIONS)}")
        if self.threads is not None and self.threads < 1:
            raise UsageError(f"threads must be >= 1, got {self.threads}")
        if self.seed < 0:
            raise UsageError(f"seed must be >= 0, got {self.seed}")

    def section(self, name: str) -> Dict[str, Any]:
        return dict(self.sections.get(name, {}))  # 防御的コピー

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _parse_bool(name: str, text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in TRUE_WORDS:
        return True
    if lowered in FALSE_WORDS:
        return False
    raise UsageError(f"{name} must be a boolean word, got '{text}'")


def _parse_int(name: str, text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise UsageError(f"{name} must be an integer, got '{text}'") from None


def environment_overrides(environ: Mapping[str, str]) -> Dict[str, Any]:
    """LGLAB_* 環境変数からの上書き値"""
    values: Dict[str, Any] = {}
    for key, name in ENV_VARS.items():
        text = environ.get(name)
        if text is None or text == "":
            continue
        if key in ("seed", "threads"):
            values[key] = _parse_int(name, text)
        elif key == "deterministic":
            values[key] = _parse_bool(name, text)
        else:
            values[key] = text
    return values


# ============================================
# Adapter Layer
# ============================================


class ConfigFileAdapter:
    """設定 YAML を読み込むアダプター"""

    def load(self, path: Union[str, Path]) -> Dict[str, Dict[str, Any]]:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"Config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"Cannot parse {path}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError(f"{path} must hold a mapping of sections")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise UsageError(f"Unknown config sections {unknown} in {path}, expected {list(SECTIONS)}")
        for name, body in data.items():
            if not isinstance(body, dict):
                raise UsageError(f"Section '{name}' in {path} must be a mapping")
        return {name: dict(body) for name, body in data.items()}


def resolve_run_config(
    subcommand: str,
    flags: Mapping[str, Any],
    environ: Optional[Mapping[str, str]] = None,
    adapter: Optional[ConfigFileAdapter] = None,
) -> RunConfig:
    """Merge file, environment and flag values; later layers win.

    Args:
        subcommand: CLI subcommand name
        flags: run-level flag values (None means "not given")
        environ: environment mapping (defaults to os.environ)
        adapter: config file reader

    Returns:
        RunConfig with the file's sections attached
    """
    environ = os.environ if environ is None else environ
    config_path = flags.get("config")
    sections = (adapter or ConfigFileAdapter()).load(config_path) if config_path else {}

    values: Dict[str, Any] = dict(sections.get("run", {}))
    values.update(environment_overrides(environ))
    values.update({k: v for k, v in flags.items() if v is not None and k in RunConfig.__dataclass_fields__})
    values["subcommand"] = subcommand
    values["config_path"] = str(config_path) if config_path else None
    values["sections"] = {k: v for k, v in sections.items() if k != "run"}
    return RunConfig.from_dict(values)


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ManifestAdapter:
    """manifest.yml（解決済み設定と成果物ハッシュ）を書くアダプター"""

    def write(self, run: RunConfig, resolved: Mapping[str, Any], artifacts: Sequence[Union[str, Path]]) -> Path:
        root = run.output_path
        hashes: Dict[str, str] = {}
        for artifact in artifacts:
            artifact = Path(artifact)
            try:
                key = artifact.relative_to(root).as_posix()
            except ValueError:
                key = artifact.as_posix()
            hashes[key] = file_sha256(artifact)
        manifest = {
            "version": __version__,
            "subcommand": run.subcommand,
            "seed": run.seed,
            "precision": run.precision,
            "deterministic": run.deterministic,
            "config": _plain(dict(resolved)),
            "artifacts": dict(sorted(hashes.items())),
        }
        path = root / MANIFEST_NAME
        path.write_text(yaml.safe_dump(manifest, sort_keys=True, allow_unicode=True), encoding="utf-8")
        return path

    def read(self, path: Union[str, Path]) -> Dict[str, Any]:
        return yaml.safe_load(Path(path).read_text(encoding="utf-8"))


def _plain(value: Any) -> Any:
    """YAML に安全に書ける形（tuple → list、Path → str）へ変換"""
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return value.as_posix()
    return value
