"""Adam training loop with warmup + cosine schedule and main/aux alternation.

Batches come from a counter-based stream keyed by (seed, step), so a run
resumed from a checkpoint draws exactly the batches the uninterrupted run
would have drawn.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import yaml

from lglab.datagen import EncodedExample, Examples
from lglab.errors import CapacityError, ContractError, FormatError, NonFiniteError, VocabularyError
from lglab.model import ModelConfig, TransformerModel, build_model, masked_next_token_loss

# 定数
CHECKPOINT_MAGIC = b"LGCK"
CHECKPOINT_VERSION = 1
TASK_MIXES = ("single", "alternating")
BLOB_DTYPES: Mapping[torch.dtype, str] = {torch.float64: "<f8", torch.float32: "<f4"}
TORCH_DTYPES: Mapping[str, torch.dtype] = {"<f8": torch.float64, "<f4": torch.float32}
METRICS_HEADER = ("step", "task", "loss", "lr", "wallclock")

# ============================================
# Domain Layer
# ============================================


@dataclass(frozen=True)
class TrainConfig:
    """学習設定（デスク規模の既定値）"""
    base_lr: float = 3e-4
    warmup_steps: int = 200
    total_steps: int = 10000
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    task_mix: str = "single"
    grad_clip: Optional[float] = None
    checkpoint_every: Optional[int] = None
    log_every: int = 100
    deterministic: bool = True
    threads: Optional[int] = None

    def __post_init__(self):
        if self.total_steps <= self.warmup_steps:
            raise ContractError(f"total_steps ({self.total_steps}) must exceed warmup_steps ({self.warmup_steps})")
        if self.warmup_steps < 0:
            raise ContractError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.task_mix not in TASK_MIXES:
            raise ContractError(f"Unknown task_mix '{self.task_mix}', expected one of {TASK_MIXES}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ContractError(f"grad_clip must be positive, got {self.grad_clip}")

    @classmethod
    def full_scale(cls, warmup_steps: int, **overrides: Any) -> "TrainConfig":
        """Full-scale hyperparameters: lr 1e-5, batch 1024, 100k steps."""
        values = dict(base_lr=1e-5, warmup_steps=warmup_steps, total_steps=100_000, batch_size=1024)
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def warmup_steps_from_epochs(epochs: float, dataset_size: int, batch_size: int) -> int:
    """1 エポック = 学習ファイルを 1 周するステップ数"""
    return int(math.ceil(epochs * dataset_size / batch_size))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then one-cycle cosine decay to zero at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def task_for_step(step: int, cfg: TrainConfig) -> str:
    """Global step parity decides the head, so alternation survives resumes."""
    if cfg.task_mix == "single":
        return "main"
    return "main" if step % 2 == 0 else "aux"


def configure_determinism(deterministic: bool, threads: Optional[int] = None) -> None:
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    elif threads:
        torch.set_num_threads(threads)


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(), lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, foreach=False
    )


def adam_update(optimizer: torch.optim.Adam, named_parameters: Sequence[Tuple[str, torch.nn.Parameter]],
                lr: float, step: int, grad_clip: Optional[float] = None) -> None:
    """One bias-corrected Adam step at learning rate `lr`.

    Parameters without a gradient (the inactive head) are left untouched.
    """
    for name, parameter in named_parameters:
        if parameter.grad is not None and not bool(torch.isfinite(parameter.grad).all()):
            raise NonFiniteError(f"Non-finite gradient in '{name}' at step {step}")
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_([p for _, p in named_parameters if p.grad is not None], grad_clip)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()


def batch_indices(seed: int, step: int, dataset_size: int, batch_size: int) -> np.ndarray:
    """(seed, step) をキーとするバッチのインデックス（復元抽出）"""
    if dataset_size < 1:
        raise ContractError("Cannot draw a batch from an empty dataset")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(step,))))
    return rng.integers(0, dataset_size, size=batch_size)


@dataclass(frozen=True)
class Batch:
    """パディングを詰めたミニバッチ"""
    tokens: torch.Tensor
    targets: torch.Tensor
    mask: torch.Tensor
    n_input: torch.Tensor

    @classmethod
    def collate(cls, examples: Sequence[EncodedExample]) -> "Batch":
        # 因果的注意なので末尾の PAD を落としても値は変わらない
        width = max(max(i for i, m in enumerate(e.mask) if m) + 1 for e in examples)
        return cls(
            tokens=torch.tensor([e.tokens[:width] for e in examples], dtype=torch.long),
            targets=torch.tensor([e.targets[:width] for e in examples], dtype=torch.long),
            mask=torch.tensor([e.mask[:width] for e in examples], dtype=torch.long),
            n_input=torch.tensor([e.n_input for e in examples], dtype=torch.long),
        )


@dataclass(frozen=True)
class MetricRow:
    """1 ステップ分の学習ログ"""
    step: int
    task: str
    loss: float
    lr: float
    wallclock: float

    def to_row(self) -> List[str]:
        return [str(self.step), self.task, f"{self.loss:.17g}", f"{self.lr:.17g}", f"{self.wallclock:.3f}"]


@dataclass(frozen=True)
class Checkpoint:
    """モデル・最適化器・乱数状態のスナップショット"""
    model_config: ModelConfig
    train_config: TrainConfig
    step: int
    parameters: Dict[str, torch.Tensor]
    optimizer_state: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    rng: Dict[str, int] = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    @classmethod
    def capture(cls, model: TransformerModel, optimizer: torch.optim.Adam, cfg: TrainConfig, step: int) -> "Checkpoint":
        names = {id(p): name for name, p in model.named_parameters()}
        state: Dict[str, Dict[str, Any]] = {}
        for group in optimizer.param_groups:
            for parameter in group["params"]:
                entry = optimizer.state.get(parameter)
                if not entry:
                    continue
                state[names[id(parameter)]] = {
                    "step": int(float(entry["step"])),
                    "exp_avg": entry["exp_avg"].detach().clone(),
                    "exp_avg_sq": entry["exp_avg_sq"].detach().clone(),
                }
        return cls(
            model_config=model.cfg,
            train_config=cfg,
            step=step,
            parameters={name: p.detach().clone() for name, p in model.named_parameters()},
            optimizer_state=state,
            rng={"seed": cfg.seed, "next_step": step},
        )

    def restore(self, cfg: Optional[TrainConfig] = None) -> Tuple[TransformerModel, torch.optim.Adam]:
        """Rebuild the model and an optimizer carrying the saved moments."""
        cfg = cfg or self.train_config
        model = TransformerModel(self.model_config)
        missing = set(dict(model.named_parameters())) ^ set(self.parameters)
        if missing:
            raise FormatError(f"Checkpoint parameters do not match the model: {sorted(missing)}")
        with torch.no_grad():
            for name, parameter in model.named_parameters():
                parameter.copy_(self.parameters[name])
        optimizer = build_optimizer(model, cfg)
        named = dict(model.named_parameters())
        for name, entry in self.optimizer_state.items():
            optimizer.state[named[name]] = {
                "step": torch.tensor(float(entry["step"])),
                "exp_avg": entry["exp_avg"].clone(),
                "exp_avg_sq": entry["exp_avg_sq"].clone(),
            }
        return model, optimizer


@dataclass(frozen=True)
class TrainResult:
    checkpoint: Checkpoint
    metrics: Tuple[MetricRow, ...]
    model: TransformerModel = field(repr=False, compare=False)


# ============================================
# Adapter Layer
# ============================================


class CheckpointFileAdapter:
    """LGCK 形式のチェックポイントを読み書きするアダプター

    Layout: magic, u32 version, u64 header length, YAML header, then the
    little-endian tensor blobs in header order.
    """

    def write(self, path: Union[str, Path], ckpt: Checkpoint) -> None:
        blobs: List[bytes] = []
        manifest: List[Dict[str, Any]] = []
        offset = 0
        for name, tensor in self._tensors(ckpt):
            code = BLOB_DTYPES.get(tensor.dtype)
            if code is None:
                raise FormatError(f"Unsupported dtype {tensor.dtype} for '{name}'")
            blob = tensor.detach().cpu().contiguous().numpy().astype(code).tobytes()
            manifest.append({"name": name, "shape": list(tensor.shape), "dtype": code,
                             "offset": offset, "nbytes": len(blob)})
            blobs.append(blob)
            offset += len(blob)
        header = {
            "model_config": ckpt.model_config.to_dict(),
            "train_config": ckpt.train_config.to_dict(),
            "step": ckpt.step,
            "rng": dict(ckpt.rng),
            "optimizer_steps": {name: entry["step"] for name, entry in ckpt.optimizer_state.items()},
            "tensors": manifest,
        }
        header_bytes = yaml.safe_dump(header, sort_keys=True, allow_unicode=True).encode("utf-8")
        with Path(path).open("wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<IQ", ckpt.format_version, len(header_bytes)))
            f.write(header_bytes)
            for blob in blobs:
                f.write(blob)

    def read(self, path: Union[str, Path]) -> Checkpoint:
        data = Path(path).read_bytes()
        if data[:4] != CHECKPOINT_MAGIC:
            raise FormatError(f"{path} is not an LGCK checkpoint")
        if len(data) < 16:
            raise FormatError(f"{path} is truncated")
        version, header_length = struct.unpack("<IQ", data[4:16])
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"Unsupported checkpoint version {version} in {path}")
        body_start = 16 + header_length
        if len(data) < body_start:
            raise FormatError(f"{path} is truncated inside the header")
        try:
            header = yaml.safe_load(data[16:body_start].decode("utf-8"))
            manifest = header["tensors"]
            model_config = ModelConfig.from_dict(header["model_config"])
            train_config = TrainConfig.from_dict(header["train_config"])
        except (yaml.YAMLError, UnicodeDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"Corrupt checkpoint header in {path}: {exc}") from None

        tensors: Dict[str, torch.Tensor] = {}
        for entry in manifest:
            start = body_start + entry["offset"]
            end = start + entry["nbytes"]
            if end > len(data):
                raise FormatError(f"{path} is truncated in tensor '{entry['name']}'")
            array = np.frombuffer(data[start:end], dtype=entry["dtype"]).reshape(entry["shape"])
            tensors[entry["name"]] = torch.from_numpy(array.copy()).to(TORCH_DTYPES[entry["dtype"]])

        parameters = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
        optimizer_state: Dict[str, Dict[str, Any]] = {}
        for name, step in header.get("optimizer_steps", {}).items():
            optimizer_state[name] = {
                "step": int(step),
                "exp_avg": tensors[f"adam.exp_avg.{name}"],
                "exp_avg_sq": tensors[f"adam.exp_avg_sq.{name}"],
            }
        return Checkpoint(
            model_config=model_config,
            train_config=train_config,
            step=int(header["step"]),
            parameters=parameters,
            optimizer_state=optimizer_state,
            rng=dict(header.get("rng", {})),
            format_version=version,
        )

    @staticmethod
    def _tensors(ckpt: Checkpoint) -> List[Tuple[str, torch.Tensor]]:
        tensors = [(f"param.{name}", t) for name, t in ckpt.parameters.items()]
        for name, entry in ckpt.optimizer_state.items():
            tensors.append((f"adam.exp_avg.{name}", entry["exp_avg"]))
            tensors.append((f"adam.exp_avg_sq.{name}", entry["exp_avg_sq"]))
        return tensors


class MetricsCSVAdapter:
    """学習ログを追記専用 CSV に書くアダプター"""

    def append(self, path: Union[str, Path], rows: Sequence[MetricRow]) -> None:
        path = Path(path)
        new_file = not path.exists()
        with path.open("a", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            if new_file:
                writer.writerow(METRICS_HEADER)
            for row in rows:
                writer.writerow(row.to_row())

    def read(self, path: Union[str, Path]) -> List[MetricRow]:
        with Path(path).open(encoding="utf-8", newline="") as f:
            return [
                MetricRow(int(r["step"]), r["task"], float(r["loss"]), float(r["lr"]), float(r["wallclock"]))
                for r in csv.DictReader(f)
            ]


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    CheckpointFileAdapter().write(path, ckpt)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    if not Path(path).exists():
        raise FormatError(f"Checkpoint not found: {path}")
    return CheckpointFileAdapter().read(path)


# ============================================
# UseCase Layer
# ============================================


def _check_compatible(examples: Examples, model: TransformerModel, role: str) -> None:
    table = examples.token_table
    if table.size != model.cfg.vocab_size:
        raise VocabularyError(
            f"{role} dataset uses table {table.name} ({table.size} ids) but the model has {model.cfg.vocab_size}"
        )
    longest = max(e.length for e in examples)
    if longest > model.cfg.context_length:
        raise CapacityError(f"{role} dataset holds a sequence of length {longest} > context {model.cfg.context_length}")


class TrainUseCase:
    """共有バックボーンを main/aux ヘッドで交互に学習する UseCase"""

    def __init__(self, metrics_adapter: Optional[MetricsCSVAdapter] = None,
                 checkpoint_adapter: Optional[CheckpointFileAdapter] = None):
        self.metrics_adapter = metrics_adapter or MetricsCSVAdapter()
        self.checkpoint_adapter = checkpoint_adapter or CheckpointFileAdapter()

    def execute(
        self,
        main: Examples,
        aux: Optional[Examples],
        model: TransformerModel,
        cfg: TrainConfig,
        optimizer: Optional[torch.optim.Adam] = None,
        start_step: int = 0,
        stop_step: Optional[int] = None,
        metrics_path: Optional[Union[str, Path]] = None,
        checkpoint_path: Optional[Union[str, Path]] = None,
    ) -> TrainResult:
        """Train from `start_step` up to `stop_step` (default: total_steps).

        Args:
            main: main-task dataset
            aux: auxiliary dataset, required when task_mix is 'alternating'
            model: model to update in place
            cfg: training configuration
            optimizer: optimizer carrying restored moments (resume); built fresh otherwise
            start_step: first global step to run
            stop_step: stop before this step (for interrupted runs)
            metrics_path: append-only metrics CSV
            checkpoint_path: checkpoint written at the cadence and at the end

        Returns:
            TrainResult
        """
        if cfg.task_mix == "alternating" and aux is None:
            raise ContractError("Alternating multitask training needs an auxiliary dataset")
        datasets = {"main": main.to_list(), "aux": aux.to_list() if aux is not None else []}
        _check_compatible(main, model, "main")
        if aux is not None and cfg.task_mix == "alternating":
            _check_compatible(aux, model, "aux")

        configure_determinism(cfg.deterministic, cfg.threads)
        optimizer = optimizer or build_optimizer(model, cfg)
        named = list(model.named_parameters())
        stop = cfg.total_steps if stop_step is None else min(stop_step, cfg.total_steps)
        started = time.perf_counter()
        metrics: List[MetricRow] = []
        flushed = 0

        model.train()
        for step in range(start_step, stop):
            task = task_for_step(step, cfg)
            pool = datasets[task]
            batch = Batch.collate([pool[i] for i in batch_indices(cfg.seed, step, len(pool), cfg.batch_size)])
            logits, _ = model(batch.tokens, batch.n_input, head_id=task)
            loss = masked_next_token_loss(logits, batch.targets, batch.mask)
            if not bool(torch.isfinite(loss)):
                raise NonFiniteError(f"Non-finite loss at step {step} ({task})")

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            lr = lr_at(step + 1, cfg)
            adam_update(optimizer, named, lr, step, cfg.grad_clip)

            wallclock = 0.0 if cfg.deterministic else time.perf_counter() - started
            row = MetricRow(step, task, float(loss), lr, wallclock)
            metrics.append(row)
            if cfg.log_every and step % cfg.log_every == 0:
                logging.info(f"step {step} [{task}] loss={row.loss:.5f} lr={lr:.3e}")
            if cfg.checkpoint_every and checkpoint_path and (step + 1) % cfg.checkpoint_every == 0:
                if metrics_path is not None:
                    self.metrics_adapter.append(metrics_path, metrics[flushed:])
                    flushed = len(metrics)
                self.checkpoint_adapter.write(checkpoint_path, Checkpoint.capture(model, optimizer, cfg, step + 1))
        model.eval()

        checkpoint = Checkpoint.capture(model, optimizer, cfg, stop)
        if metrics_path is not None:
            self.metrics_adapter.append(metrics_path, metrics[flushed:])
        if checkpoint_path is not None:
            self.checkpoint_adapter.write(checkpoint_path, checkpoint)
        return TrainResult(checkpoint, tuple(metrics), model)


def train(main: Examples, aux: Optional[Examples], model: TransformerModel, cfg: TrainConfig,
          **kwargs: Any) -> TrainResult:
    return TrainUseCase().execute(main, aux, model, cfg, **kwargs)


def resume(ckpt: Checkpoint, main: Examples, aux: Optional[Examples], **kwargs: Any) -> TrainResult:
    """Continue a run from its checkpoint with the saved configuration."""
    model, optimizer = ckpt.restore()
    return TrainUseCase().execute(main, aux, model, ckpt.train_config, optimizer=optimizer,
                                  start_step=ckpt.step, **kwargs)


def new_model_for(model_cfg: ModelConfig, train_cfg: TrainConfig) -> TransformerModel:
    return build_model(model_cfg, seed=train_cfg.seed)
