"""Basis extraction, residual-stream projections and mechanism metrics.

The encoder basis is the embedding table (one row per token id), the decoder
basis the columns of the main head. Both are stored as (vocab, width) row
matrices so a projection is a single matrix-vector product.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import torch

from lglab.construction import ConstructionDecoder
from lglab.datagen import TABLES, EncodedExample, Examples, TokenTable
from lglab.errors import ContractError, DimensionError, FormatError
from lglab.model import STAGES, ActivationTrace, TransformerModel
from lglab.trainer import Checkpoint

# 定数
BASES = ("encoder", "decoder")
PROFILE_HEADER = ("position", "depth", "stage", "basis", "symbol", "value")
MECHANISM_HEADER = ("tag", "metric", "depth", "value")
ZERO_NORM = 1e-12
RANK_TOLERANCE = 1e-6
SVG_SALT = "lglab"

ProbeTarget = Union[TransformerModel, ConstructionDecoder]

# ============================================
# Domain Layer
# ============================================


@dataclass(frozen=True)
class BasisPair:
    """エンコーダ基底とデコーダ基底の組"""
    encoder: torch.Tensor
    decoder: torch.Tensor
    table: TokenTable
    value_ids: Tuple[int, ...]

    def __post_init__(self):
        if self.encoder.shape != self.decoder.shape:
            raise DimensionError(
                f"Encoder {tuple(self.encoder.shape)} and decoder {tuple(self.decoder.shape)} bases differ in shape"
            )
        if self.encoder.shape[0] != self.table.size:
            raise DimensionError(f"Bases hold {self.encoder.shape[0]} vectors, table {self.table.name} has {self.table.size}")

    @property
    def width(self) -> int:
        return self.encoder.shape[1]

    def family(self, basis: str) -> torch.Tensor:
        if basis not in BASES:
            raise ContractError(f"Unknown basis '{basis}', expected one of {BASES}")
        return self.encoder if basis == "encoder" else self.decoder

    def values(self, basis: str) -> torch.Tensor:
        """Vectors of the value symbols only."""
        return self.family(basis)[list(self.value_ids)]


@dataclass(frozen=True)
class OrthogonalityReport:
    max_abs_cosine: float
    length_spread: float
    count: int


@dataclass(frozen=True)
class CrossBasisReport:
    max_abs_cosine: float
    rank: int
    dimension: int


@dataclass(frozen=True)
class ProjectionProfile:
    """1 つの埋め込みを基底へ射影した値（語彙の記号ごとに 1 つ）"""
    position: int
    depth: int
    stage: str
    basis: str
    values: Tuple[float, ...]
    table: TokenTable = field(repr=False)

    def __post_init__(self):
        if len(self.values) != self.table.size:
            raise DimensionError(f"Profile holds {len(self.values)} values for a table of {self.table.size}")

    def peak(self, ids: Optional[Sequence[int]] = None) -> int:
        """Highest-valued id (ties to the lowest id), over `ids` when given."""
        candidates = list(ids) if ids is not None else list(range(len(self.values)))
        return max(candidates, key=lambda i: (self.values[i], -i))

    def rows(self) -> Iterator[Tuple[int, int, str, str, str, float]]:
        for token_id, value in enumerate(self.values):
            yield self.position, self.depth, self.stage, self.basis, str(self.table.decode(token_id)), value


def _table_for(vocab_size: int) -> TokenTable:
    for table in TABLES.values():
        if table.size == vocab_size:
            return table
    raise ContractError(f"No token table has {vocab_size} ids")


def extract_bases(source: Union[ProbeTarget, Checkpoint], n: int = 2) -> BasisPair:
    """Encoder rows and main-head decoder rows, copied without modification.

    Args:
        source: trained model, checkpoint, or construction wrapper
        n: instance length used to build the construction (its atlas does not depend on n)
    """
    if isinstance(source, ConstructionDecoder):
        table = _table_for(source.vocab_size)
        return BasisPair(source.encoder_rows(n), source.decoder_rows(n), table, tuple(source.value_ids()))
    if isinstance(source, Checkpoint):
        parameters = source.parameters
    elif isinstance(source, TransformerModel):
        parameters = {name: p.detach() for name, p in source.named_parameters()}
    else:
        raise ContractError(f"Cannot extract bases from {type(source).__name__}")
    if "embedding" not in parameters or "heads.main.weight" not in parameters:
        raise ContractError("Source lacks an embedding table or a main head")
    encoder = parameters["embedding"].clone()
    decoder = parameters["heads.main.weight"].t().clone()
    table = _table_for(encoder.shape[0])
    return BasisPair(encoder, decoder, table, tuple(table.value_ids()))


def _cosines(vectors: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    norms = vectors.norm(dim=-1)
    kept = vectors[norms > ZERO_NORM]
    unit = kept / kept.norm(dim=-1, keepdim=True)
    return unit, norms[norms > ZERO_NORM]


def orthogonality_report(vectors: torch.Tensor) -> OrthogonalityReport:
    """Max off-diagonal |cosine| and (max − min)/mean of the vector lengths; zero vectors are skipped."""
    unit, norms = _cosines(vectors)
    if unit.shape[0] < 2:
        raise ContractError(f"Orthogonality needs at least two non-zero vectors, got {unit.shape[0]}")
    gram = (unit @ unit.t()).abs()
    gram.fill_diagonal_(0.0)
    spread = float((norms.max() - norms.min()) / norms.mean())
    return OrthogonalityReport(float(gram.max()), spread, unit.shape[0])


def cross_basis_report(bases: BasisPair) -> CrossBasisReport:
    """Encoder-vs-decoder |cosine| and the numerical rank of both families stacked."""
    encoder, _ = _cosines(bases.values("encoder"))
    decoder, _ = _cosines(bases.values("decoder"))
    cross = (encoder @ decoder.t()).abs()
    stacked = torch.cat([bases.values("encoder"), bases.values("decoder")], dim=0)
    rank = int(torch.linalg.matrix_rank(stacked, rtol=RANK_TOLERANCE))
    return CrossBasisReport(float(cross.max()) if cross.numel() else 0.0, rank, bases.width)


def project_trace(trace: ActivationTrace, bases: BasisPair, position: int, depth: int,
                  stage: str, basis: str = "encoder") -> ProjectionProfile:
    """Dot products of one captured embedding with every vector of a basis."""
    vector = trace.at(position, depth, stage)
    if vector.dim() != 1:
        raise ContractError("Projection needs a single-sequence trace")
    family = bases.family(basis)
    if vector.shape[0] != family.shape[1]:
        raise DimensionError(f"Embedding width {vector.shape[0]} differs from basis width {family.shape[1]}")
    values = family.to(vector.dtype) @ vector
    return ProjectionProfile(position, depth, stage, basis, tuple(float(v) for v in values), bases.table)


# ドメインサービス

def capture_batch(target: ProbeTarget, tokens: torch.Tensor, n_input: int) -> ActivationTrace:
    """Batched activation trace of equally long token rows."""
    if isinstance(target, ConstructionDecoder):
        _, trace = target.model_for(n_input).forward_batch(target.to_symbols(tokens))
        return trace
    with torch.no_grad():
        _, trace = target(tokens, n_input, head_id="main", capture=True)
    return trace


def _decoder_scores(trace: ActivationTrace, bases: BasisPair, depth: int, stage: str) -> torch.Tensor:
    """(B, T, |values|) decoder-basis projections of every row at one depth."""
    if stage not in STAGES:
        raise ContractError(f"Unknown stage '{stage}', expected one of {STAGES}")
    if not 0 <= depth < trace.depth:
        raise ContractError(f"depth {depth} out of range [0, {trace.depth})")
    rows = trace.stage(stage)[..., depth, :]
    return rows @ bases.values("decoder").to(rows.dtype).t()


def _groups(dataset: Examples) -> Dict[int, List[EncodedExample]]:
    if dataset.header.task != "sort":
        raise ContractError(f"Mechanism metrics need a sorting dataset, got '{dataset.header.task}'")
    return dataset.by_input_length()


def min_finding_accuracy(target: ProbeTarget, dataset: Examples, depth_index: int = 0,
                         stage: str = "pre_mlp", bases: Optional[BasisPair] = None) -> float:
    """Fraction of examples whose ⊥ row peaks at the true minimum on the decoder basis."""
    bases = bases or extract_bases(target)
    value_ids = list(bases.value_ids)
    hits = total = 0
    for n, examples in sorted(_groups(dataset).items()):
        tokens = torch.tensor([list(e.prompt_ids[:n + 1]) for e in examples], dtype=torch.long)
        scores = _decoder_scores(capture_batch(target, tokens, n), bases, depth_index, stage)[:, n, :]
        winners = _argmax_ids(scores, value_ids)
        minima = [min(e.prompt_ids[:n]) for e in examples]
        hits += sum(1 for w, m in zip(winners, minima) if w == m)
        total += len(examples)
    if not total:
        raise ContractError("Cannot score an empty dataset")
    return hits / total


def identity_successor_accuracy(target: ProbeTarget, dataset: Examples, depth_index: int = 1,
                                stage: str = "pre_mlp", bases: Optional[BasisPair] = None) -> float:
    """Fraction of output positions whose top decoder-basis projections are {current, next output}.

    The probe runs teacher-forced on input, ⊥ and the first n − 1 sorted
    outputs; when the current and the next output coincide only the top-1 is
    compared.
    """
    bases = bases or extract_bases(target)
    value_ids = list(bases.value_ids)
    hits = total = 0
    for n, examples in sorted(_groups(dataset).items()):
        if n < 2:
            continue
        tokens = torch.tensor([list(e.tokens[:2 * n]) for e in examples], dtype=torch.long)
        scores = _decoder_scores(capture_batch(target, tokens, n), bases, depth_index, stage)
        for row, example in enumerate(examples):
            answer = example.answer_ids
            for position in range(n + 1, 2 * n):
                expected = {example.tokens[position], answer[position - n]}
                top = _top_ids(scores[row, position], value_ids, len(expected))
                hits += int(set(top) == expected)
                total += 1
    if not total:
        raise ContractError("Dataset holds no output positions to probe")
    return hits / total


def _argmax_ids(scores: torch.Tensor, value_ids: Sequence[int]) -> List[int]:
    # 同点は小さい ID（value_ids は昇順）
    return [value_ids[i] for i in scores.argmax(dim=-1).tolist()]


def _top_ids(scores: torch.Tensor, value_ids: Sequence[int], k: int) -> List[int]:
    values = scores.tolist()
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return [value_ids[i] for i in order[:k]]


@dataclass(frozen=True)
class MechanismRow:
    tag: str
    metric: str
    depth: int
    value: float


# ============================================
# Adapter Layer
# ============================================


class ProjectionCSVAdapter:
    """射影プロファイルの CSV アダプター"""

    def write(self, path: Union[str, Path], profiles: Sequence[ProjectionProfile]) -> int:
        count = 0
        with Path(path).open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(PROFILE_HEADER)
            for profile in profiles:
                for position, depth, stage, basis, symbol, value in profile.rows():
                    writer.writerow([position, depth, stage, basis, symbol, f"{value:.17g}"])
                    count += 1
        return count

    def read(self, path: Union[str, Path]) -> List[Tuple[int, int, str, str, str, float]]:
        with Path(path).open(encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != PROFILE_HEADER:
                raise FormatError(f"{path} is not a projection report")
            return [
                (int(r["position"]), int(r["depth"]), r["stage"], r["basis"], r["symbol"], float(r["value"]))
                for r in reader
            ]


class MechanismCSVAdapter:
    def write(self, path: Union[str, Path], rows: Sequence[MechanismRow]) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(MECHANISM_HEADER)
            for row in rows:
                writer.writerow([row.tag, row.metric, row.depth, f"{row.value:.6f}"])


class ProfileSVGAdapter:
    """射影プロファイルを棒グラフ SVG に描画するアダプター（再現可能な出力）"""

    def write(self, directory: Union[str, Path], profile: ProjectionProfile) -> Path:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        matplotlib.rcParams["svg.hashsalt"] = SVG_SALT
        path = Path(directory) / f"profile_p{profile.position}_d{profile.depth}_{profile.stage}_{profile.basis}.svg"
        figure, axis = plt.subplots(figsize=(10, 3))
        axis.bar(range(len(profile.values)), profile.values, width=1.0)
        axis.set_xlabel("token id")
        axis.set_ylabel("projection")
        axis.set_title(f"position {profile.position}, depth {profile.depth}, {profile.stage}, {profile.basis} basis")
        figure.tight_layout()
        figure.savefig(path, format="svg", metadata={"Date": None})
        plt.close(figure)
        return path


def emit_projection_report(profiles: Sequence[ProjectionProfile], path: Union[str, Path],
                           svg_dir: Optional[Union[str, Path]] = None) -> List[Path]:
    """Write the profile CSV and, when `svg_dir` is given, one SVG per profile.

    Returns:
        Paths written, CSV first
    """
    written = [Path(path)]
    rows = ProjectionCSVAdapter().write(path, profiles)
    logging.info(f"Wrote {rows} projection rows to {path}")
    if svg_dir is not None:
        Path(svg_dir).mkdir(parents=True, exist_ok=True)
        adapter = ProfileSVGAdapter()
        written.extend(adapter.write(svg_dir, profile) for profile in profiles)
    return written


def geometry_rows(bases: BasisPair) -> List[Tuple[str, str, float]]:
    """(family, metric, value) rows describing both bases; reported, never asserted."""
    rows: List[Tuple[str, str, float]] = []
    for basis in BASES:
        report = orthogonality_report(bases.values(basis))
        rows.append((basis, "max_abs_cosine", report.max_abs_cosine))
        rows.append((basis, "length_spread", report.length_spread))
    cross = cross_basis_report(bases)
    rows.append(("cross", "max_abs_cosine", cross.max_abs_cosine))
    rows.append(("cross", "rank", float(cross.rank)))
    rows.append(("cross", "dimension", float(cross.dimension)))
    return rows


class GeometryCSVAdapter:
    HEADER = ("family", "metric", "value")

    def write(self, path: Union[str, Path], rows: Sequence[Tuple[str, str, float]]) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.HEADER)
            for family, metric, value in rows:
                writer.writerow([family, metric, f"{value:.6g}"])
