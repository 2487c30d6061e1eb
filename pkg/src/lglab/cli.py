"""lglab command line: gen, train, eval, probe, verify-construction, compare.

Exit codes: 0 success, 1 verification or acceptance failure, 2 usage or
input errors.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import torch

from lglab.config import ManifestAdapter, RunConfig, resolve_run_config
from lglab.construction import (
    ConstructionConfig,
    ConstructionDecoder,
    StageReportCSVAdapter,
    SuiteSummaryCSVAdapter,
    SummaryRow,
    ToleranceConfig,
    build_construction,
    exhaustive_sequences,
    random_sequences,
    verify_suite,
)
from lglab.datagen import (
    BOT_ID,
    INCREMENT_TIERS,
    SORTING_TABLE,
    TASK_TABLES,
    Examples,
    GenConfig,
    RepTestConfig,
    gen_dataset,
    gen_length_test_set,
    gen_rep_test_set,
    read_dataset,
    write_dataset,
)
from lglab.errors import LabError, UsageError, VocabularyError
from lglab.evaluator import (
    ComparisonCSVAdapter,
    ComparisonRow,
    EvalReport,
    EvalReportCSVAdapter,
    TrendCSVAdapter,
    TrendCheck,
    check_trend,
    evaluate_hint,
    evaluate_increment,
    evaluate_lengths,
    parse_length_tag,
)
from lglab.model import ModelConfig, TransformerModel, build_model
from lglab.probe import (
    GeometryCSVAdapter,
    MechanismCSVAdapter,
    MechanismRow,
    ProbeTarget,
    ProjectionProfile,
    capture_batch,
    emit_projection_report,
    extract_bases,
    geometry_rows,
    identity_successor_accuracy,
    min_finding_accuracy,
    project_trace,
)
from lglab.trainer import (
    TrainConfig,
    TrainUseCase,
    configure_determinism,
    load_checkpoint,
    warmup_steps_from_epochs,
)

# 定数
EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
TASKS = ("sort", "successor", "count", "fill", "increment", "carry")
HINT_TASKS = ("successor", "count", "fill", "carry")
LENGTH_TOKEN = re.compile(r"rep\(\s*\d+\s*,\s*\d+\s*\)|\d+")
EXAMPLE_SEQUENCE = (5, 17, 43, 78, 92)
DEFAULT_VALUE_HIGH = 100
DEFAULT_VARIANTS: Mapping[str, Mapping[str, Any]] = {
    "no-hint/standard": {"hint": None, "softmax": "standard"},
    "no-hint/tempered": {"hint": None, "softmax": "tempered"},
    "successor/standard": {"hint": "successor", "softmax": "standard"},
    "successor/tempered": {"hint": "successor", "softmax": "tempered"},
}
DEFAULT_TRENDS = (
    {"name": "hint >= no-hint", "better": "successor/standard", "worse": "no-hint/standard"},
    {"name": "tempered >= standard", "better": "no-hint/tempered", "worse": "no-hint/standard"},
)

# ============================================
# Flag parsing
# ============================================


def parse_lengths(text: str) -> List[str]:
    """'10,12,rep(10,5)' → ['10', '12', 'rep(10,5)']"""
    tokens = [t.replace(" ", "") for t in LENGTH_TOKEN.findall(text)]
    rebuilt = ",".join(tokens)
    if not tokens or rebuilt != text.replace(" ", ""):
        raise UsageError(f"Cannot parse length list '{text}'")
    return tokens


def parse_ints(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"Expected comma-separated integers, got '{text}'") from None


def _merge(base: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


# ============================================
# UseCase Layer
# ============================================


@dataclass(frozen=True)
class Artifacts:
    """実行で書き出したファイルと解決済み設定"""
    paths: Tuple[Path, ...]
    resolved: Dict[str, Any] = field(default_factory=dict)


def gen_config_for(run: RunConfig, task: str, overrides: Mapping[str, Any]) -> GenConfig:
    data = run.section("data")
    if task in ("increment", "carry") and "tiers" not in data:
        data["tiers"] = [{"mass": t.mass, "low": t.low, "high": t.high} for t in INCREMENT_TIERS]
    data["seed"] = run.seed
    return GenConfig.from_dict(_merge(data, overrides))


def model_config_for(run: RunConfig, vocab_size: int, overrides: Mapping[str, Any]) -> ModelConfig:
    values = _merge(run.section("model"), overrides)
    values["vocab_size"] = vocab_size
    values["precision"] = run.precision
    return ModelConfig.from_dict(values)


def train_config_for(run: RunConfig, overrides: Mapping[str, Any], dataset_size: int,
                     warmup_epochs: Optional[float] = None) -> TrainConfig:
    values = _merge(run.section("train"), overrides)
    epochs = warmup_epochs if warmup_epochs is not None else values.pop("warmup_epochs", None)
    values.pop("warmup_epochs", None)
    if epochs is not None:
        values["warmup_steps"] = warmup_steps_from_epochs(epochs, dataset_size, values.get("batch_size", 64))
    values["seed"] = run.seed
    values["deterministic"] = run.deterministic
    values["threads"] = run.threads
    return TrainConfig.from_dict(values)


def hint_dataset(run: RunConfig, hint: str, main: Examples, path: Optional[str]) -> Examples:
    """Auxiliary dataset from a file, or generated with the run seed and the main dataset's size."""
    aux = read_dataset(path) if path else gen_dataset(hint, gen_config_for(run, hint, {"count": len(main)}))
    if aux.token_table != main.token_table:
        raise VocabularyError(f"Hint task '{hint}' uses {aux.token_table.name}, main data uses {main.token_table.name}")
    return aux


class GenUseCase:
    def execute(self, run: RunConfig, args: argparse.Namespace) -> Artifacts:
        overrides = {
            "count": args.count,
            "repetition_prob": args.repetition,
            "value_low": args.value_low,
            "value_high": args.value_high,
        }
        cfg = gen_config_for(run, args.task, overrides)
        if args.length is not None:
            context = max(cfg.context_length, 2 * args.length + 2)
            examples = gen_length_test_set(args.task, args.length, cfg.count, run.seed, context,
                                           cfg.value_low, cfg.value_high)
            name = f"{args.task}-len{args.length}.jsonl"
        elif args.rep is not None:
            parsed = parse_length_tag(args.rep, cfg.count)
            if not isinstance(parsed, RepTestConfig):
                raise UsageError(f"--rep expects rep(i,r), got '{args.rep}'")
            context = max(cfg.context_length, 2 * parsed.length + 2)
            examples = gen_rep_test_set(parsed, run.seed, context, cfg.value_low, cfg.value_high)
            name = f"sort-rep{parsed.length}x{parsed.repeat}.jsonl"
        else:
            examples = gen_dataset(args.task, cfg)
            name = f"{args.task}.jsonl"
        path = run.output_path / (args.out or name)
        write_dataset(path, examples)
        logging.info(f"Wrote {len(examples)} examples to {path}")
        return Artifacts((path,), {"task": args.task, "data": cfg.to_dict(), "length": args.length, "rep": args.rep})


class TrainCommandUseCase:
    """データ読み込み → モデル構築 → 学習 → 保存"""

    def __init__(self, train_usecase: Optional[TrainUseCase] = None):
        self.train_usecase = train_usecase or TrainUseCase()

    def execute(self, run: RunConfig, args: argparse.Namespace) -> Artifacts:
        main = read_dataset(args.data)
        ckpt = load_checkpoint(args.resume) if args.resume else None
        # 再開時の補助データは元の実行と同じシードで作る
        hint_run = replace(run, seed=ckpt.train_config.seed) if ckpt is not None else run
        aux = hint_dataset(hint_run, args.hint, main, args.hint_data) if args.hint else None
        checkpoint_path = run.output_path / "checkpoint.lgck"
        metrics_path = run.output_path / "metrics.csv"

        if ckpt is not None:
            model, optimizer = ckpt.restore()
            cfg = ckpt.train_config
            start = ckpt.step
            logging.info(f"Resuming from {args.resume} at step {start}")
        else:
            overrides = {"depth": args.depth, "d_model": args.d_model, "n_heads": args.heads,
                         "softmax_mode": args.softmax}
            model_cfg = model_config_for(run, main.token_table.size, overrides)
            train_overrides = {"total_steps": args.steps, "base_lr": args.lr, "batch_size": args.batch_size,
                               "warmup_steps": args.warmup,
                               "task_mix": "alternating" if aux is not None else "single"}
            cfg = train_config_for(run, train_overrides, len(main), args.warmup_epochs)
            model = build_model(model_cfg, seed=cfg.seed)
            optimizer = None
            start = 0
            metrics_path.unlink(missing_ok=True)

        result = self.train_usecase.execute(
            main, aux, model, cfg, optimizer=optimizer, start_step=start, stop_step=args.stop_at,
            metrics_path=metrics_path, checkpoint_path=checkpoint_path,
        )
        resolved = {
            "model": result.checkpoint.model_config.to_dict(),
            "train": cfg.to_dict(),
            "data": str(args.data),
            "hint": args.hint,
            "hint_data": args.hint_data,
            "resume": args.resume,
            "stop_at": args.stop_at,
        }
        return Artifacts((checkpoint_path, metrics_path), resolved)


def load_target(args: argparse.Namespace) -> Tuple[ProbeTarget, str]:
    """--construction or --checkpoint を解決"""
    if args.construction:
        return ConstructionDecoder(q=args.q, layernorm_mode=args.layernorm), f"construction(q={args.q})"
    if not args.checkpoint:
        raise UsageError("Pass --checkpoint PATH or --construction")
    model, _ = load_checkpoint(args.checkpoint).restore()
    return model, str(args.checkpoint)


class EvalCommandUseCase:
    def execute(self, run: RunConfig, args: argparse.Namespace) -> Artifacts:
        target, model_id = load_target(args)
        eval_section = run.section("eval")
        count = args.count or eval_section.get("per_length_count", 1000)
        lengths = parse_lengths(args.lengths) if args.lengths else [str(v) for v in eval_section.get("lengths", [])]
        if not lengths:
            raise UsageError("No evaluation lengths given (--lengths or eval.lengths)")
        metadata: Dict[str, Any] = {"model": model_id, "lengths": ",".join(lengths)}

        if args.task == "increment":
            report = evaluate_increment(target, [int(v) for v in lengths], count, run.seed, metadata)
        else:
            value_high = args.value_high or eval_section.get("value_high") or (
                args.q if args.construction else DEFAULT_VALUE_HIGH)
            report = evaluate_lengths(target, lengths, count, args.distribution, run.seed,
                                      eval_section.get("value_low", 1), value_high, metadata)
        if args.hint_data:
            if not isinstance(target, TransformerModel):
                logging.warning("Hint evaluation skipped: the construction has no aux head")
            else:
                accuracy = evaluate_hint(target, read_dataset(args.hint_data))
                logging.info(f"hint accuracy: {accuracy:.4f}")
                report = EvalReport(report.rows, {**report.metadata, "hint_accuracy": f"{accuracy:.6f}"})

        path = run.output_path / "eval_report.csv"
        EvalReportCSVAdapter().write(path, report)
        return Artifacts((path,), {"task": args.task, "count": count, **dict(report.metadata)})


def _example_tokens(sequence: Sequence[int]) -> List[int]:
    """入力 + ⊥ + 整列済み出力の先頭 n−1 個（教師強制）"""
    ids = [SORTING_TABLE.encode(v) for v in sequence]
    return ids + [BOT_ID] + sorted(ids)[:len(ids) - 1]


class ProbeCommandUseCase:
    def execute(self, run: RunConfig, args: argparse.Namespace) -> Tuple[Artifacts, bool]:
        target, model_id = load_target(args)
        bases = extract_bases(target)
        value_high = args.value_high or (args.q if args.construction else DEFAULT_VALUE_HIGH)
        out = run.output_path
        written: List[Path] = []

        geometry_path = out / "geometry.csv"
        GeometryCSVAdapter().write(geometry_path, geometry_rows(bases))
        written.append(geometry_path)

        # 長さごとの機構メトリクス
        if args.data:
            suites = {"data": read_dataset(args.data)}
        else:
            lengths = parse_ints(args.lengths) if args.lengths else [len(EXAMPLE_SEQUENCE)]
            suites = {
                str(n): gen_length_test_set("sort", n, args.count, run.seed, 2 * n + 2, 1, value_high)
                for n in lengths
            }
        mechanisms: List[MechanismRow] = []
        for tag, suite in suites.items():
            mechanisms.append(MechanismRow(tag, "min_finding", args.min_depth,
                                           min_finding_accuracy(target, suite, args.min_depth, bases=bases)))
            mechanisms.append(MechanismRow(tag, "identity_successor", args.successor_depth,
                                           identity_successor_accuracy(target, suite, args.successor_depth,
                                                                       bases=bases)))
            logging.info(f"{tag}: min={mechanisms[-2].value:.4f} identity+successor={mechanisms[-1].value:.4f}")
        mechanisms_path = out / "mechanisms.csv"
        MechanismCSVAdapter().write(mechanisms_path, mechanisms)
        written.append(mechanisms_path)

        # 例の系列の射影プロファイル
        sequence = tuple(parse_ints(args.sequence)) if args.sequence else EXAMPLE_SEQUENCE
        if max(sequence) > value_high:
            raise UsageError(f"Example sequence {sequence} exceeds the value range 1..{value_high}")
        n = len(sequence)
        tokens = torch.tensor([_example_tokens(sequence)], dtype=torch.long)
        trace = capture_batch(target, tokens, n).example(0)
        profiles = self.profiles(args, trace, bases, n)
        written.extend(emit_projection_report(profiles, out / "projections.csv",
                                              out / "svg" if args.svg else None))

        exact = all(row.value == 1.0 for row in mechanisms)
        resolved = {"model": model_id, "sequence": list(sequence), "min_depth": args.min_depth,
                    "successor_depth": args.successor_depth, "suites": sorted(suites), "count": args.count}
        # 構成モデルでは両メトリクスが厳密に 1.0
        return Artifacts(tuple(written), resolved), exact or not args.construction

    @staticmethod
    def profiles(args: argparse.Namespace, trace, bases, n: int) -> List[ProjectionProfile]:
        if args.positions:
            depths = parse_ints(args.depths) if args.depths else list(range(trace.depth))
            return [
                project_trace(trace, bases, position, depth, stage, basis)
                for position in parse_ints(args.positions)
                for depth in depths
                for stage in (args.stages.split(",") if args.stages else ["pre_mlp", "post_mlp"])
                for basis in ("encoder", "decoder")
            ]
        last = trace.depth - 1
        output_position = min(n + 2, trace.length - 1)
        return [
            project_trace(trace, bases, min(2, n - 1), 0, "pre_mlp", "encoder"),
            project_trace(trace, bases, n, 0, "pre_mlp", "decoder"),
            project_trace(trace, bases, output_position, min(1, last), "pre_mlp", "decoder"),
        ]


class VerifyConstructionUseCase:
    """網羅 + ランダム検証、ε スイープ、二重化 LayerNorm 版の一致確認"""

    def execute(self, run: RunConfig, args: argparse.Namespace) -> Tuple[Artifacts, bool]:
        suites: List[Tuple[str, int, List[List[int]]]] = []
        for n in range(2, args.exhaustive_upto + 1):
            suites.append(("exhaustive", n, list(exhaustive_sequences(args.q, n))))
        for n in parse_ints(args.lengths) if args.lengths else []:
            suites.append(("random", n, random_sequences(args.q, n, args.samples, run.seed)))
        if not suites:
            raise UsageError("Nothing to verify: pass --exhaustive-upto and/or --lengths")

        tol = ToleranceConfig(args.noise_budget)
        summary: List[SummaryRow] = []
        stage_rows = []
        for kind, n, seqs in suites:
            model = build_construction(ConstructionConfig(args.q, n))
            result = verify_suite(model, seqs, tol, keep_rows=True)
            stage_rows.extend((f"{kind}-n{n}-{seq_id}", check) for seq_id, check in result.rows
                              if args.full_report or not check.passed)
            agrees = None
            if args.doubled:
                doubled = build_construction(ConstructionConfig(args.q, n, layernorm_mode="doubled"))
                doubled_result = verify_suite(doubled, seqs, None, check_stages=False)
                agrees = bool(torch.equal(doubled_result.predictions, result.predictions))
                summary.append(SummaryRow(f"{kind}-doubled", args.q, doubled_result, agrees))
            summary.append(SummaryRow(kind, args.q, result))
            if args.epsilon_sweep:
                for epsilon in (0.25, 1.0 / (4.0 * (n + 1))):
                    swept = build_construction(ConstructionConfig(args.q, n, epsilon=epsilon))
                    summary.append(SummaryRow("sweep", args.q, verify_suite(swept, seqs, tol, check_stages=False)))

        out = run.output_path
        stage_path = out / "stage_report.csv"
        summary_path = out / "summary.csv"
        StageReportCSVAdapter().write(stage_path, stage_rows)
        SuiteSummaryCSVAdapter().write(summary_path, summary)
        # ε スイープは報告のみ（合否には含めない）
        passed = all(row.passed for row in summary if row.suite != "sweep")
        resolved = {"q": args.q, "exhaustive_upto": args.exhaustive_upto, "lengths": args.lengths,
                    "samples": args.samples, "noise_budget": args.noise_budget, "doubled": args.doubled,
                    "epsilon_sweep": args.epsilon_sweep}
        return Artifacts((stage_path, summary_path), resolved), passed


class CompareUseCase:
    """バリアント × シードで学習・評価し、方向性の傾向を判定する"""

    def __init__(self, train_usecase: Optional[TrainUseCase] = None):
        self.train_usecase = train_usecase or TrainUseCase()

    def execute(self, run: RunConfig, args: argparse.Namespace) -> Tuple[Artifacts, bool]:
        section = run.section("compare")
        variants: Mapping[str, Mapping[str, Any]] = section.get("variants") or DEFAULT_VARIANTS
        trends = section.get("trends") or list(DEFAULT_TRENDS)
        seeds = parse_ints(args.seeds) if args.seeds else list(section.get("seeds", [0, 1, 2]))
        lengths = parse_lengths(args.lengths) if args.lengths else [str(v) for v in section.get("lengths", [10, 12])]
        count = args.count or section.get("per_length_count", 200)

        rows: List[ComparisonRow] = []
        scores: Dict[str, Dict[int, float]] = {name: {} for name in variants}
        for seed in seeds:
            seeded = RunConfig.from_dict({**run.to_dict(), "seed": seed})
            main = gen_dataset("sort", gen_config_for(seeded, "sort", {}))
            for name, variant in variants.items():
                model = self.train_variant(seeded, main, variant)
                data = seeded.section("data")
                report = evaluate_lengths(model, lengths, count, seed=seed, value_low=data.get("value_low", 1),
                                          value_high=data.get("value_high", DEFAULT_VALUE_HIGH))
                rows.extend(ComparisonRow(name, seed, row) for row in report)
                scores[name][seed] = sum(r.full_seq_acc for r in report) / len(report)
                logging.info(f"{name} seed={seed}: mean OOD accuracy {scores[name][seed]:.4f}")

        checks: List[TrendCheck] = []
        for trend in trends:
            if trend["better"] not in scores or trend["worse"] not in scores:
                raise UsageError(f"Trend '{trend['name']}' names an unknown variant")
            checks.append(check_trend(trend["name"], scores[trend["better"]], scores[trend["worse"]]))
        for check in checks:
            level = logging.INFO if check.passed else logging.WARNING
            logging.log(level, f"trend '{check.name}': {check.wins}/{check.seeds} seeds (need {check.quorum})")

        out = run.output_path
        comparison_path = out / "comparison.csv"
        trends_path = out / "trends.csv"
        ComparisonCSVAdapter().write(comparison_path, rows)
        TrendCSVAdapter().write(trends_path, checks)
        resolved = {"variants": {k: dict(v) for k, v in variants.items()}, "trends": list(trends),
                    "seeds": seeds, "lengths": lengths, "count": count,
                    "model": run.section("model"), "train": run.section("train"), "data": run.section("data")}
        return Artifacts((comparison_path, trends_path), resolved), all(c.passed for c in checks)

    def train_variant(self, run: RunConfig, main: Examples, variant: Mapping[str, Any]) -> TransformerModel:
        hint = variant.get("hint")
        if hint is not None and TASK_TABLES.get(hint) != main.token_table:
            raise UsageError(f"Hint task '{hint}' does not share the sorting vocabulary")
        aux = hint_dataset(run, hint, main, None) if hint else None
        model_overrides = {**dict(variant.get("model", {})), "softmax_mode": variant.get("softmax")}
        model = build_model(model_config_for(run, main.token_table.size, model_overrides), seed=run.seed)
        train_overrides = {**dict(variant.get("train", {})),
                           "task_mix": "alternating" if aux is not None else "single"}
        cfg = train_config_for(run, train_overrides, len(main))
        return self.train_usecase.execute(main, aux, model, cfg).model


# ============================================
# Composition Root
# ============================================


def _finish(run: RunConfig, artifacts: Artifacts) -> None:
    manifest = ManifestAdapter().write(run, artifacts.resolved, artifacts.paths)
    logging.info(f"Wrote {manifest}")


def cmd_gen(run: RunConfig, args: argparse.Namespace) -> int:
    _finish(run, GenUseCase().execute(run, args))
    return EXIT_OK


def cmd_train(run: RunConfig, args: argparse.Namespace) -> int:
    _finish(run, TrainCommandUseCase().execute(run, args))
    return EXIT_OK


def cmd_eval(run: RunConfig, args: argparse.Namespace) -> int:
    _finish(run, EvalCommandUseCase().execute(run, args))
    return EXIT_OK


def cmd_probe(run: RunConfig, args: argparse.Namespace) -> int:
    artifacts, passed = ProbeCommandUseCase().execute(run, args)
    _finish(run, artifacts)
    return EXIT_OK if passed else EXIT_FAILED


def cmd_verify_construction(run: RunConfig, args: argparse.Namespace) -> int:
    artifacts, passed = VerifyConstructionUseCase().execute(run, args)
    _finish(run, artifacts)
    if not passed:
        logging.error("Construction verification failed; see summary.csv and stage_report.csv")
    return EXIT_OK if passed else EXIT_FAILED


def cmd_compare(run: RunConfig, args: argparse.Namespace) -> int:
    artifacts, passed = CompareUseCase().execute(run, args)
    _finish(run, artifacts)
    return EXIT_OK if passed else EXIT_FAILED


COMMANDS: Mapping[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "verify-construction": cmd_verify_construction,
    "compare": cmd_compare,
}


def _add_target_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", help="Checkpoint (.lgck) of a trained model")
    parser.add_argument("--construction", action="store_true", help="Use the hand-constructed sorting model")
    parser.add_argument("--q", type=int, default=100, help="Alphabet size of the construction (default: 100)")
    parser.add_argument("--layernorm", choices=("off", "doubled"), default="off",
                        help="Construction variant (default: off)")
    parser.add_argument("--value-high", type=int, help="Largest value in generated test sets")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (sections: run, model, train, data, eval, compare)")
    common.add_argument("--seed", type=int, help="Seed (env: LGLAB_SEED)")
    common.add_argument("--output-dir", help="Output directory (env: LGLAB_OUTPUT_DIR)")
    common.add_argument("--precision", choices=("float64", "float32"), help="Numeric precision (env: LGLAB_PRECISION)")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="Single-threaded deterministic numerics (env: LGLAB_DETERMINISTIC)")
    common.add_argument("--threads", type=int, help="Worker threads when not deterministic (env: LGLAB_THREADS)")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    verbosity.add_argument("--quiet", "-q", action="store_true", help="Warnings and errors only")

    parser = argparse.ArgumentParser(
        prog="lglab",
        description="Length-generalization lab: datasets, training, evaluation, probing and construction checks",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Training data and a held-out length
  lglab gen --task sort --count 10000 --seed 7 --output-dir runs/data
  lglab gen --task sort --length 12 --count 1000 --output-dir runs/data

  # Train with the successor hint and tempered softmax
  lglab train --config configs/desk-sort.yml --data runs/data/sort.jsonl \\
    --hint successor --softmax tempered --output-dir runs/hint

  # Evaluate, including rep(i,r) suites
  lglab eval --checkpoint runs/hint/checkpoint.lgck --lengths 10,12,rep(10,5)

  # Probe the construction and verify it exhaustively
  lglab probe --construction --svg --output-dir runs/probe
  lglab verify-construction --q 10 --exhaustive-upto 4
  lglab verify-construction --q 100 --lengths 20,50,100 --samples 1000
""",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="Generate a dataset")
    gen.add_argument("--task", choices=TASKS, required=True)
    gen.add_argument("--count", type=int, help="Number of examples")
    gen.add_argument("--length", type=int, help="Fixed-length test set (sort or increment)")
    gen.add_argument("--rep", help="rep(i,r) test set")
    gen.add_argument("--repetition", type=float, help="Probability of the repetition branch (sort)")
    gen.add_argument("--value-low", type=int)
    gen.add_argument("--value-high", type=int)
    gen.add_argument("--out", help="File name inside the output directory")

    train = sub.add_parser("train", parents=[common], help="Train a model")
    train.add_argument("--data", required=True, help="Main-task dataset")
    train.add_argument("--hint", choices=HINT_TASKS, help="Auxiliary task trained in alternation")
    train.add_argument("--hint-data", help="Auxiliary dataset (generated when omitted)")
    train.add_argument("--softmax", choices=("standard", "tempered"))
    train.add_argument("--depth", type=int)
    train.add_argument("--d-model", type=int)
    train.add_argument("--heads", type=int)
    train.add_argument("--steps", type=int, help="Total optimizer steps")
    train.add_argument("--lr", type=float, help="Base learning rate")
    train.add_argument("--batch-size", type=int)
    train.add_argument("--warmup", type=int, help="Warmup steps")
    train.add_argument("--warmup-epochs", type=float, help="Warmup length in passes over the main dataset")
    train.add_argument("--resume", help="Checkpoint to resume from")
    train.add_argument("--stop-at", type=int, help="Stop before this step (the checkpoint can be resumed)")

    evaluate = sub.add_parser("eval", parents=[common], help="Evaluate across lengths")
    _add_target_flags(evaluate)
    evaluate.add_argument("--task", choices=("sort", "increment"), default="sort")
    evaluate.add_argument("--lengths", help="Comma-separated lengths and rep(i,r) tags")
    evaluate.add_argument("--count", type=int, help="Examples per length")
    evaluate.add_argument("--distribution", choices=("uniform", "rep"), default="uniform")
    evaluate.add_argument("--hint-data", help="Auxiliary dataset for aux-head accuracy")

    probe = sub.add_parser("probe", parents=[common], help="Project embeddings onto the bases")
    _add_target_flags(probe)
    probe.add_argument("--data", help="Sorting dataset for the mechanism metrics")
    probe.add_argument("--lengths", help="Generate one sorting suite per length")
    probe.add_argument("--count", type=int, default=100, help="Examples per generated suite")
    probe.add_argument("--sequence", help="Example input, e.g. 5,17,43,78,92")
    probe.add_argument("--positions", help="Positions to project")
    probe.add_argument("--depths", help="Depths to project (zero-based)")
    probe.add_argument("--stages", help="pre_mlp,post_mlp")
    probe.add_argument("--min-depth", type=int, default=0)
    probe.add_argument("--successor-depth", type=int, default=1)
    probe.add_argument("--svg", action="store_true", help="Also render SVG bar charts")

    verify = sub.add_parser("verify-construction", parents=[common], help="Verify the constructed sorter")
    verify.add_argument("--q", type=int, default=10)
    verify.add_argument("--exhaustive-upto", type=int, default=0, help="Check every sequence of length 2..N")
    verify.add_argument("--lengths", help="Lengths of the random suites")
    verify.add_argument("--samples", type=int, default=1000, help="Random sequences per length")
    verify.add_argument("--noise-budget", type=float, help="Residual budget (default: 10/n²)")
    verify.add_argument("--epsilon-sweep", action="store_true", help="Also report ε = 1/4 and 1/(4(n+1))")
    verify.add_argument("--doubled", action=argparse.BooleanOptionalAction, default=True,
                        help="Check the doubled layer-norm variant agrees")
    verify.add_argument("--full-report", action="store_true", help="Write every stage check, not just failures")

    compare = sub.add_parser("compare", parents=[common], help="Train and compare a variant grid")
    compare.add_argument("--seeds", help="Comma-separated seeds")
    compare.add_argument("--lengths", help="Out-of-distribution lengths")
    compare.add_argument("--count", type=int, help="Examples per length")
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format='%(levelname)s: %(message)s', stream=sys.stderr, force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.verbose, args.quiet)

    flags = {"config": args.config, "seed": args.seed, "output_dir": args.output_dir,
             "precision": args.precision, "deterministic": args.deterministic, "threads": args.threads}
    try:
        # 1. 設定の解決（ファイル < 環境変数 < フラグ）
        run = resolve_run_config(args.command, flags)
        # 2. 出力先と数値環境の準備
        run.output_path.mkdir(parents=True, exist_ok=True)
        configure_determinism(run.deterministic, run.threads)
        # 3. サブコマンド実行
        return COMMANDS[args.command](run, args)
    except LabError as exc:
        logging.error(str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
