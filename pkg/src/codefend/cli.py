"""Subcommand front-end: dataset forging, purifier training, prompt
optimization, prefix-generator training, end-to-end defense, evaluation."""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import attackforge, promptopt
from .config import Config, ConfigError, load_config
from .core import ImageTensor, Rng, load_manifest, read_image, split_manifest
from .errors import CodefendError
from .evalkit import (
    EvalRecord,
    clip_score,
    emit_report,
    feature_similarity,
    parse_report_csv,
    target_hit,
    vqa_answer_correct,
    write_report_csv,
    write_report_markdown,
    write_similarity_dump,
    write_similarity_plots,
)
from .pipeline import DefenseConfig, defend_batch, write_traces
from .prefixgen import (
    DecodeConfig,
    PrefixTrainConfig,
    TinyCausalLm,
    build_prefix_dataset,
    load_prefix_dataset,
    save_adapter,
    save_prefix_dataset,
    train_prefix_generator,
)
from .providers import (
    CaptionAgreementOracle,
    SurrogateVisionEncoder,
    build_surrogate_registry,
    make_probe_victim,
    make_prompt_space,
    make_toy_images,
    prompt_detokenize,
    prompt_word_tokens,
)
from .purifier import (
    BlockPoolCodec,
    SamplerConfig,
    SurrogateNoisePredictor,
    TrainConfig,
    cosine_schedule,
    load_checkpoint,
    purify,
    train_purifier,
)

SUBCOMMANDS = (
    "attack-gen",
    "train-purifier",
    "optimize-prompts",
    "build-prefix-data",
    "train-prefix",
    "defend",
    "evaluate",
    "analyze-features",
    "report",
)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--workdir", default=".", help="base directory for relative paths")
    sub.add_argument("--config", default=None, help="key-value config file")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable; beats file and env)",
    )
    sub.add_argument("--seed", type=int, default=None, help="shortcut for run.seed")
    sub.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codefend")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("attack-gen", help="forge adversarial-clean pairs")
    _add_common(p)
    p.add_argument("--images", default=None, help="directory of clean PNG images")
    p.add_argument("--n-images", type=int, default=16, help="synthetic image count")

    p = subs.add_parser("train-purifier", help="train the conditional denoiser")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--train-fraction", type=float, default=None, help="re-split before training")

    p = subs.add_parser("optimize-prompts", help="search defense-aware prompt triggers")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--purifier", required=True, help="purifier checkpoint")
    p.add_argument("--questions", default=None, help="file with one question per line")

    p = subs.add_parser("build-prefix-data", help="assemble (query, prefix) samples")
    _add_common(p)
    p.add_argument("--records", required=True, help="optimized prompt records (jsonl)")
    p.add_argument("--questions", required=True, help="file with one question per line")

    p = subs.add_parser("train-prefix", help="adapter-tune the prefix generator")
    _add_common(p)
    p.add_argument("--data", required=True, help="prefix samples (jsonl)")

    p = subs.add_parser("defend", help="run the three-stage defense")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--purifier", required=True)
    p.add_argument("--adapter", default=None)
    p.add_argument("--question", default=None, help="single question applied to every item")
    p.add_argument("--questions", default=None, help="file with one question per line")

    p = subs.add_parser("evaluate", help="score answers per model x attack x method")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--methods", default="vanilla", help="comma list: vanilla,purified,defended")
    p.add_argument("--purifier", default=None)
    p.add_argument("--adapter", default=None)
    p.add_argument("--question", default=None)
    p.add_argument("--golds", default=None, help="file with one gold answer per line")

    p = subs.add_parser("analyze-features", help="feature-level purification analysis")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--purifier", required=True)

    p = subs.add_parser("report", help="re-render tables from a records CSV")
    _add_common(p)
    p.add_argument("--records", required=True, help="report.csv to render")

    return parser


def _resolve(workdir: Path, path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    return p if p.is_absolute() else workdir / p


def _effective_config(args) -> Config:
    overrides: dict[str, str] = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    workdir = Path(args.workdir)
    config_file = _resolve(workdir, args.config)
    return load_config(config_file=config_file, overrides=overrides)


def _git_describe(workdir: Path) -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=workdir,
            capture_output=True,
            text=True,
            timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def _write_run_json(out_dir: Path, command: str, cfg: Config, started: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "effective_config": cfg.as_dict(),
        "seed": cfg["run.seed"],
        "git_describe": _git_describe(Path.cwd()),
        "timings_ms": {"total": round((time.perf_counter() - started) * 1000.0, 3)},
    }
    (out_dir / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_lines(path: Path) -> list[str]:
    return [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]


def _image_shape(cfg: Config) -> tuple[int, int, int]:
    return (cfg["data.image_size"], cfg["data.image_size"], cfg["data.channels"])


def _sampler_cfg(cfg: Config) -> SamplerConfig:
    t = int(round(cfg["sampler.t_start_frac"] * cfg["purifier.schedule_steps"]))
    return SamplerConfig(
        steps=cfg["sampler.steps"],
        t_start=t,
        image_guidance=cfg["sampler.image_guidance"],
        text_guidance=cfg["sampler.text_guidance"],
        seed=cfg["run.seed"],
    )


def _decode_cfg(cfg: Config) -> DecodeConfig:
    return DecodeConfig(
        max_length=cfg["decode.max_length"],
        strategy=cfg["decode.strategy"],
        seed=cfg["run.seed"],
        template=cfg["prefix.template"],
    )


def _surrogate_purifier(cfg: Config) -> tuple[BlockPoolCodec, SurrogateNoisePredictor]:
    schedule = cosine_schedule(cfg["purifier.schedule_steps"])
    codec = BlockPoolCodec(factor=4)
    predictor = SurrogateNoisePredictor(
        schedule, channels=cfg["data.channels"], width=cfg["purifier.width"], seed=cfg["run.seed"]
    )
    return codec, predictor


def _load_images(args, cfg: Config, workdir: Path) -> list[ImageTensor]:
    if args.images:
        image_dir = _resolve(workdir, args.images)
        paths = sorted(image_dir.glob("*.png"))
        if not paths:
            raise CodefendError(f"no PNG images under {image_dir}")
        return [read_image(p) for p in paths]
    return make_toy_images(
        args.n_images,
        size=cfg["data.image_size"],
        channels=cfg["data.channels"],
        seed=cfg["run.seed"],
    )


# -- handlers -----------------------------------------------------------------


def _cmd_attack_gen(args, cfg: Config, workdir: Path, out_dir: Path) -> None:
    images = _load_images(args, cfg, workdir)
    shape = images[0].shape
    targeted = cfg["attack.targeted"]
    target = cfg["attack.target_text"] or cfg["victim.target_text"]
    if targeted:
        _victim, oracle = make_probe_victim(
            shape, target, epsilon_ref=cfg["attack.epsilon"], seed=cfg["run.seed"]
        )
        reference = None
    else:
        oracle = CaptionAgreementOracle(shape, seed=cfg["run.seed"])
        reference = ["a smooth color field"] * len(images)
    attack_cfg = attackforge.AttackConfig(
        epsilon=cfg["attack.epsilon"],
        steps=cfg["attack.steps"],
        step_size=min(cfg["attack.step_size"], cfg["attack.epsilon"]),
        targeted=targeted,
        target_text=target if targeted else None,
        seed=cfg["run.seed"],
    )
    manifest = attackforge.forge_dataset(
        images, oracle, attack_cfg, out_dir, reference_texts=reference
    )
    print(f"forged {len(manifest)} pairs -> {out_dir / 'pairs.jsonl'}")


def _cmd_train_purifier(args, cfg: Config, workdir: Path, out_dir: Path) -> None:
    manifest = load_manifest(_resolve(workdir, args.manifest))
    if args.train_fraction is not None:
        manifest = split_manifest(manifest, args.train_fraction, Rng(cfg["run.seed"]))
        from .core import save_manifest

        save_manifest(manifest, out_dir / "split.jsonl")
    codec, predictor = _surrogate_purifier(cfg)
    train_cfg = TrainConfig(
        learning_rate=cfg["purifier.learning_rate"],
        batch_size=cfg["purifier.batch_size"],
        epochs=cfg["purifier.epochs"],
        seed=cfg["run.seed"],
        instruction=cfg["purifier.instruction"],
        log_path=str(out_dir / "loss_log.csv"),
    )
    checkpoint = train_purifier(manifest, codec, predictor, train_cfg)
    checkpoint.save(out_dir / "purifier.npz")
    print(f"checkpoint -> {out_dir / 'purifier.npz'}; loss log -> {out_dir / 'loss_log.csv'}")


def _cmd_optimize_prompts(args, cfg: Config, workdir: Path, out_dir: Path) -> None:
    from .providers import EmbedMatchScorer

    manifest = load_manifest(_resolve(workdir, args.manifest))
    checkpoint = load_checkpoint(_resolve(workdir, args.purifier))
    codec, predictor = _surrogate_purifier(cfg)
    sampler = _sampler_cfg(cfg)
    entries = manifest.subset("train").entries or manifest.entries
    questions = (
        _read_lines(_resolve(workdir, args.questions))
        if args.questions
        else ["What is shown?"] * len(entries)
    )
    if len(questions) != len(entries):
        raise CodefendError(f"{len(questions)} questions vs {len(entries)} manifest entries")
    vocab_size = cfg["promptopt.vocab_size"]
    space = make_prompt_space(
        vocab_size=vocab_size,
        trigger_length=cfg["promptopt.trigger_length"],
        delta_bound=cfg["promptopt.delta_bound"],
        seed=cfg["run.seed"],
    )
    scorer = EmbedMatchScorer(space.embeddings, seed=cfg["run.seed"])
    opt_records = []
    trace_dir = out_dir / "traces"
    for entry, question in zip(entries, questions):
        pair = manifest.load_pair(entry)
        purified = purify(pair.adv, checkpoint, codec, predictor, sampler)
        gold = "a smooth color field"
        record = promptopt.optimize_prompt(
            purified,
            prompt_word_tokens(question, vocab_size),
            prompt_word_tokens(gold, vocab_size),
            scorer,
            space,
            promptopt.OptimizeConfig(
                rounds=cfg["promptopt.rounds"],
                beam_width=cfg["promptopt.beam_width"],
                candidates_per_position=cfg["promptopt.candidates_per_position"],
                seed=cfg["run.seed"],
                trace_path=str(trace_dir / f"{pair.clean.id}.jsonl"),
            ),
        )
        opt_records.append((pair.clean.id, record))
    promptopt.write_prompt_records(opt_records, out_dir / "prompt_records.jsonl")
    print(f"{len(opt_records)} prompt records -> {out_dir / 'prompt_records.jsonl'}")


def _cmd_build_prefix_data(args, cfg: Config, workdir: Path, out_dir: Path) -> None:
    records = promptopt.read_prompt_records(_resolve(workdir, args.records))
    questions = _read_lines(_resolve(workdir, args.questions))
    if len(questions) != len(records):
        raise CodefendError(f"{len(questions)} questions vs {len(records)} records")
    queries = [(rec_id, q) for (rec_id, _), q in zip(records, questions)]
    samples = build_prefix_dataset(records, queries, cfg["prefix.template"], prompt_detokenize)
    save_prefix_dataset(samples, out_dir / "prefix_data.jsonl")
    print(f"{len(samples)} samples -> {out_dir / 'prefix_data.jsonl'}")


def _cmd_train_prefix(args, cfg: Config, workdir: Path, out_dir: Path) -> None:
    samples = load_prefix_dataset(_resolve(workdir, args.data), template=cfg["prefix.template"])
    provider = TinyCausalLm(seed=cfg["run.seed"])
    adapter = provider.new_adapter(
        r=cfg["prefix.rank"], alpha=cfg["prefix.alpha"], init_seed=cfg["run.seed"]
    )
    provider.attach_adapter(adapter)
    train_cfg = PrefixTrainConfig(
        learning_rate=cfg["prefix.learning_rate"],
        batch_size=cfg["prefix.batch_size"],
        epochs=cfg["prefix.epochs"],
        seed=cfg["run.seed"],
        template=cfg["prefix.template"],
        log_path=str(out_dir / "loss_log.csv"),
    )
    trained = train_prefix_generator(samples, provider, train_cfg)
    save_adapter(trained, out_dir / "adapter.npz")
    print(f"adapter -> {out_dir / 'adapter.npz'}")


def _questions_for(args, count: int, cfg: Config, workdir: Path) -> list[str]:
    if getattr(args, "questions", None):
        questions = _read_lines(_resolve(workdir, args.questions))
        if len(questions) != count:
            raise CodefendError(f"{len(questions)} questions vs {count} items")
        return questions
    single = getattr(args, "question", None) or cfg["eval.caption_prompt"]
    return [single] * count


def _cmd_defend(args, cfg: Config, workdir: Path, out_dir: Path) -> None:
    manifest = load_manifest(_resolve(workdir, args.manifest))
    registry = build_surrogate_registry(
        image_shape=_image_shape(cfg),
        schedule_steps=cfg["purifier.schedule_steps"],
        predictor_width=cfg["purifier.width"],
        victim_target=cfg["victim.target_text"],
        epsilon_ref=cfg["attack.epsilon"],
        seed=cfg["run.seed"],
    )
    defense_cfg = DefenseConfig(
        purifier_checkpoint=str(_resolve(workdir, args.purifier)),
        adapter_checkpoint=str(_resolve(workdir, args.adapter)) if args.adapter else None,
        sampler=_sampler_cfg(cfg),
        decode=_decode_cfg(cfg),
        seed=cfg["run.seed"],
        out_dir=str(out_dir / "purified"),
    )
    questions = _questions_for(args, len(manifest.entries), cfg, workdir)
    results = defend_batch(manifest, questions, defense_cfg, registry)
    write_traces(results, out_dir / "traces.jsonl")
    n_err = sum(1 for _, answer, _ in results if answer is None)
    print(f"{len(results)} items ({n_err} errors) -> {out_dir / 'traces.jsonl'}")


def _cmd_evaluate(args, cfg: Config, workdir: Path, out_dir: Path) -> None:
    manifest = load_manifest(_resolve(workdir, args.manifest))
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    known = {"vanilla", "purified", "defended"}
    unknown = set(methods) - known
    if unknown:
        raise CodefendError(f"unknown methods {sorted(unknown)}; known: {sorted(known)}")
    registry = build_surrogate_registry(
        image_shape=_image_shape(cfg),
        schedule_steps=cfg["purifier.schedule_steps"],
        predictor_width=cfg["purifier.width"],
        victim_target=cfg["victim.target_text"],
        epsilon_ref=cfg["attack.epsilon"],
        seed=cfg["run.seed"],
    )
    victim = registry.resolve("victim_vlm")
    encoder = registry.resolve("vision_encoder")
    needs_purifier = {"purified", "defended"} & set(methods)
    checkpoint = None
    if needs_purifier:
        if not args.purifier:
            raise CodefendError(f"methods {sorted(needs_purifier)} need --purifier")
        checkpoint = load_checkpoint(_resolve(workdir, args.purifier))
    codec = registry.resolve("purifier_codec")
    predictor = registry.resolve("purifier_predictor")
    sampler = _sampler_cfg(cfg)
    questions = _questions_for(args, len(manifest.entries), cfg, workdir)
    golds = _read_lines(_resolve(workdir, args.golds)) if args.golds else None
    if golds is not None and len(golds) != len(manifest.entries):
        raise CodefendError(f"{len(golds)} golds vs {len(manifest.entries)} items")

    defense_cfg = None
    if "defended" in methods:
        defense_cfg = DefenseConfig(
            purifier_checkpoint=str(_resolve(workdir, args.purifier)),
            adapter_checkpoint=str(_resolve(workdir, args.adapter)) if args.adapter else None,
            sampler=sampler,
            decode=_decode_cfg(cfg),
            seed=cfg["run.seed"],
        )

    records: list[EvalRecord] = []
    for method in methods:
        if method == "defended":
            results = defend_batch(manifest, questions, defense_cfg, registry)
            answers = [answer if answer is not None else "" for _, answer, _ in results]
        else:
            answers = []
            for entry, question in zip(manifest.entries, questions):
                pair = manifest.load_pair(entry)
                image = pair.adv
                if method == "purified":
                    image = purify(pair.adv, checkpoint, codec, predictor, sampler)
                answers.append(victim.generate(question, image))
        for i, (entry, answer) in enumerate(zip(manifest.entries, answers)):
            pair = manifest.load_pair(entry)
            records.append(
                EvalRecord(
                    id=f"{pair.clean.id}:{method}",
                    caption_or_answer=answer,
                    clip_score=clip_score(pair.clean, answer, encoder),
                    target_hit=(
                        target_hit(answer, entry.target_text) if entry.target_text else None
                    ),
                    vqa_correct=(vqa_answer_correct(answer, golds[i]) if golds else None),
                    condition=("surrogate-vlm", entry.attack_name, method),
                )
            )
    files = emit_report(records, out_dir)
    print(f"report -> {files['csv']}")


def _cmd_analyze_features(args, cfg: Config, workdir: Path, out_dir: Path) -> None:
    manifest = load_manifest(_resolve(workdir, args.manifest))
    checkpoint = load_checkpoint(_resolve(workdir, args.purifier))
    codec, predictor = _surrogate_purifier(cfg)
    sampler = _sampler_cfg(cfg)
    encoder = SurrogateVisionEncoder(seed=cfg["run.seed"])
    entries = manifest.subset("test").entries or manifest.entries
    rows = []
    for entry in entries:
        pair = manifest.load_pair(entry)
        purified = purify(pair.adv, checkpoint, codec, predictor, sampler)
        rows.append((pair.clean.id, feature_similarity(pair.clean, pair.adv, purified, encoder)))
    write_similarity_dump(rows, out_dir / "similarity.csv")
    write_similarity_plots(rows, out_dir)
    med_po = float(np.median([t.sim_purified_original for _, t in rows]))
    med_pa = float(np.median([t.sim_purified_adversarial for _, t in rows]))
    med_np = float(np.median([t.sim_noise_perturbation for _, t in rows]))
    print(
        f"median purified-vs-original {med_po:.4f}, purified-vs-adversarial {med_pa:.4f}, "
        f"removed-noise-vs-perturbation {med_np:.4f} -> {out_dir / 'similarity.csv'}"
    )


def _cmd_report(args, cfg: Config, workdir: Path, out_dir: Path) -> None:
    cells = parse_report_csv(_resolve(workdir, args.records))
    write_report_csv(cells, out_dir / "report.csv")
    write_report_markdown(cells, out_dir / "report.md")
    print(f"tables -> {out_dir / 'report.csv'}, {out_dir / 'report.md'}")


_HANDLERS = {
    "attack-gen": _cmd_attack_gen,
    "train-purifier": _cmd_train_purifier,
    "optimize-prompts": _cmd_optimize_prompts,
    "build-prefix-data": _cmd_build_prefix_data,
    "train-prefix": _cmd_train_prefix,
    "defend": _cmd_defend,
    "evaluate": _cmd_evaluate,
    "analyze-features": _cmd_analyze_features,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    started = time.perf_counter()
    try:
        cfg = _effective_config(args)
        workdir = Path(args.workdir)
        out_dir = _resolve(workdir, args.out)
        handler = _HANDLERS[args.command]
        out_dir.mkdir(parents=True, exist_ok=True)
        handler(args, cfg, workdir, out_dir)
        _write_run_json(out_dir, args.command, cfg, started)
    except CodefendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
