#!/usr/bin/env python3
"""
OmniStack - desk-scale any-to-any omnimodal training and generation

Commands:
    init            write config.json, stages.json and the seeded synthetic corpus
    train           run one stage (--stage) or the whole ladder (--all)
    generate        prompt file -> text / PNG / WAV
    eval            acceptance suites (unit, properties, e2e) -> JSON report
    inspect-vocab   dump the token-name <-> id table

Usage:
    python omnistack.py init --seed 0 --out runs/demo --tiny
    python omnistack.py train --all --out runs/demo
    python omnistack.py generate --prompt-file prompt.json --modality-out image --out runs/demo
    python omnistack.py eval --suite properties

Exit codes: 0 success, 1 eval failure (or unexpected error), 2 usage / config error.
``OMNISTACK_HOME`` overrides the default output root.
"""

import sys
import json
import logging
from pathlib import Path

script_dir = Path(__file__).parent
sys.path.insert(0, str(script_dir))

# Load environment variables from .env
from dotenv import load_dotenv
load_dotenv(script_dir / '.env')

import torch

from config import OmniStackError, RunConfig, UsageError, get_config, tiny_run_config

logging.basicConfig(
    level=get_config().LOG_LEVEL,
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

CONFIG_NAME = 'config.json'
EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def load_run_config(root: Path, config_path: str = None, seed: int = None) -> RunConfig:
    """--config file > <root>/config.json > defaults; --seed overrides either"""
    path = Path(config_path) if config_path else root / CONFIG_NAME
    if path.is_file():
        with open(path, 'r', encoding='utf-8') as f:
            cfg = RunConfig.from_dict(json.load(f))
    elif config_path:
        raise UsageError(f"config file not found: {path}")
    else:
        cfg = RunConfig(budget_scale=get_config().BUDGET_SCALE)
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


def cmd_init(args, root: Path) -> int:
    from corpus_service import Corpus, generate_corpus, missing_keys
    from modality_vocab import dump_tsv, layout_from_config
    from stage_orchestrator import builtin_stages, stages_to_json
    from utils.path_utils import corpus_dir

    if args.config:
        cfg = load_run_config(root, args.config, args.seed)
    else:
        cfg = tiny_run_config(args.seed or 0) if args.tiny else RunConfig(budget_scale=get_config().BUDGET_SCALE)
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate()
    cfg.output_dir = str(root)

    logger.info("=" * 60)
    logger.info(f"Initializing run at {root} (seed {cfg.seed})")
    logger.info("=" * 60)
    try:
        root.mkdir(parents=True, exist_ok=True)
        with open(root / CONFIG_NAME, 'w', encoding='utf-8') as f:
            json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
    except OSError as e:
        raise UsageError(f"cannot write to {root}: {e}") from e

    stages = builtin_stages(cfg.budget_scale, with_text_pretrain=True)
    missing = missing_keys(stages)
    if missing:
        raise UsageError(f"no corpus builder for mixture keys {missing}")
    stages_to_json(stages, root / cfg.stages_file)
    logger.info(f"✓ {len(stages)} stages written to {root / cfg.stages_file}")

    manifest = generate_corpus(cfg, corpus_dir(root), cfg.seed)
    dump_tsv(layout_from_config(cfg.vocab), Corpus(corpus_dir(root)).tokenizer(), root / 'vocab.tsv')
    logger.info(f"✓ Run initialized: {len(manifest)} corpus files")
    return EXIT_OK


def _stages(cfg: RunConfig, root: Path):
    from stage_orchestrator import builtin_stages, stages_from_json
    path = root / cfg.stages_file
    if path.is_file():
        return stages_from_json(path)
    return builtin_stages(cfg.budget_scale, with_text_pretrain=True)


def cmd_train(args, root: Path) -> int:
    from stage_orchestrator import STAGE_ORDER, TEXT_PRETRAIN_ORDER, stage_by_name
    from training_service import TrainingService
    from utils.path_utils import checkpoint_dir

    if bool(args.stage) == bool(args.all):
        raise UsageError("train needs exactly one of --stage NAME or --all")
    cfg = load_run_config(root, args.config, args.seed)
    stages = _stages(cfg, root)
    if args.all:
        order = (TEXT_PRETRAIN_ORDER if args.with_text_pretrain else ()) + STAGE_ORDER
        selected = [stage_by_name(name, stages) for name in order]
    else:
        selected = [stage_by_name(args.stage, stages)]
    if not args.with_text_pretrain:
        # P1 starts from scratch unless a text ladder already ran
        for stage in selected:
            ladder_done = (checkpoint_dir(root, str(stage.requires)) / "manifest.json").is_file()
            if stage.requires in TEXT_PRETRAIN_ORDER and not ladder_done:
                stage.requires = None

    service = TrainingService(cfg, root)
    results = service.run_stages(selected, max_steps=args.steps)
    for result in results:
        logger.info(f"  ✓ {result.name}: {result.steps} steps, {result.tokens} tokens, loss {result.final_loss:.4f}")
    return EXIT_OK


def cmd_generate(args, root: Path) -> int:
    from generation_service import GenerationService, load_prompt

    if not args.prompt_file:
        raise UsageError("generate needs --prompt-file")
    cfg = load_run_config(root, args.config, args.seed)
    service = GenerationService(cfg, root, stage=args.stage)
    output = service.generate(
        load_prompt(Path(args.prompt_file)),
        modality_out=args.modality_out,
        out_dir=Path(args.output) if args.output else None,
        seed=args.seed,
        temperature=args.temperature,
        top_k=args.top_k,
        guidance_scale=args.guidance_scale,
        steps=args.steps,
        strip_think_block=args.strip_think,
    )
    print(output.text)
    for path in output.images + output.audio:
        logger.info(f"  ✓ wrote {path}")
    return EXIT_OK


def cmd_eval(args, root: Path) -> int:
    from eval_service import run_suite

    cfg = load_run_config(root, args.config, args.seed)
    report = run_suite(args.suite, cfg, cfg.seed, root=root if args.suite == 'e2e' else None)
    path = report.save(Path(args.output) if args.output else root / f"eval_{args.suite}.json")
    logger.info(f"Report written to {path}")
    if not report.ok:
        logger.error(f"{len(report.failures)} check(s) failed: {[c.name for c in report.failures]}")
        return EXIT_FAILED
    return EXIT_OK


def cmd_inspect_vocab(args, root: Path) -> int:
    from corpus_service import Corpus
    from modality_vocab import dump_tsv, layout_from_config
    from utils.path_utils import corpus_dir

    cfg = load_run_config(root, args.config, args.seed)
    layout = layout_from_config(cfg.vocab)
    tokenizer = Corpus(corpus_dir(root)).tokenizer() if (corpus_dir(root) / 'tokenizer.json').is_file() else None
    path = dump_tsv(layout, tokenizer, Path(args.output) if args.output else root / 'vocab.tsv')
    print(json.dumps(layout.to_dict(), indent=2))
    logger.info(f"✓ Vocabulary table written to {path}")
    return EXIT_OK


COMMANDS = {
    'init': cmd_init,
    'train': cmd_train,
    'generate': cmd_generate,
    'eval': cmd_eval,
    'inspect-vocab': cmd_inspect_vocab,
}


def build_parser():
    import argparse

    parser = argparse.ArgumentParser(
        description="Desk-scale any-to-any omnimodal stack"
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="Command to run")
    parser.add_argument("--out", default=None,
                        help="Run directory (default: $OMNISTACK_HOME or ./omnistack_runs)")
    parser.add_argument("--config", default=None, help="Run config JSON (default: <out>/config.json)")
    parser.add_argument("--seed", type=int, default=None, help="Seed override")
    parser.add_argument("--tiny", action="store_true", help="init: use the smallest consistent config")
    parser.add_argument("--stage", default=None, help="train: stage to run; generate: checkpoint to load")
    parser.add_argument("--all", action="store_true", help="train: run every stage in order")
    parser.add_argument("--with-text-pretrain", action="store_true",
                        help="train --all: run the T1-T3 text ladder before P1")
    parser.add_argument("--steps", type=int, default=None,
                        help="train: max optimizer steps per stage; generate: decoder sampling steps")
    parser.add_argument("--prompt-file", default=None, help="generate: text or JSON prompt")
    parser.add_argument("--modality-out", choices=('text', 'image', 'audio'), default='text',
                        help="generate: output modality")
    parser.add_argument("--temperature", type=float, default=None, help="generate: sampling temperature")
    parser.add_argument("--top-k", type=int, default=None, help="generate: top-k (0 disables)")
    parser.add_argument("--guidance-scale", type=float, default=None, help="generate: autoguidance scale")
    parser.add_argument("--strip-think", action="store_true", help="generate: drop the think block from the text")
    parser.add_argument("--suite", choices=('unit', 'properties', 'e2e'), default='unit', help="eval: suite")
    parser.add_argument("-o", "--output", default=None,
                        help="generate: output directory; eval / inspect-vocab: output file")
    return parser


def main(argv=None) -> int:
    from utils.path_utils import resolve_output_root

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    settings = get_config()
    torch.set_num_threads(settings.NUM_THREADS)
    root = resolve_output_root(args.out)
    try:
        return COMMANDS[args.command](args, root)
    except OmniStackError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
