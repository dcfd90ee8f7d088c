#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
JMLA desk-scale pipeline: audio MAE, perceiver resamplers and gated
cross-attention into a frozen byte-level decoder, with zero-shot tagging.
"""

import argparse
import os
import sys

# Add current directory to path for imports
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from config.settings import Config
from modules.pipeline import PipelineManager

COMMANDS = {
    "pretrain-text": "pretrain_text",
    "pretrain-mae": "pretrain_mae",
    "train": "train_jmla",
    "eval": "evaluate",
    "bench": "bench",
    "gradcheck": "gradcheck",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jmla", description="JMLA audio-language pipeline")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", help="файл конфигурации key = value")
        sub.add_argument("--seed", type=int, help="переопределяет run.seed")
        sub.add_argument("--out", help="переопределяет run.output_directory")
        if name == "eval":
            sub.add_argument("--wav", help="оценить один моно WAV-файл")
    return parser


def main(argv=None) -> bool:
    """Main function: parse the command, load configuration, run one stage."""
    args = build_parser().parse_args(argv)
    print("=== JMLA ===")
    print(f"Команда: {args.command}\n")

    try:
        overrides = {}
        if args.seed is not None:
            overrides["run.seed"] = str(args.seed)
        if args.out:
            overrides["run.output_directory"] = args.out

        print("Загрузка конфигурации...")
        config = Config(args.config, overrides)
        config.print_config_summary()

        manager = PipelineManager(config)
        if args.command == "eval":
            success = manager.evaluate(args.wav)
        else:
            success = getattr(manager, COMMANDS[args.command])()

        if success:
            print("\n🎉 Команда завершена успешно!")
            print(f"Результаты сохранены в директории: {config.run.output_directory}")
        else:
            print("\n⚠️ Команда завершилась с ошибками.")
        return success

    except KeyboardInterrupt:
        print("\n❌ Операция прервана пользователем.")
        return False
    except Exception as e:
        print(f"\n❌ Критическая ошибка: {e}")
        return False


if __name__ == "__main__":
    if not main():
        sys.exit(1)
