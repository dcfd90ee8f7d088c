#!/usr/bin/env python3
"""
Script to convert saved evaluation reports (line-delimited JSON) to HTML.
Loads one or more report files and generates a single HTML page using the same
formatting as the eval command.
"""

import json
import os
import sys

from modules.evaluation import load_report_jsonl, save_report_html


def main(paths=None) -> bool:
    """Main function to convert report files to HTML."""
    paths = paths if paths is not None else sys.argv[1:]
    if not paths:
        paths = [input("Введите путь к файлу отчёта (.jsonl): ").strip()]

    reports = []
    for path in paths:
        if not os.path.exists(path):
            print(f"Ошибка: Файл {path} не найден!")
            return False
        try:
            print(f"Загрузка отчёта из {path}...")
            report = load_report_jsonl(path)
            print(f"Задача: {report.task}, стратегия: {report.strategy}, клипов: {len(report.predictions)}")
            reports.append(report)
        except json.JSONDecodeError as e:
            print(f"Ошибка при чтении JSON файла: {e}")
            return False
        except Exception as e:
            print(f"Ошибка при загрузке файла: {e}")
            return False

    html_file_path = os.path.splitext(paths[0])[0] + ".html"
    try:
        print("Генерация HTML файла...")
        save_report_html(reports, html_file_path)
        print(f"HTML сохранен: {html_file_path}")
        return True
    except Exception as e:
        print(f"Ошибка при генерации HTML: {e}")
        return False


if __name__ == "__main__":
    success = main()
    if not success:
        sys.exit(1)

    print("\nГотово! HTML файл успешно создан.")
