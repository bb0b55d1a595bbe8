"""Synthetic target for quickstarts and overhead measurements.

``main`` runs four pipeline stages that mostly sleep, totaling about four
seconds. ``write_declaration`` emits a matching declaration file::

    python -m hiq.demo targets.json
    hiq run --decl targets.json --entry hiq.demo:main
"""

from __future__ import annotations

import json
import sys
import time

STAGES = ("load_input", "preprocess", "run_model", "postprocess")


def load_input():
    time.sleep(1.0)


def preprocess():
    time.sleep(1.0)


def run_model():
    time.sleep(1.0)


def postprocess():
    time.sleep(1.0)


def main():
    load_input()
    preprocess()
    run_model()
    postprocess()


def write_declaration(path: str) -> None:
    entries = [{"name": "main", "module": "hiq.demo", "function": "main", "class": ""}]
    entries += [
        {"name": stage, "module": "hiq.demo", "function": stage, "class": ""}
        for stage in STAGES
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=2)


if __name__ == "__main__":
    write_declaration(sys.argv[1] if len(sys.argv) > 1 else "targets.json")
