"""
Utility functions for reading and writing JSONL / JSON artifacts.
"""

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator


def read_jsonl(path) -> Iterator[Dict[str, Any]]:
    """Read JSONL file line by line, skipping blank lines"""
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if line.strip():
                yield json.loads(line)


def dumps_line(row: Dict[str, Any]) -> str:
    return json.dumps(row, ensure_ascii=False, separators=(', ', ': '))


def write_jsonl(path, rows: Iterable[Dict[str, Any]]) -> int:
    """Write rows to JSONL file; returns the number of rows written"""
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    count = 0
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for row in rows:
            f.write(dumps_line(row) + '\n')
            count += 1
    return count


def write_json(path, payload: Any) -> None:
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + '\n')


def read_json(path) -> Any:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 16), b''):
            digest.update(block)
    return digest.hexdigest()
