import json
from pathlib import Path
from typing import Any


def canonical_json(doc: Any) -> str:
    """Sorted keys, two-space indent, trailing newline."""
    return json.dumps(doc, ensure_ascii=False, sort_keys=True, indent=2) + "\n"


def read_text(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


def read_json(path: str) -> Any:
    return json.loads(read_text(path))


def write_text_atomic(path: str, text: str) -> None:
    p = Path(path)
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(p)


def write_json_atomic(path: str, doc: Any) -> None:
    write_text_atomic(path, canonical_json(doc))
