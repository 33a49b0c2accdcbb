"""Flat key = value text with repeated [block] sections.

Grammar: one `key = value` pair per line; `#` starts a comment line; a line
`[name]` opens a block, and every following pair belongs to that block
until the next block header. Pairs before the first header are top-level.
Top-level keys must be unique; blocks may repeat (that is their point).
"""

from typing import Dict, List, Tuple

__all__ = ["parse_kv_text", "format_kv_text"]


def parse_kv_text(text: str) -> Tuple[Dict[str, str], List[Tuple[str, Dict[str, str]]]]:
    top: Dict[str, str] = {}
    blocks: List[Tuple[str, Dict[str, str]]] = []
    current = top
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ValueError(f"line {lineno}: empty block header")
            current = {}
            blocks.append((name, current))
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if current is top and key in top:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        current[key] = value
    return top, blocks


def format_kv_text(top: Dict[str, str], blocks=()) -> str:
    lines = [f"{k} = {v}" for k, v in top.items()]
    for name, pairs in blocks:
        lines.append("")
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in pairs.items())
    return "\n".join(lines) + "\n"
