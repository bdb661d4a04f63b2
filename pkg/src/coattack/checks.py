"""Static guarantees about module boundaries.

Adversarial examples must be craftable without any victim in sight, so
the transitive import closure of the attack entry points is scanned and
asserted to contain neither the victim nor the evaluation module.
"""

from __future__ import annotations

import ast
from pathlib import Path

PACKAGE = "coattack"
ATTACK_ENTRY_MODULES = ("orchestrator", "image_attack", "text_attack")
FORBIDDEN_MODULES = ("victims", "evaluation")


class IndependenceError(AssertionError):
    pass


def _local_imports(module: str, root: Path) -> set[str]:
    tree = ast.parse((root / f"{module}.py").read_text(encoding="utf-8"))
    found: set[str] = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            if node.level == 1 and node.module:
                found.add(node.module.split(".")[0])
            elif node.module and node.module.startswith(f"{PACKAGE}."):
                found.add(node.module.split(".")[1])
        elif isinstance(node, ast.Import):
            for alias in node.names:
                if alias.name.startswith(f"{PACKAGE}."):
                    found.add(alias.name.split(".")[1])
    return {m for m in found if (root / f"{m}.py").exists()}


def attack_import_closure() -> set[str]:
    root = Path(__file__).resolve().parent
    seen: set[str] = set()
    frontier = list(ATTACK_ENTRY_MODULES)
    while frontier:
        module = frontier.pop()
        if module in seen:
            continue
        seen.add(module)
        frontier.extend(_local_imports(module, root) - seen)
    return seen


def assert_victim_independence() -> None:
    """Raise if any attack code path could reference a victim interface."""
    closure = attack_import_closure()
    leaked = sorted(closure & set(FORBIDDEN_MODULES))
    if leaked:
        raise IndependenceError(
            f"attack modules transitively import victim-side modules: {leaked}"
        )
