"""Text MANIFEST: environment, active and target configs, level table and run table.

Format, one record per line::

    env N E B M min_buffer
    active T policy M_b M_f M_c
    target T policy M_b M_f M_c
    state next_id epoch seed
    level <index> <capacity> <epoch>
    run <id> <level> <entries> <blocks> <epoch>

Runs are listed newest first within a level.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..analytic import Environment, LsmConfig, Policy
from .storage import StorageError


def _cfg_line(tag: str, c: LsmConfig) -> str:
    return f"{tag} {c.T} {c.policy.value} {float(c.M_b)!r} {float(c.M_f)!r} {float(c.M_c)!r}"


def _parse_cfg(parts) -> LsmConfig:
    return LsmConfig(T=int(parts[1]), policy=Policy(parts[2]), M_b=float(parts[3]),
                     M_f=float(parts[4]), M_c=float(parts[5]))


def write_manifest(tree) -> None:
    e = tree.env
    lines = [
        f"env {e.N} {e.E} {e.B} {float(e.M)!r} {float(e.min_buffer)!r}",
        _cfg_line("active", tree.active),
        _cfg_line("target", tree.target),
        f"state {tree.next_id} {tree.epoch} {tree.seed}",
    ]
    for i, runs in enumerate(tree.levels):
        lines.append(f"level {i + 1} {float(tree.caps[i])!r} {tree.level_epoch[i]}")
        for r in runs:
            lines.append(f"run {r.run_id} {r.level} {r.n} {r.n_blocks} {r.epoch}")
    tmp = tree.path / "MANIFEST.tmp"
    try:
        tmp.write_text("\n".join(lines) + "\n")
        tmp.replace(tree.path / "MANIFEST")
    except OSError as exc:
        raise StorageError(str(exc)) from exc


def recover(cls, env: Environment, path: Path, device=None):
    """Rebuild a tree from ``path/MANIFEST``; the stored environment wins over ``env``."""
    from .tree import Run

    text = (path / "MANIFEST").read_text().split("\n")
    rows = [ln.split() for ln in text if ln.strip()]
    by_tag: dict[str, list] = {}
    for parts in rows:
        by_tag.setdefault(parts[0], []).append(parts)
    try:
        ev = by_tag["env"][0]
        stored = Environment(N=int(ev[1]), E=int(ev[2]), B=int(ev[3]), M=float(ev[4]),
                             min_buffer=float(ev[5]))
        active = _parse_cfg(by_tag["active"][0])
        target = _parse_cfg(by_tag["target"][0])
        st = by_tag["state"][0]
    except (KeyError, IndexError, ValueError) as exc:
        raise StorageError(f"corrupt MANIFEST in {path}: {exc}") from exc
    if (stored.E, stored.B) != (env.E, env.B):
        raise StorageError("MANIFEST entry or block size differs from the requested environment")
    tree = cls(stored, active, path, seed=int(st[3]), device=device)
    tree.target = target
    tree.next_id = int(st[1])
    tree.epoch = int(st[2])
    tree.cache.resize(target.M_c // tree.block_bytes)
    for parts in by_tag.get("level", []):
        tree.levels.append([])
        tree.caps.append(float(parts[2]))
        tree.level_epoch.append(int(parts[3]))
    for parts in by_tag.get("run", []):
        run_id, level, n, n_blocks, epoch = (int(x) for x in parts[1:6])
        bloom = tree.store.read_filter(run_id, level)
        fences = []
        last = 0
        for b in range(n_blocks):
            keys, _, _ = tree.store.read_block(run_id, level, b)
            fences.append(keys[0])
            last = keys[-1]
        tree.levels[level - 1].append(Run(run_id, level, n, fences, fences[0], last, bloom, epoch, n_blocks))
        tree._entries += n
    tree.store.fetches = 0
    return tree
