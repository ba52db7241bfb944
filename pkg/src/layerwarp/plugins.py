"""Backend plugin discovery.

Every ``*.py`` file found in the directories listed (``os.pathsep``-separated)
in ``LAYERWARP_PLUGIN_PATH`` is imported once. A plugin module exposes
``register(registry)``, where ``registry`` has ``perceptual`` (name ->
backend factory) and ``aesthetics`` (name -> scorer factory) dicts.
"""
from __future__ import annotations

import importlib.util
import logging
import os
from pathlib import Path
from types import SimpleNamespace

ENV_VAR = "LAYERWARP_PLUGIN_PATH"

logger = logging.getLogger(__name__)

AESTHETICS = {}
_loaded: set[str] = set()


def registry():
    from .losses import BACKENDS

    return SimpleNamespace(perceptual=BACKENDS, aesthetics=AESTHETICS)


def load_plugins(path_list: str | None = None) -> list[str]:
    raw = os.environ.get(ENV_VAR, "") if path_list is None else path_list
    loaded = []
    for entry in filter(None, raw.split(os.pathsep)):
        root = Path(entry)
        files = sorted(root.glob("*.py")) if root.is_dir() else [root]
        for f in files:
            key = str(f.resolve())
            if key in _loaded or not f.exists():
                continue
            spec = importlib.util.spec_from_file_location(f"layerwarp_plugin_{f.stem}", f)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            if hasattr(module, "register"):
                module.register(registry())
            _loaded.add(key)
            loaded.append(key)
            logger.debug("loaded plugin %s", f)
    return loaded


def get_aesthetics(name):
    from .losses import AestheticsSlot

    load_plugins()
    factory = AESTHETICS.get(name)
    return factory() if factory else AestheticsSlot(name)
