"""Run configuration: one plain-text file configures every stage.

The file uses ini syntax with sections [ekf], [slam], [loop], [tsdf]
and [mesher]; each key matches a field of the corresponding parameter
dataclass and missing keys keep their defaults. Three shipped presets
(newer_college, summit, scout) encode the tuning used on the three
reference sensor setups and can be named in place of a config path.

Two historical voxel-fusion switches, use_free_space and allow_clear,
are accepted in [tsdf] for preset compatibility but only with value
false; enabling either is rejected as unsupported.
"""

import configparser
import os
import types
import typing
from dataclasses import dataclass, fields
from importlib import resources

from .ekf import EkfParams
from .errors import StageError
from .pose_graph import LoopParams
from .scan_matcher import MatcherParams
from .tsdf import TsdfParams


@dataclass(frozen=True)
class MesherParams:
    export_every: int = 0      # re-export the mesh every N frames; 0 = end


@dataclass(frozen=True)
class PipelineConfig:
    ekf: EkfParams = EkfParams()
    slam: MatcherParams = MatcherParams()
    loop: LoopParams = LoopParams()
    tsdf: TsdfParams = TsdfParams()
    mesher: MesherParams = MesherParams()


_SECTIONS = {
    "ekf": EkfParams,
    "slam": MatcherParams,
    "loop": LoopParams,
    "tsdf": TsdfParams,
    "mesher": MesherParams,
}

# accepted for preset compatibility; only "false" is supported
_REJECT_IF_TRUE = {("tsdf", "use_free_space"), ("tsdf", "allow_clear")}

_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False,
               "yes": True, "no": False, "on": True, "off": False}


def _parse_bool(raw, where):
    try:
        return _BOOL_WORDS[raw.strip().lower()]
    except KeyError:
        raise StageError("config", f"{where}: expected a boolean, "
                                   f"got {raw!r}") from None


def _convert(raw, annotation, where):
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation)
                if a is not type(None)]
        if raw.strip().lower() in ("none", ""):
            return None
        return _convert(raw, args[0], where)
    try:
        if annotation is bool:
            return _parse_bool(raw, where)
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise StageError(
            "config", f"{where}: expected {annotation.__name__}, "
                      f"got {raw!r}") from None


def load_config(path):
    """Parse a config file into a PipelineConfig."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise StageError("config", f"config file not found: {path}")
    built = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise StageError("config", f"unknown section [{section}]")
        cls = _SECTIONS[section]
        hints = typing.get_type_hints(cls)
        known = {f.name: hints[f.name] for f in fields(cls)}
        values = {}
        for key, raw in parser.items(section):
            where = f"[{section}] {key}"
            if (section, key) in _REJECT_IF_TRUE:
                if _parse_bool(raw, where):
                    raise StageError(
                        "config", f"{where} = true is not supported")
                continue
            if key not in known:
                raise StageError("config", f"unknown key {where}")
            values[key] = _convert(raw, known[key], where)
        try:
            built[section] = cls(**values)
        except ValueError as exc:
            raise StageError("config", f"[{section}]: {exc}") from None
    return PipelineConfig(**built)


def preset_names():
    root = resources.files("lidarmesh") / "presets"
    return sorted(p.name[:-len(".cfg")] for p in root.iterdir()
                  if p.name.endswith(".cfg"))


def resolve_config(name_or_path):
    """Config from an explicit path, a shipped preset name, or None
    (all defaults)."""
    if name_or_path is None:
        return PipelineConfig()
    if os.path.exists(name_or_path):
        return load_config(name_or_path)
    preset = resources.files("lidarmesh") / "presets" \
        / f"{name_or_path}.cfg"
    if preset.is_file():
        with resources.as_file(preset) as real:
            return load_config(real)
    raise StageError(
        "config", f"{name_or_path!r} is neither a file nor one of the "
                  f"presets {', '.join(preset_names())}")
