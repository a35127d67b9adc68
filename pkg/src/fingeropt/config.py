"""Configuration schema, INI loading, overrides and run-config echoes.

One human-readable INI file with sections [domain], [material], [objective],
[optimizer] and [campaign] drives the CLI; '#' starts a comment. Every key is
listed in SCHEMA with its unit and default; unknown sections or keys are hard
errors. Domain geometry can be given either through generator knobs (slot
sizes, face span fraction) or as explicit segments; the echo written next to
each run always uses the explicit form, and feeding an echo back reproduces
the identical run.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, replace

from .domain import NUM_INPUT_FACES, DomainSpec, EdgeSegment, Rect
from .fem import MaterialParams
from .optimizer import PASSIVE, RunConfig

ENV_PARALLELISM = "FINGEROPT_PARALLELISM"


class ConfigReadError(RuntimeError):
    """Config file missing, unreadable or not parseable as INI."""


class SchemaError(ValueError):
    """Unknown keys or invalid values against the documented schema."""


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    kind: str      # float | int | str | floatlist | rects | spans | span
    unit: str
    default: object
    help: str


SCHEMA: tuple[Key, ...] = (
    Key("domain", "height_mm", "float", "mm", 100.0, "overall finger height"),
    Key("domain", "width_top_mm", "float", "mm", 40.0, "domain width at the base (top)"),
    Key("domain", "width_bottom_mm", "float", "mm", 15.0,
        "domain width at the tip; must be smaller than width_top_mm"),
    Key("domain", "element_size_mm", "float", "mm", 1.25, "square element edge length"),
    Key("domain", "slot_size_mm", "float", "mm", 8.0, "mounting slot edge length"),
    Key("domain", "slot_inset_mm", "float", "mm", 4.0, "slot distance from the side edges"),
    Key("domain", "slot_top_offset_mm", "float", "mm", 8.0, "slot distance below the top edge"),
    Key("domain", "face_span_fraction", "float", "-", 0.78,
        "fraction of the grasping edge (from the tip) covered by the input-face layout"),
    Key("domain", "actuation_x0_fraction", "float", "-", 0.60,
        "actuation face start as a fraction of width_top"),
    Key("domain", "actuation_x1_fraction", "float", "-", 0.90,
        "actuation face end as a fraction of width_top"),
    Key("domain", "slots", "rects", "mm", None,
        "explicit slot rectangles 'x0,y0,x1,y1; x0,y0,x1,y1' (override the slot_* knobs)"),
    Key("domain", "input_faces", "spans", "mm", None,
        "explicit input-face y-spans on the grasping edge 'lo,hi; ...' (6 entries)"),
    Key("domain", "output_face", "span", "mm", None,
        "explicit output-face y-span on the grasping edge 'lo,hi'"),
    Key("domain", "actuation_face", "span", "mm", None,
        "explicit actuation-face x-span on the top edge 'lo,hi'"),
    Key("material", "youngs_modulus_mpa", "float", "MPa", 23.0, "solid Young's modulus"),
    Key("material", "modulus_floor_rel", "float", "-", 1e-4,
        "void stiffness floor as a fraction of the solid modulus"),
    Key("material", "poisson_ratio", "float", "-", 0.4, "Poisson ratio (plane stress)"),
    Key("material", "penalty_exponent", "float", "-", 3.0, "density penalty exponent"),
    Key("material", "thickness_mm", "float", "mm", 5.0, "out-of-plane thickness"),
    Key("objective", "output_weight", "float", "-", 1.0e5,
        "weight on the output displacement term"),
    Key("objective", "force_newtons", "float", "N", 1.0, "total force per input face"),
    Key("optimizer", "formulation", "str", "-", PASSIVE, "passive or active"),
    Key("optimizer", "volume_fraction", "float", "-", 0.35, "material budget in [0.05, 1]"),
    Key("optimizer", "input_displacement_mm", "float", "mm", None,
        "actuation stroke (required for the active formulation)"),
    Key("optimizer", "seed", "int", "-", 0, "initial-field random seed"),
    Key("optimizer", "init_style", "str", "-", "smoothed_noise",
        "initial field: uniform or smoothed_noise"),
    Key("optimizer", "max_iters", "int", "-", 300, "iteration cap"),
    Key("optimizer", "move_limit", "float", "-", 0.2, "per-iteration density move limit"),
    Key("optimizer", "convergence_tol", "float", "-", 0.01,
        "stop when the max density change drops below this"),
    Key("optimizer", "filter_radius_elements", "float", "elements", 2.5,
        "density filter radius"),
    Key("campaign", "volume_fractions", "floatlist", "-", None,
        "swept volume fractions (passive campaigns)"),
    Key("campaign", "input_displacements_mm", "floatlist", "mm", None,
        "swept actuation strokes (active campaigns)"),
    Key("campaign", "seeds_per_point", "int", "-", 10, "seeds per sweep point"),
    Key("campaign", "base_seed", "int", "-", 0, "first seed value"),
    Key("campaign", "parallelism", "int", "-", 0,
        f"worker processes; 0 = automatic ({ENV_PARALLELISM} or CPU count)"),
    Key("campaign", "output_dir", "str", "-", None, "campaign output directory"),
)

_SCHEMA_MAP = {(k.section, k.name): k for k in SCHEMA}


def schema_help() -> str:
    """Every config key with unit and default, for --help output."""
    out = io.StringIO()
    section = None
    for k in SCHEMA:
        if k.section != section:
            section = k.section
            out.write(f"\n[{section}]\n")
        default = "" if k.default is None else f" (default {_format_value(k.default)})"
        out.write(f"  {k.name} [{k.unit}]{default}: {k.help}\n")
    return out.getvalue()


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_pairs(text: str, label: str) -> list[tuple[float, ...]]:
    groups = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        try:
            groups.append(tuple(float(tok) for tok in part.split(",")))
        except ValueError as exc:
            raise SchemaError(f"cannot parse {label}: {part!r}") from exc
    return groups


def _coerce(key: Key, raw: str):
    raw = raw.strip()
    if raw == "":
        return None
    try:
        if key.kind == "float":
            return float(raw)
        if key.kind == "int":
            return int(raw)
        if key.kind == "str":
            return raw
        if key.kind == "floatlist":
            return tuple(float(tok) for tok in raw.replace(";", ",").split(",") if tok.strip())
    except ValueError as exc:
        raise SchemaError(f"{key.section}.{key.name}: cannot parse {raw!r} as {key.kind}") from exc
    if key.kind == "span":
        pairs = _parse_pairs(raw, f"{key.section}.{key.name}")
        if len(pairs) != 1 or len(pairs[0]) != 2:
            raise SchemaError(f"{key.section}.{key.name}: expected 'lo,hi'")
        return pairs[0]
    if key.kind == "spans":
        pairs = _parse_pairs(raw, f"{key.section}.{key.name}")
        if any(len(p) != 2 for p in pairs):
            raise SchemaError(f"{key.section}.{key.name}: expected 'lo,hi; lo,hi; ...'")
        return tuple(pairs)
    if key.kind == "rects":
        pairs = _parse_pairs(raw, f"{key.section}.{key.name}")
        if any(len(p) != 4 for p in pairs):
            raise SchemaError(f"{key.section}.{key.name}: expected 'x0,y0,x1,y1; ...'")
        return tuple(pairs)
    raise SchemaError(f"unhandled kind {key.kind}")


class ConfigValues:
    """Typed key/value store backed by the schema."""

    def __init__(self) -> None:
        self._values = {(k.section, k.name): k.default for k in SCHEMA}

    def set_raw(self, section: str, name: str, raw: str) -> None:
        key = _SCHEMA_MAP.get((section, name))
        if key is None:
            raise SchemaError(f"unknown config key [{section}] {name}")
        self._values[(section, name)] = _coerce(key, raw)

    def get(self, section: str, name: str):
        if (section, name) not in self._values:
            raise SchemaError(f"unknown config key [{section}] {name}")
        return self._values[(section, name)]


def load_config(path: str) -> ConfigValues:
    """Parse an INI config file against the schema."""
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#",)
    )
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigReadError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigReadError(f"cannot parse config {path}: {exc}") from exc

    values = ConfigValues()
    for section in parser.sections():
        if section not in {k.section for k in SCHEMA}:
            raise SchemaError(f"unknown config section [{section}]")
        for name, raw in parser.items(section):
            values.set_raw(section, name, raw)
    return values


def apply_overrides(values: ConfigValues, overrides: list[str]) -> None:
    """Apply 'section.key=value' overrides; unknown keys are hard errors."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise SchemaError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, name = dotted.split(".", 1)
        values.set_raw(section.strip(), name.strip(), raw.strip())


def domain_spec(values: ConfigValues) -> DomainSpec:
    spec = DomainSpec.create(
        height=values.get("domain", "height_mm"),
        width_top=values.get("domain", "width_top_mm"),
        width_bottom=values.get("domain", "width_bottom_mm"),
        element_size=values.get("domain", "element_size_mm"),
        slot_size=values.get("domain", "slot_size_mm"),
        slot_inset=values.get("domain", "slot_inset_mm"),
        slot_top_offset=values.get("domain", "slot_top_offset_mm"),
        face_span_fraction=values.get("domain", "face_span_fraction"),
        actuation_x0_fraction=values.get("domain", "actuation_x0_fraction"),
        actuation_x1_fraction=values.get("domain", "actuation_x1_fraction"),
    )
    slots = values.get("domain", "slots")
    if slots is not None:
        if len(slots) != 2:
            raise SchemaError("domain.slots must list exactly 2 rectangles")
        spec = replace(spec, slot_regions=tuple(Rect(*r) for r in slots))
    faces = values.get("domain", "input_faces")
    if faces is not None:
        if len(faces) != NUM_INPUT_FACES:
            raise SchemaError(f"domain.input_faces must list {NUM_INPUT_FACES} spans")
        spec = replace(
            spec, input_faces=tuple(EdgeSegment("grasping", lo, hi) for lo, hi in faces)
        )
        spec = replace(spec, output_face=spec.input_faces[0])
    out = values.get("domain", "output_face")
    if out is not None:
        spec = replace(spec, output_face=EdgeSegment("grasping", out[0], out[1]))
    act = values.get("domain", "actuation_face")
    if act is not None:
        spec = replace(spec, actuation_face=EdgeSegment("top", act[0], act[1]))
    return spec


def material_params(values: ConfigValues) -> MaterialParams:
    e0 = values.get("material", "youngs_modulus_mpa")
    return MaterialParams(
        E0=e0,
        E_min=e0 * values.get("material", "modulus_floor_rel"),
        nu=values.get("material", "poisson_ratio"),
        penalty_p=values.get("material", "penalty_exponent"),
        thickness=values.get("material", "thickness_mm"),
    )


def run_config(values: ConfigValues) -> RunConfig:
    """RunConfig from typed values; raises SchemaError on contract violations."""
    from .optimizer import ConfigError

    cfg = RunConfig(
        formulation=values.get("optimizer", "formulation"),
        volume_fraction=values.get("optimizer", "volume_fraction"),
        input_displacement=values.get("optimizer", "input_displacement_mm"),
        seed=values.get("optimizer", "seed"),
        init_style=values.get("optimizer", "init_style"),
        max_iters=values.get("optimizer", "max_iters"),
        move_limit=values.get("optimizer", "move_limit"),
        convergence_tol=values.get("optimizer", "convergence_tol"),
        filter_radius=values.get("optimizer", "filter_radius_elements"),
        output_weight=values.get("objective", "output_weight"),
        force_newtons=values.get("objective", "force_newtons"),
        domain=domain_spec(values),
        material=material_params(values),
    )
    try:
        cfg.validate()
    except (ConfigError, ValueError) as exc:
        raise SchemaError(str(exc)) from exc
    return cfg


def resolve_parallelism(values: ConfigValues, cli_value: int | None,
                        overridden: bool) -> int:
    """--override beats the flag, which beats the file, then env, then CPU count."""
    if overridden:
        n = values.get("campaign", "parallelism")
    elif cli_value:
        n = cli_value
    elif values.get("campaign", "parallelism"):
        n = values.get("campaign", "parallelism")
    elif os.environ.get(ENV_PARALLELISM, "").strip():
        try:
            n = int(os.environ[ENV_PARALLELISM])
        except ValueError as exc:
            raise SchemaError(f"{ENV_PARALLELISM} must be an integer") from exc
    else:
        n = os.cpu_count() or 1
    return max(1, int(n))


def echo_run_config(cfg: RunConfig) -> str:
    """Deterministic INI echo of a run configuration (explicit geometry form)."""
    d = cfg.domain
    m = cfg.material
    lines = [
        "# run configuration echo; feed back with: fingeropt optimize --config <this file>",
        "[domain]",
        f"height_mm = {d.height!r}",
        f"width_top_mm = {d.width_top!r}",
        f"width_bottom_mm = {d.width_bottom!r}",
        f"element_size_mm = {d.element_size!r}",
        "slots = " + "; ".join(f"{r.x0!r},{r.y0!r},{r.x1!r},{r.y1!r}" for r in d.slot_regions),
        "input_faces = " + "; ".join(f"{s.lo!r},{s.hi!r}" for s in d.input_faces),
        f"output_face = {d.output_face.lo!r},{d.output_face.hi!r}",
        f"actuation_face = {d.actuation_face.lo!r},{d.actuation_face.hi!r}",
        "",
        "[material]",
        f"youngs_modulus_mpa = {m.E0!r}",
        f"modulus_floor_rel = {m.E_min / m.E0!r}",
        f"poisson_ratio = {m.nu!r}",
        f"penalty_exponent = {m.penalty_p!r}",
        f"thickness_mm = {m.thickness!r}",
        "",
        "[objective]",
        f"output_weight = {cfg.output_weight!r}",
        f"force_newtons = {cfg.force_newtons!r}",
        "",
        "[optimizer]",
        f"formulation = {cfg.formulation}",
        f"volume_fraction = {cfg.volume_fraction!r}",
    ]
    if cfg.input_displacement is not None:
        lines.append(f"input_displacement_mm = {cfg.input_displacement!r}")
    lines += [
        f"seed = {cfg.seed}",
        f"init_style = {cfg.init_style}",
        f"max_iters = {cfg.max_iters}",
        f"move_limit = {cfg.move_limit!r}",
        f"convergence_tol = {cfg.convergence_tol!r}",
        f"filter_radius_elements = {cfg.filter_radius!r}",
    ]
    return "\n".join(lines) + "\n"
