"""Run configuration: JSON document plus dotted command-line overrides.

One JSON file drives every subcommand.  Sections:

- ``geometry``: quarter-plate parameters and the boundary traction
- ``material``: the twelve constitutive parameters; ``b_kin`` has no
  published value for this parameter set and must therefore be given
  explicitly
- ``solver``: Newton / arc-length controls (see ``SolverConfig``)
- ``reduction``: ``method`` in {fom, dpod, ddeim, decsw} plus the
  method's knobs (``m_u``/``m_d``, ``k_u``/``k_d``, ``tau``)
- ``paths``: ``output_dir``, optional ``snapshot_dir`` (where a previous
  full-order run left its snapshot files) and ``reference_record`` (the
  CSV to compare reduced runs against)
- ``optimize``: target limit load, width bracket and tolerance
- ``seed``: RNG seed for any randomized test utilities
- ``figures``: whether run commands render figure files (default true)

Overrides use dotted keys, e.g. ``--solver.max_steps=50`` or
``--reduction.tau=1e-3``; values are parsed as JSON with a string
fallback.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

from .fom import SolverConfig
from .material import MaterialParams


class ConfigError(ValueError):
    """Malformed or incomplete run configuration."""


REDUCTION_METHODS = ("fom", "dpod", "ddeim", "decsw")


@dataclass
class GeometryConfig:
    width_b: float = 5.0
    hole_radius: float = 2.0
    height: float = 5.0
    nx: int = 16
    ny: int = 16
    thickness: float = 1.0
    traction: float = 500.0  # reference boundary traction [MPa]
    arc_bias: float = 1.0  # angular grading toward the ligament


@dataclass
class ReductionConfig:
    method: str = "fom"
    m_u: int | None = None
    m_d: int | None = None
    k_u: int | None = None
    k_d: int | None = None
    tau: float | None = None

    def validate(self) -> None:
        if self.method not in REDUCTION_METHODS:
            raise ConfigError(f"unknown reduction method '{self.method}'")
        needs_basis = self.method in ("dpod", "ddeim", "decsw")
        if needs_basis and (self.m_u is None or self.m_d is None):
            raise ConfigError(f"method '{self.method}' requires reduction.m_u and reduction.m_d")
        if self.method == "ddeim" and (self.k_u is None or self.k_d is None):
            raise ConfigError("method 'ddeim' requires reduction.k_u and reduction.k_d")
        if self.method == "decsw" and self.tau is None:
            raise ConfigError("method 'decsw' requires reduction.tau")


@dataclass
class OptimizeConfig:
    target_limit_load: float = 0.0
    bracket_lo: float = 0.0
    bracket_hi: float = 0.0
    tol_width: float = 1e-3
    max_iterations: int = 40

    def validate(self) -> None:
        if not self.bracket_lo < self.bracket_hi:
            raise ConfigError("optimize.bracket_lo must be below optimize.bracket_hi")
        if self.target_limit_load <= 0.0:
            raise ConfigError("optimize.target_limit_load must be positive")


@dataclass
class CompareConfig:
    reference_record: str = ""
    candidate_record: str = ""
    reference_summary: str | None = None
    candidate_summary: str | None = None
    n_samples: int = 1000

    def validate(self) -> None:
        if not self.reference_record or not self.candidate_record:
            raise ConfigError("compare requires compare.reference_record and compare.candidate_record")


@dataclass
class RunConfig:
    geometry: GeometryConfig
    material: MaterialParams
    solver: SolverConfig
    reduction: ReductionConfig
    output_dir: str = "out"
    snapshot_dir: str | None = None
    artifact_dir: str | None = None
    reference_record: str | None = None
    reference_summary: str | None = None
    optimize: OptimizeConfig | None = None
    compare: CompareConfig | None = None
    seed: int = 0
    figures: bool = True
    raw: dict = dc_field(default_factory=dict)


def _apply_overrides(doc: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"override '{item}' must look like --section.key=value")
        key, _, value = item[2:].partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{key}' descends into a non-object")
        node[parts[-1]] = parsed
    return doc


def _build_section(cls, data: dict, section: str):
    fields = {f.name for f in cls.__dataclass_fields__.values()} if hasattr(cls, "__dataclass_fields__") else set()
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in section '{section}'")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


def parse_config(doc: dict) -> RunConfig:
    doc = dict(doc)
    material_doc = dict(doc.get("material", {}))
    if "b_kin" not in material_doc:
        raise ConfigError(
            "material.b_kin must be set explicitly (no published value exists "
            "for this parameter set; see README)"
        )
    geometry = _build_section(GeometryConfig, doc.get("geometry", {}), "geometry")
    material = _build_section(MaterialParams, material_doc, "material")
    solver = _build_section(SolverConfig, doc.get("solver", {}), "solver")
    reduction = _build_section(ReductionConfig, doc.get("reduction", {}), "reduction")
    reduction.validate()
    paths = doc.get("paths", {})
    optimize_cfg = None
    if "optimize" in doc:
        optimize_cfg = _build_section(OptimizeConfig, doc["optimize"], "optimize")
    compare_cfg = None
    if "compare" in doc:
        compare_cfg = _build_section(CompareConfig, doc["compare"], "compare")
    return RunConfig(
        geometry=geometry,
        material=material,
        solver=solver,
        reduction=reduction,
        output_dir=str(paths.get("output_dir", "out")),
        snapshot_dir=paths.get("snapshot_dir"),
        artifact_dir=paths.get("artifact_dir"),
        reference_record=paths.get("reference_record"),
        reference_summary=paths.get("reference_summary"),
        optimize=optimize_cfg,
        compare=compare_cfg,
        seed=int(doc.get("seed", 0)),
        figures=bool(doc.get("figures", True)),
        raw=doc,
    )


def load_config(path: str, overrides: list[str] | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config '{path}': {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config '{path}' is not valid JSON: {exc}") from exc
    if overrides:
        doc = _apply_overrides(doc, list(overrides))
    return parse_config(doc)
