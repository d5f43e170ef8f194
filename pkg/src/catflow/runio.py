"""Run configuration, schema validation, deterministic artifact writing.

Artifacts are canonical JSON (sorted keys, shortest-roundtrip floats) and
CSV with full-precision "%r" floats; identical (config, seed) pairs produce
byte-identical files.  No wall-clock data enters any artifact.  Every
artifact embeds the package version and the resolved-config hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import zlib
from importlib import resources

import numpy as np

SCHEMA_NAMES = (
    "runconfig.schema.json",
    "target_point.schema.json",
    "discrete_map.schema.json",
)


class ConfigError(ValueError):
    """Configuration failed schema validation; message names the field."""


def package_version() -> str:
    from importlib.metadata import version
    try:
        return version("catflow")
    except Exception:
        return "0.0.0+local"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=True)


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def stamp(config: dict) -> dict:
    return {"code_version": package_version(), "config_hash": config_hash(config)}


def write_json(path, obj, config: dict = None) -> None:
    out = dict(obj)
    if config is not None:
        out["provenance"] = stamp(config)
    with open(path, "w", encoding="utf-8") as f:
        f.write(canonical_json(out))
        f.write("\n")


def fmt_float(x) -> str:
    return repr(float(x))


def write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(fmt_float(v) if isinstance(v, (float, np.floating))
                             else str(v) for v in row) + "\n")


def read_csv(path):
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        rows = [line.strip().split(",") for line in f if line.strip()]
    return header, rows


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Per-module child generator: one run seed split by fixed labels."""
    key = zlib.crc32(label.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=(key,))
    return np.random.default_rng(ss)


def load_schema(name: str) -> dict:
    with resources.files("catflow.schemas").joinpath(name).open(
            encoding="utf-8") as f:
        return json.load(f)


def validate_config(config: dict) -> dict:
    """Validate against the shipped RunConfig schema plus the numeric rules
    the schema cannot express; raises ConfigError naming the field path."""
    import jsonschema

    schema = load_schema("runconfig.schema.json")
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        path = ".".join(str(p) for p in e.path) or "(root)"
        raise ConfigError(f"config field {path!r}: {e.message}")
    rho = config.get("rho")
    if rho is not None and not (0.0 < rho < np.pi / 4):
        raise ConfigError(f"config field 'rho': {rho} outside (0, pi/4)")
    return config


# ---------------------------------------------------------------------------
# Mesh / map file formats
# ---------------------------------------------------------------------------

def write_mesh_off(path, mesh) -> None:
    """OFF-style text plus a JSON sidecar with {kind, level, periods}."""
    v = mesh.vertices
    with open(path, "w", encoding="utf-8") as f:
        f.write("OFF\n")
        f.write(f"{len(v)} {len(mesh.triangles)} {len(mesh.edges)}\n")
        for row in v:
            f.write(" ".join(fmt_float(x) for x in row) + "\n")
        for t in mesh.triangles:
            f.write("3 " + " ".join(str(int(i)) for i in t) + "\n")
    write_json(str(path) + ".json", mesh.sidecar())


def parse_mesh_spec(spec: str):
    """'torus:3', 'sphere:2', or 'patch:33'."""
    from .mesh import build_mesh, build_patch_mesh

    kind, _, arg = spec.partition(":")
    if kind in ("torus", "sphere"):
        return build_mesh(kind, int(arg or 3))
    if kind == "patch":
        return build_patch_mesh(int(arg or 33))
    raise ConfigError(f"config field 'mesh': unknown spec {spec!r}")


def parse_target_spec(spec: str, rho: float):
    """'sphere', 'book:3', or 'cone:2.5pi' / 'cone:7.853981...'."""
    from .targets import make_space

    kind, _, arg = spec.partition(":")
    if kind == "sphere":
        return make_space("sphere", rho=rho)
    if kind == "book":
        return make_space("book", rho=rho, pages=int(arg or 3))
    if kind == "cone":
        if arg.endswith("pi"):
            angle = float(arg[:-2] or "2") * np.pi
        else:
            angle = float(arg or 2 * np.pi)
        return make_space("cone", rho=rho, angle=angle)
    raise ConfigError(f"config field 'target': unknown spec {spec!r}")


def parse_point_record(space, rec: dict):
    from .targets import PointArray

    charts = np.array([int(rec.get("chart", 0))], dtype=np.int64)
    coords = np.asarray([rec["coordinates"]], dtype=float)
    arr = PointArray(charts, coords)
    space.validate(arr)
    return space.canonicalize(arr).point(0)


def ensure_outdir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path
