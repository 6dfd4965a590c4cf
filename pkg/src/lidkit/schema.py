"""JSON schemas for every JSON document the toolkit writes."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

SCHEMA_NAMES = (
    "metric_report", "backend_model", "fusion_model", "augment_plan",
    "pipeline_manifest", "pipeline_report", "fewshot", "gradcheck", "outputs",
)


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    if name not in SCHEMA_NAMES:
        raise KeyError(f"no schema named {name!r}")
    text = resources.files("lidkit").joinpath("schemas", f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


def _registry():
    from referencing import Registry, Resource

    return Registry().with_resources(
        (f"{n}.json", Resource.from_contents(load_schema(n))) for n in SCHEMA_NAMES
    )


def validate(obj, name: str) -> None:
    """Raise ``jsonschema.ValidationError`` if ``obj`` does not match schema ``name``."""
    import jsonschema

    cls = jsonschema.validators.validator_for(load_schema(name))
    cls(load_schema(name), registry=_registry()).validate(obj)
