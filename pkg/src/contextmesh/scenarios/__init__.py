"""Packaged example scenarios.

Load one with :func:`contextmesh.scenarios.path`, e.g.
``load_scenario_file(path("icecream"))``.
"""

from importlib import resources


def path(name: str) -> str:
    """Filesystem path of a packaged scenario by short name."""
    ref = resources.files(__name__) / f"{name}.scenario.json"
    if not ref.is_file():
        raise FileNotFoundError(f"no packaged scenario named {name!r}")
    return str(ref)


def names() -> list[str]:
    """Short names of all packaged scenarios."""
    out = []
    for entry in resources.files(__name__).iterdir():
        if entry.name.endswith(".scenario.json"):
            out.append(entry.name[: -len(".scenario.json")])
    return sorted(out)
