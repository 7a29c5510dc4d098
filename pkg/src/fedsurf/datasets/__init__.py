"""Bundled survival datasets."""

from importlib import resources

from ..survival import SurvivalDataset, load_csv, load_schema

__all__ = ["load_gbsg2", "builtin_paths"]


def builtin_paths(name: str):
    """Return ``(csv_path, schema_path)`` of a bundled dataset."""
    root = resources.files(__name__)
    csv_path, schema_path = root / f"{name}.csv", root / f"{name}.json"
    if not csv_path.is_file():
        raise ValueError(f"no bundled dataset named {name!r}")
    return csv_path, schema_path


def load_gbsg2() -> SurvivalDataset:
    """German Breast Cancer Study Group 2: 686 patients, recurrence-free survival.

    ``cens`` is the event indicator (1 = recurrence or death observed).
    """
    csv_path, schema_path = builtin_paths("gbsg2")
    return load_csv(csv_path, load_schema(schema_path))
