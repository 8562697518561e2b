import json
from collections.abc import Iterable
from pathlib import Path
from typing import Any

import pandas as pd

from mflead._internal.state import _GLOBAL_STATE


class ArtifactWriter:
    """
    Writes run artifacts under one output directory and keeps the manifest entries for them.

    Every artifact is recorded with the config hash that produced it and, when given, the figure of
    the model description it reproduces. Formats missing from `formats` are skipped; the manifest is
    always written.
    """

    def __init__(self, out_dir: str | Path, config_hash: str, formats: Iterable[str] = ("csv", "json")):
        self.out_dir = Path(out_dir)
        self.config_hash = config_hash
        self.formats = frozenset(formats)
        self.entries: list[dict[str, Any]] = []
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def _record(self, path: Path, kind: str, figure: str | None, description: str | None) -> None:
        entry: dict[str, Any] = {
            "file": path.relative_to(self.out_dir).as_posix(),
            "kind": kind,
            "config_hash": self.config_hash,
        }
        if figure is not None:
            entry["figure"] = figure
        if description is not None:
            entry["description"] = description
        self.entries.append(entry)
        _GLOBAL_STATE.logger.info("Wrote %s", path)

    def write_frame(
        self, name: str, frame: pd.DataFrame, figure: str | None = None, description: str | None = None
    ) -> Path | None:
        if "csv" not in self.formats:
            return None
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format="%.12g")
        self._record(path, "csv", figure, description)
        return path

    def write_json(
        self, name: str, payload: Any, figure: str | None = None, description: str | None = None
    ) -> Path | None:
        if "json" not in self.formats:
            return None
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_to_jsonable) + "\n")
        self._record(path, "json", figure, description)
        return path

    def write_manifest(self, extra: dict[str, Any] | None = None) -> Path:
        manifest = {"config_hash": self.config_hash, "artifacts": self.entries, **(extra or {})}
        path = self.out_dir / "MANIFEST.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_to_jsonable) + "\n")
        _GLOBAL_STATE.logger.info("Wrote manifest with %d artifacts to %s", len(self.entries), path)
        return path


def _to_jsonable(value: Any) -> Any:
    # numpy scalars and arrays
    if hasattr(value, "tolist"):
        return value.tolist()
    if hasattr(value, "model_dump"):
        return value.model_dump(mode="json")
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
