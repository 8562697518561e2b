from pathlib import Path
from typing import Any

from mflead.config import ExperimentConfig


def small_config(name: str, out_dir: str | Path, **sections: dict[str, Any]) -> ExperimentConfig:
    """
    Builtin config shrunk to a coarse grid and a short horizon so a full run takes seconds.

    Keyword arguments update the named top-level sections of the JSON, e.g. ``time={"T": 0.5}``.
    """
    data = ExperimentConfig.builtin(name).model_dump(mode="json")
    data["grid"].update({"n_x": 32, "n_lambda": 16})
    data["time"].update({"T": 0.2, "dt_max": 0.02, "snapshot_times": [0.1, 0.2], "output_cadence": 0.1})
    data["particle"].update({"n_agents": [20, 40, 80], "seeds": [0, 1, 2, 3, 4], "dt": 0.05, "workers": 1})
    data["checks"].update({"probe_time": 0.2})
    data["audit"].update({"n_samples": 200, "n_atoms": 4})
    data["mpc"].update({"max_iters": 20})
    data["outputs"]["directory"] = str(out_dir)
    for section, update in sections.items():
        if isinstance(data.get(section), dict):
            data[section].update(update)
        else:
            data[section] = update
    return ExperimentConfig.loads(data)
