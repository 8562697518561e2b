from logging import Logger, LoggerAdapter, getLogger

from pydantic import BaseModel, ConfigDict


class MfleadGlobalState(BaseModel):
    """
    Global runtime state shared across all mflead components.

    This state is modified by `mflead.configure` and read by the simulators, the controller and the
    experiment drivers for logging and metric naming.
    """

    logger: Logger | LoggerAdapter = getLogger("mflead")
    """Logger used for debug messages and error reporting throughout mflead."""

    metrics_prefix: str = "mflead_"
    """Prefix prepended to every prometheus metric name."""

    model_config = ConfigDict(arbitrary_types_allowed=True)


_GLOBAL_STATE = MfleadGlobalState()
