from prometheus_client import Counter, Histogram

from mflead._internal.state import _GLOBAL_STATE


class SimMetrics:
    """Centralized Prometheus metrics for mflead."""

    _initialized: bool = False

    # Counters
    FV_STEP_COUNTER: Counter
    PARTICLE_STEP_COUNTER: Counter
    MPC_SOLVE_COUNTER: Counter
    VALIDATION_COUNTER: Counter

    # Histograms
    MPC_ITERATIONS: Histogram
    STEP_TIMER: Histogram

    @classmethod
    def initialize(cls, prefix: str | None = None) -> None:
        """Initialize all metrics with the given prefix. Only initializes once."""
        if cls._initialized:
            return
        if prefix is None:
            prefix = _GLOBAL_STATE.metrics_prefix

        cls.FV_STEP_COUNTER = Counter(
            name=prefix + "fv_step_counter",
            documentation="Finite-volume steps taken",
        )

        cls.PARTICLE_STEP_COUNTER = Counter(
            name=prefix + "particle_step_counter",
            labelnames=["scheme"],
            documentation="Particle steps taken",
        )

        cls.MPC_SOLVE_COUNTER = Counter(
            name=prefix + "mpc_solve_counter",
            labelnames=["backend", "converged"],
            documentation="MPC step solves",
        )

        cls.VALIDATION_COUNTER = Counter(
            name=prefix + "validation_counter",
            labelnames=["check", "result"],
            documentation="Validation checks run",
        )

        cls.MPC_ITERATIONS = Histogram(
            name=prefix + "mpc_iterations",
            labelnames=["backend"],
            documentation="Projected-gradient iterations per MPC solve",
            buckets=[1, 2, 3, 5, 10, 20, 50, 100, 200],
        )

        cls.STEP_TIMER = Histogram(
            name=prefix + "step_timer",
            labelnames=["backend"],
            documentation="Wall time per simulation step",
            buckets=[0.0001, 0.001] + list(Histogram.DEFAULT_BUCKETS),
        )

        cls._initialized = True
