class MfleadError(Exception):
    pass


class InvalidState(MfleadError):
    def __init__(self, detail: str):
        super().__init__(f"Invalid agent state: {detail}")


class EmptyEnsemble(MfleadError):
    def __init__(self) -> None:
        super().__init__("An empirical ensemble needs at least one agent.")


class ZeroMass(MfleadError):
    def __init__(self) -> None:
        super().__init__("Density vanishes on every admissible cell center; cannot normalize.")


class ModelNotFinalized(MfleadError):
    def __init__(self, what: str):
        super().__init__(f"Model is not finalized: {what} must be resolved before evaluation.")


class NegativeRate(MfleadError):
    def __init__(self, name: str, value: float):
        super().__init__(f"Transition rate {name} evaluated to {value:.6g} < 0 (check base rates and normalizers).")


class DegenerateFollowerMass(MfleadError):
    def __init__(self, mass: float):
        super().__init__(f"Follower mass {mass:.3g} is too small for the barycenter term of the Lagrangian.")


class SimplexOvershoot(MfleadError):
    def __init__(self, overshoot: float, tolerance: float):
        super().__init__(
            f"Label coordinates left the simplex by {overshoot:.3g} (> {tolerance:.1g}); reduce dt for these rates."
        )


class NonFiniteState(MfleadError):
    def __init__(self, where: str):
        super().__init__(f"Non-finite values produced in {where}.")


class CflViolation(MfleadError):
    def __init__(self, dt: float, limit: float):
        super().__init__(f"Time step {dt:.6g} exceeds the upwind positivity bound {limit:.6g}.")


class NegativeCell(MfleadError):
    def __init__(self, value: float):
        super().__init__(f"Finite-volume update produced a negative cell value {value:.3g}.")


class DimensionMismatch(MfleadError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"Expected measures on R^{expected}, got points of dimension {got}.")


class SupportTooLarge(MfleadError):
    def __init__(self, size: int, cap: int):
        super().__init__(f"Support of {size} points exceeds the exact transport cap of {cap}.")
