"""
The validation module gathers all utilised functions/class/objects serving
the purpose of validation.
"""

import numpy as np


class UserInputError(Exception):
    """Custom error for wrong inputs to openlandmark"""


class NonFiniteError(UserInputError):
    """Custom error for NaN or infinite coordinates, pixels or function values"""


class ZeroVarianceError(UserInputError):
    """Custom error when a population has no variance to fit statistics on"""


class SingularSystemError(ArithmeticError):
    """The TPS block is singular or too ill-conditioned to be solved.

    The condition estimate that triggered the failure is kept in ``condition``.
    """

    def __init__(self, message: str, condition: float = float("inf")):
        super().__init__(message)
        self.condition = condition


class TrainingAbortedError(RuntimeError):
    """Custom error raised when a training run cannot continue"""


# ----------------------------------------------------------------
#                           GENERIC
# ----------------------------------------------------------------


def param_must_be_type(parameter, parameter_name, parameter_type, type_name):
    if not isinstance(parameter, parameter_type):
        raise UserInputError(f"Wrong type for {parameter_name}. Please provide a {type_name}")


def str_must_be_one_of_those(param: str, param_name: str, accepted_values: list):
    param_must_be_type(param, param_name, str, "string")
    if param not in accepted_values:
        raise UserInputError(
            f"Value in {param_name} type must be one of the following: \n - "
            + "\n - ".join(accepted_values)
        )


def must_be_finite(values, values_name):
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"values in {values_name} must all be finite")


def extents_must_match(a: np.ndarray, b: np.ndarray, a_name: str, b_name: str):
    if np.shape(a) != np.shape(b):
        raise UserInputError(
            f"{a_name} and {b_name} must have the same extent, got {np.shape(a)} and {np.shape(b)}"
        )


def patch_must_fit(patch_size: int, shape, param_name: str = "patch_size"):
    if patch_size < 1 or patch_size % 2 == 0:
        raise UserInputError(f"{param_name} must be an odd positive integer, got {patch_size}")
    if patch_size > min(shape):
        raise UserInputError(
            f"{param_name}={patch_size} is larger than the image extent {tuple(shape)}"
        )
