"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np

__all__ = [
    "InvalidParameterError",
    "NotFittedError",
    "check_finite",
    "check_image",
    "check_range",
    "check_is_fitted",
    "as_generator",
]


class InvalidParameterError(ValueError):
    """A parameter is outside its documented domain or non-finite."""


try:  # share sklearn's exception type so ``except NotFittedError`` works either way
    from sklearn.exceptions import NotFittedError
except ImportError:  # pragma: no cover
    class NotFittedError(ValueError, AttributeError):
        pass


def check_finite(a, name: str = "array") -> np.ndarray:
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        raise InvalidParameterError(f"{name} contains non-finite values")
    return a


def check_range(value, name: str, low=None, high=None, low_open=False, high_open=False):
    """Raise unless ``low <(=) value <(=) high``."""
    if not np.isfinite(value):
        raise InvalidParameterError(f"{name}={value!r} is not finite")
    if low is not None and (value < low or (low_open and value == low)):
        raise InvalidParameterError(f"{name}={value!r} below allowed range")
    if high is not None and (value > high or (high_open and value == high)):
        raise InvalidParameterError(f"{name}={value!r} above allowed range")
    return value


def check_image(img, name: str = "image") -> np.ndarray:
    """Validate an ``(H, W, 3)`` float image and return it as float32."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise InvalidParameterError(f"{name} must have shape (H, W, 3), got {img.shape}")
    check_finite(img, name)
    return img.astype(np.float32, copy=False)


def check_is_fitted(estimator, attributes) -> None:
    if isinstance(attributes, str):
        attributes = [attributes]
    if not all(getattr(estimator, a, None) is not None for a in attributes):
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; call 'fit' first."
        )


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
