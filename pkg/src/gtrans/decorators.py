import functools
import logging
from collections.abc import Callable

from src.models import (
    ConfigError,
    CorruptSampleError,
    DatasetLayoutError,
    GTransError,
    InvalidDataError,
    TrainingDivergedError,
)


def handle_errors[T](func: Callable[..., T]) -> Callable[..., T]:
    """Decorator to log pipeline errors with the failing function name, then re-raise."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs) -> T:
        try:
            return func(*args, **kwargs)
        except ConfigError as e:
            logging.getLogger(__name__).error(f"Config error in {func.__name__}: {e}")
            raise
        except (DatasetLayoutError, CorruptSampleError, InvalidDataError) as e:
            logging.getLogger(__name__).error(
                f"Data error ({type(e).__name__}) in {func.__name__}: {e}"
            )
            raise
        except TrainingDivergedError as e:
            logging.getLogger(__name__).error(
                f"Training diverged in {func.__name__} at step {e.step}: {e}"
            )
            raise
        except GTransError as e:
            logging.getLogger(__name__).error(
                f"{type(e).__name__} in {func.__name__}: {e}"
            )
            raise
        except Exception as e:
            logging.getLogger(__name__).error(
                f"Unexpected error in {func.__name__}: {e}"
            )
            raise

    return wrapper
