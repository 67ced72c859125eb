import os

from pym2a.error_classes import M2AConfigError

NUM_THREADS_ENV = "M2A_NUM_THREADS"


def resolve_workers(configured=0):
    """
    Worker pool size. M2A_NUM_THREADS wins over everything,
    then a positive configured value, then the core count.
    """
    env_value = os.environ.get(NUM_THREADS_ENV)
    if env_value is not None and env_value.strip() != "":
        try:
            workers = int(env_value)
        except ValueError:
            raise M2AConfigError(
                f"{NUM_THREADS_ENV} must be an integer, not {env_value!r}"
            )
        if workers < 1:
            raise M2AConfigError(f"{NUM_THREADS_ENV} must be at least 1")
        return workers
    if configured > 0:
        return configured
    return os.cpu_count() or 1
