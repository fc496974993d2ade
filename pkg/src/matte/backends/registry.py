"""Backend selection from a plain config mapping."""

from __future__ import annotations

import importlib

from ..errors import BackendError, ConfigError
from .base import DiffusionBackend
from .toy import ToyBackend

KNOWN_BACKENDS = ("toy", "latent-diffusion")


def backend_from_config(config: dict | str) -> DiffusionBackend:
    """Instantiate the backend named by ``config``.

    Accepts a bare name or a mapping with a ``backend`` key (``name`` is
    tolerated as an alias). A name of the form ``module.path:ClassName``
    loads a third-party adapter; the class is called with the remaining
    config keys (for example ``weights_path``).
    """
    if isinstance(config, str):
        config = {"backend": config}
    if not isinstance(config, dict):
        raise ConfigError(
            f"backend config must be a name or mapping, got {type(config).__name__}"
        )
    config = dict(config)
    name = config.pop("backend", None) or config.pop("name", None)
    config.pop("name", None)
    if not name:
        raise ConfigError("backend config is missing the 'backend' key")

    if name == "toy":
        if config:
            raise ConfigError(f"toy backend takes no options, got {sorted(config)}")
        return ToyBackend()
    if name == "latent-diffusion":
        raise BackendError(
            "the latent-diffusion adapter is not bundled; point 'backend' at an "
            "installed adapter as 'module.path:ClassName' instead"
        )
    if ":" in name:
        module_name, _, class_name = name.partition(":")
        try:
            module = importlib.import_module(module_name)
        except ImportError as exc:
            raise BackendError(
                f"cannot import backend module {module_name!r}: {exc}"
            ) from exc
        try:
            cls = getattr(module, class_name)
        except AttributeError:
            raise BackendError(
                f"module {module_name!r} has no attribute {class_name!r}"
            ) from None
        backend = cls(**config)
        if not isinstance(backend, DiffusionBackend):
            raise BackendError(
                f"{name!r} did not produce a DiffusionBackend, got {type(backend).__name__}"
            )
        return backend
    raise BackendError(
        f"unknown backend {name!r}; known names are {', '.join(KNOWN_BACKENDS)} "
        "or a 'module.path:ClassName' adapter"
    )
