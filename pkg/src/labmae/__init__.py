"""Masked-autoencoder imputation for panel-structured lab data.

Submodules are imported lazily so the command-line front end can configure
thread environment variables before any numerical library loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "kernels",
    "data",
    "synth",
    "model",
    "baselines",
    "evaluation",
    "carbon",
    "manifest",
    "report",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
