"""Multi-column crowd counting with recurring multi-resolution fusion.

Heavy submodules are imported lazily so the command-line entry point can
bound the BLAS thread pool before numpy loads.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "Tensor": "tensor",
    "finite_difference_check": "tensor",
    "no_grad": "tensor",
    "ModelConfig": "config",
    "RunConfig": "config",
    "MRFNet": "network",
    "HeadOutputs": "network",
    "column_specs": "network",
    "combine_counts": "network",
    "save_checkpoint": "checkpoint",
    "load_checkpoint": "checkpoint",
    "restore_model": "checkpoint",
    "Metrics": "evaluation",
    "predict_image": "evaluation",
    "evaluate": "evaluation",
}


def __getattr__(name):
    if name in _EXPORTS:
        import importlib

        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_EXPORTS))
