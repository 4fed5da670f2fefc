"""Post-hoc energy aligning for long-tailed and class-incremental classifiers."""

__version__ = "0.1.0"

_LAZY = {
    "ShiftVector": "energy_aligning.aligning",
    "apply_shifts": "energy_aligning.aligning",
    "cluster_shifts": "energy_aligning.aligning",
    "per_class_shifts": "energy_aligning.aligning",
    "run_lt": "energy_aligning.services",
    "run_cil": "energy_aligning.services",
}


# Lazy imports keep `import energy_aligning` (and `--version`) free of the numeric stack
def __getattr__(name):
    module = _LAZY.get(name)
    if module is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    import importlib

    return getattr(importlib.import_module(module), name)
