# RM-FEM numerics package
"""Forward model, random meshes, Bayesian inversion and diagnostics."""

# Import submodules directly, e.g. `from src.rmfem.fem import assemble_and_solve`

__all__ = ["field", "mesh", "fem", "inverse", "analysis", "artifacts", "streams", "errors"]
