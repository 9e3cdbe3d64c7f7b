"""Denoising diffusion on point clouds with projective image conditioning.

Modules: :mod:`geometry` (cameras, frustum coordinates, normalisation),
:mod:`diffusion` (noise model and loss), :mod:`scorenet` (set network),
:mod:`conditioning` (image features), :mod:`samplers` and
:mod:`likelihood` (inference), :mod:`metrics` (evaluation), plus the
harness in :mod:`synthetic`, :mod:`training`, :mod:`checkpoint`,
:mod:`config` and :mod:`cli`.
"""

__version__ = "0.1.0"
