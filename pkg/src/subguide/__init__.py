"""Training-free structure and appearance guidance on a toy diffusion model.

Pipeline: procedural shape corpus -> DDPM training -> per-timestep PCA
semantic bases over denoiser self-attention keys -> guided DDIM sampling
with structure/appearance energies -> proxy metrics and ablations.
"""

import os

# At toy tensor sizes OpenBLAS's spin-waiting worker threads cost more than
# they bring; parallelism happens at the trajectory/process level instead.
# Must be set before numpy first loads the BLAS.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

__version__ = "0.1.0"
