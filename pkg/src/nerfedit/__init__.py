"""nerfedit: attribute-conditional 3D-aware generative field on a toy world.

Subpackages/modules:
  numerics    reverse-mode autodiff tensors + Adam
  synthworld  procedural SDF head scenes with exact labels and masks
  field       latent-conditioned SDF field (FiLM-modulated sinusoidal trunk)
  render      cameras, volume rendering, normals, marching cubes
  editor      gated latent-editing units (reconstruction/editing branches)
  train       GAN training, toy classifier, triplet sampling, editor training
  editopt     masked edit tuning, geometry editing, two-stage inversion
  evalmetrics classification accuracy, local preservation, identity proxy
  cli         commands, flat config files, binary checkpoints
"""

__version__ = "0.1.0"
