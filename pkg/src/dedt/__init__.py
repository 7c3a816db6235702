"""RIS beamforming with diffusion-imputed channel state and a decision-transformer policy."""

__version__ = "0.1.0"
