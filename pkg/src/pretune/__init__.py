"""Pre-training / fine-tuning benchmark for 3D encoder-decoder networks.

Compares four self-supervised pre-training regimes (reconstruction,
adversarial, contrastive, diffusion denoising) and five tuning regimes
(top, decoder, full, LoRA, from-scratch) on a multi-task sulcal
segmentation + classification problem.
"""

__version__ = "0.1.0"

PRETRAIN_STRATEGIES = ("reconstruction", "adversarial", "contrastive", "diffusion")
TUNE_STRATEGIES = ("top", "decoder", "full", "lora", "scratch")
