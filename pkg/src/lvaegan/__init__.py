"""Lifelong VAE-GAN: a hybrid VAE/WGAN that learns a sequence of tasks with generative replay."""

__version__ = "0.1.0"
