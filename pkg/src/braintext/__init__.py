"""braintext: a desk-scale brain-to-text fusion pipeline.

Synthetic fMRI-like betas pass through per-region tokenizers into the
embedding space of a small autoregressive decoder, which then answers
free-form questions about the underlying scene. Includes training,
evaluation, zero-shot category holdout, in-silico microstimulation, a
CLI, and an HTTP probe service.
"""

__version__ = "0.1.0"
