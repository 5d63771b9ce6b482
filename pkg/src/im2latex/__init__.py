"""Image-to-LaTeX: a Swin encoder with a GPT-2 decoder, LoRA fine-tuning and GLEU evaluation.

Subpackages and modules:

- :mod:`im2latex.corpus` reads, cleans and splits formula corpora
- :mod:`im2latex.preprocessing` handles images, the BPE tokenizer and batching
- :mod:`im2latex.model` holds the encoder-decoder, generation and checkpoints
- :mod:`im2latex.lora` injects, merges and saves low-rank adapters
- :mod:`im2latex.trainer` runs base training and fine-tuning
- :mod:`im2latex.evaluation` and :mod:`im2latex.gleu` score predictions
- :mod:`im2latex.cli` provides the ``im2latex`` command
"""

__version__ = "0.1.0"
