"""Text-independent speaker embeddings trained from scratch with numpy.

Modules: ``audio`` (WAV I/O, crops), ``features`` (STFT), ``nn`` (residual CNN
with manual backprop), ``losses`` (softmax and margin heads), ``eval``
(embeddings, EER, detection cost, Top-k) and ``cli``.
"""

__version__ = "0.1.0"
