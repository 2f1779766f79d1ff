"""Speech separation with a differentiable ESTOI objective.

Modules: ``audio_io`` (WAV and resampling), ``dsp`` (STFT), ``octave``
(one-third octave bands), ``loss`` (ESTOI/MSE losses and gradients),
``neural`` (LSTM mask network, Adam, checkpoints), ``data`` (mixtures and
augmentation), ``metrics`` (ESTOI, STOI, BSS-EVAL), ``trainer`` (training
regimes, separation, evaluation) and ``cli``.
"""

__version__ = "0.1.0"
