"""Speaker height and age regression with a cross-attention LSTM.

Modules: ``features`` (front end), ``model`` (network and gradients),
``training``, ``evaluation``, ``analysis`` (phone attention), ``datagen``
(synthetic corpus), ``corpus`` and ``pipeline`` (files and orchestration),
and ``cli``.
"""

__version__ = "0.1.0"
