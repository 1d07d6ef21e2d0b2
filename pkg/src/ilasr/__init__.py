"""Incremental learning for CTC speech recognisers with explanation-based distillation.

Modules:

* ``tensor``   - numpy-backed reverse-mode autodiff
* ``model``    - conv + self-attention CTC encoder, checkpoints (ILCK1)
* ``losses``   - CTC, RBKD, EBKD, EWC and their weighted sum
* ``metrics``  - greedy decoding, CER, Pearson correlation
* ``data``     - synthetic base / accent / new-words tasks, datasets (ILAD1)
* ``harness``  - stages, sequences, sweeps, correlation analysis
* ``cli``      - the ``ilasr`` command
"""

__version__ = "0.1.0"
