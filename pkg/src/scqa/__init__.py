"""Self-supervised dialogue learning for spoken conversational question answering.

Desk-scale pipeline: dialogue corpora, WER-controlled noise simulation,
auxiliary-task dataset generation (incoherence discrimination, insertion
detection, question prediction), a small transformer trained jointly on
span prediction plus the auxiliary tasks, and EM/F1 evaluation.
"""

__version__ = "0.1.0"
