"""Over-the-air federated learning on a massive-MIMO uplink.

Clients send model differentials simultaneously; the server recovers their
sum by projecting the received superposition onto the estimated sum channel
(random orthogonalization), with a linear MMSE receiver and the Cramer-Rao
bound as references.
"""

from .bounds import BoundParams, b_factor, crlb, learning_rate, lemma1_rhs, theorem1_bound
from .channel import SystemConfig, draw_channel, estimate_sum_channel, transmit, transmit_block
from .dataio import load_idx, load_mnist, make_split, parse_idx, serialize_idx, synth_quadratic
from .fl import Schedule, TrainingTask, run_round, run_training
from .objectives import Dataset, LabeledDataset, Objective, accuracy, loss, minibatch_gradient
from .receivers import mmse_aggregate, ro_aggregate, sinr_analytic, sinr_empirical

__version__ = "0.1.0"

__all__ = [
    "BoundParams", "b_factor", "crlb", "learning_rate", "lemma1_rhs", "theorem1_bound",
    "SystemConfig", "draw_channel", "estimate_sum_channel", "transmit", "transmit_block",
    "load_idx", "load_mnist", "make_split", "parse_idx", "serialize_idx", "synth_quadratic",
    "Schedule", "TrainingTask", "run_round", "run_training",
    "Dataset", "LabeledDataset", "Objective", "accuracy", "loss", "minibatch_gradient",
    "mmse_aggregate", "ro_aggregate", "sinr_analytic", "sinr_empirical",
]
