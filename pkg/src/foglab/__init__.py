"""foglab: freezing-of-gait detection with tree ensembles, exact Shapley
attributions and a federated Conv1D+LSTM simulator."""

__version__ = "0.1.0"
