"""Ship state estimation with an unscented Kalman filter whose process model
is a pretrained, history-conditioned dynamics sequence model.

Submodules are imported on demand; ``import fmukf`` alone stays cheap and
does not load torch.
"""

__version__ = "0.1.0"
