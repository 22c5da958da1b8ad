"""IntensiveNet: dense-fusion convolutional networks with CTC, on a numpy autograd tape."""

__version__ = "0.1.0"
