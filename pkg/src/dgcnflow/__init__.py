"""Dynamic graph-convolution LSTM traffic forecasting with evacuation transfer learning."""

__version__ = "0.1.0"
