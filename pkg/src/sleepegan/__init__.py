"""Desk-scale SleepEGAN toolkit: EGAN minority-class generation, CNN+LSTM
sleep staging and top-M checkpoint ensembling over single-channel EEG."""

__version__ = "0.1.0"
