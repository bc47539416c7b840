"""Asymmetric decoy-state MDI-QKD over turbulent free-space channels.

Channel statistics, detection counts, finite-key rate bounds, intensity
optimization, transmittance post-selection and probe calibration.
"""
from .params import DeviceParams, ProtocolParams, TABLE1, TABLE2_DEVICE
from .channel import ChannelSpec, TransmittanceDistribution, discretize
from .finite_key import KeyRateResult, key_rate

__all__ = ["DeviceParams", "ProtocolParams", "TABLE1", "TABLE2_DEVICE", "ChannelSpec",
           "TransmittanceDistribution", "discretize", "KeyRateResult", "key_rate"]
__version__ = "0.1.0"
