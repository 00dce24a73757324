"""
tsdplab: TEE-Shielded DNN Partition Laboratory
==============================================

A desk-scale laboratory that implements, attacks and measures TEE-shielded
DNN partition schemes on toy CNNs and synthetic data.

This package provides:
- A small deterministic numpy neural-network engine (forward, backward, SGD, PGD)
- Partition plans for layer-, weight- and obfuscation-based shielding schemes
- A simulated TEE/GPU executor with one-time-pad masked offload and
  Freivalds verification
- The ShadowNet obfuscation and its recovery attack
- TEESlice: partition-before-training with iterative slice pruning
- Model-stealing and membership-inference attack harnesses
- FLOPs accounting and the sweet-spot configuration search
"""

__version__ = "1.0.0"
__author__ = "TSDP Lab Team"
__description__ = "TEE-shielded DNN partition laboratory"
