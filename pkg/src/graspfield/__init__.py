"""Grasp pose sampling with a learned SE(3) energy field over a tri-plane shape encoding."""
