"""Freehand 3D ultrasound trajectory estimation toolkit.

Pipeline stages: simulate ground-truthed scans, estimate inter-frame rigid
motion with a small IMU-fused model, refine the estimate online against
scan-consistency and IMU-agreement losses, score the trajectory with drift
metrics, and compound frames into a volume.
"""

__version__ = "0.1.0"
