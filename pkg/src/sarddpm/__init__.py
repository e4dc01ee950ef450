"""Class-conditional denoising diffusion models for radar-style image synthesis."""

from sarddpm.schedule import NoiseSchedule, ScheduleKind, make_cosine, make_linear, make_schedule, make_sigmoid

__all__ = [
    "NoiseSchedule",
    "ScheduleKind",
    "make_cosine",
    "make_linear",
    "make_schedule",
    "make_sigmoid",
]

__version__ = "0.1.0"
