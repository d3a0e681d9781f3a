"""
stepscore - speech activity detection, diarization and scoring toolkit
"""

__version__ = "1.0.0"
