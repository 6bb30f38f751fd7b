"""Post-detector microanastomosis skill assessment: fusion, tracking, tips, kinematics, grading."""

__version__ = "0.1.0"
