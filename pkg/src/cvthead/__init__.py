"""cvthead: controllable head avatars from parametric meshes and point splatting."""

__version__ = "0.1.0"
