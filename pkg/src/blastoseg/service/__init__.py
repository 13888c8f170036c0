"""HTTP service wrapping the segmentation toolkit.

``handlers`` holds the plain request -> response functions; ``app`` mounts
them as a FastAPI application; the command line calls the same handlers
in process, so both entry points share one code path.
"""

from .app import create_app

__all__ = ["create_app"]
