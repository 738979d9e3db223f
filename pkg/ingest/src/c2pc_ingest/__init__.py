"""MM-Fi dataset ingestion: .mat CSI frames and LiDAR clouds to c2pc files.

This package only writes the pipeline's documented on-disk formats (the
"CSI1" container and ASCII PLY); it does not import the pipeline itself.
"""

__version__ = "0.1.0"
