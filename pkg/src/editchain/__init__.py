"""editchain: multi-attribute face editing as validated instruction chains.

The package decomposes a compound face-editing instruction into
single-attribute steps, runs the steps through pluggable editor and
super-resolution backends, builds triplet datasets by mask compositing,
and scores results with similarity / coverage / preservation / quality
metrics.
"""

__version__ = "0.1.0"
