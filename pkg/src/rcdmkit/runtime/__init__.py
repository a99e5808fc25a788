"""
Datasets, checkpoints, representation cache, image grids and run manifests.
"""
