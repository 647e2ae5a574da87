"""Volume I/O, preprocessing, slice stacking, augmentation, synthesis."""
