"""Dataset, preprocessing, training and evaluation services."""
