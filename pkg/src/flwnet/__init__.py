"""Low-light image enhancement with a histogram-driven global curve and a tiny convolutional refiner.

Modules
-------
imaging     image I/O, V channel, histograms, paired datasets, patch sampling
diffcore    differentiable primitives and the finite-difference gradient checker
gfe         global feature extractor: histogram MLP and the iterated brightness curve
network     local enhancement convolutions and the full enhancement pipeline
losses      L1, SSIM and the relative color / brightness / structure losses
metrics     PSNR, SSIM and CIEDE2000 scoring and dataset evaluation
checkpoint  binary model container
trainer     Adam training loop
verify      gradient verification suite
"""

__version__ = "0.1.0"
