"""Toy video-segmentation harness exercising the dynamic convolution blocks."""
