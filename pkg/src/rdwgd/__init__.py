"""Rate-distortion upper bounds by Blahut-Arimoto and Wasserstein gradient descent."""
