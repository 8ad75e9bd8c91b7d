"""Grid-world LAM: environment, reverse-mode tape, conv/VQ model, training."""
