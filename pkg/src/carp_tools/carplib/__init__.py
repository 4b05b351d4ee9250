"""Self-supervised prototype clustering: model, objectives, training and evaluation."""
