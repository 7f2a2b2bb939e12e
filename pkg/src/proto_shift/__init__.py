"""Graph prototypical networks for few-shot learning under data shift."""
