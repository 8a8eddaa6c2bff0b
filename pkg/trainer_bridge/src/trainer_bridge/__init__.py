"""Trainer-contract bridge: LoRA fine-tuning and chat-completions serving."""
