"""Create a tiny random-weight base checkpoint for offline smoke runs."""

from pathlib import Path

from tokenizers import Tokenizer, decoders, models, pre_tokenizers, trainers
from transformers import LlamaConfig, LlamaForCausalLM, PreTrainedTokenizerFast

_TOKENIZER_CORPUS = [
    "Where is the $1.85? Please provide the bounding box coordinate of the region.",
    "The content in this image is:",
    "[0.611, 0.381, 0.875, 0.455]",
    "[0.021, 0.411, 0.331, 0.475]",
    "Based on the following question: How much do the beef sauce and the "
    "marinara sauce cost together? Give step by step reasoning to get the "
    "answer, and when you're ready to answer, please use the format '*Answer*:'",
    "The price of beef sauce is $1.85 per kilogram. *Answer*: 6.04",
    "0123456789 .,$%[]():?'*",
]


def init_tiny(out_dir: str | Path, seed: int = 0, vocab_size: int = 384) -> str:
    """Write a 2-layer Llama-architecture checkpoint with a byte-level tokenizer.

    Random weights: the checkpoint exists to exercise the training/serving
    contract offline, not to produce meaningful text.
    """
    import torch

    torch.manual_seed(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    tokenizer = Tokenizer(models.BPE(unk_token="<unk>"))
    tokenizer.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tokenizer.decoder = decoders.ByteLevel()
    trainer = trainers.BpeTrainer(
        vocab_size=vocab_size, special_tokens=["<unk>", "<s>", "</s>", "<pad>"]
    )
    tokenizer.train_from_iterator(_TOKENIZER_CORPUS * 8, trainer)
    fast = PreTrainedTokenizerFast(
        tokenizer_object=tokenizer,
        unk_token="<unk>",
        bos_token="<s>",
        eos_token="</s>",
        pad_token="<pad>",
    )

    config = LlamaConfig(
        vocab_size=fast.vocab_size + 8,
        hidden_size=64,
        intermediate_size=128,
        num_hidden_layers=2,
        num_attention_heads=4,
        num_key_value_heads=4,
        max_position_embeddings=512,
    )
    model = LlamaForCausalLM(config)
    model.save_pretrained(out_dir)
    fast.save_pretrained(out_dir)
    return str(out_dir)
