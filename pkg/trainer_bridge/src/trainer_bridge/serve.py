"""Chat-completions endpoint in front of a (possibly adapter-tuned) checkpoint."""

import json
import logging
from pathlib import Path
from typing import Literal

import torch
from fastapi import FastAPI
from pydantic import BaseModel, Field
from transformers import AutoModelForCausalLM, AutoTokenizer

from .lora import ADAPTER_CONFIG, is_adapter_dir, load_adapter_into

logger = logging.getLogger(__name__)

MAX_NEW_TOKENS = 48


class ImageUrl(BaseModel):
    url: str


class ContentPart(BaseModel):
    type: Literal["text", "image_url"]
    text: str | None = None
    image_url: ImageUrl | None = None


class Message(BaseModel):
    role: str
    content: list[ContentPart] | str


class ChatCompletionRequest(BaseModel):
    model: str
    messages: list[Message] = Field(min_length=1)
    temperature: float = Field(default=0.0, ge=0.0)
    max_tokens: int = Field(default=256, ge=1)


def load_model(model_ref: str):
    """Load a bare checkpoint dir, or an adapter dir pointing at its base."""
    ref = Path(model_ref)
    if is_adapter_dir(ref):
        config = json.loads((ref / ADAPTER_CONFIG).read_text("utf-8"))
        tokenizer = AutoTokenizer.from_pretrained(config["base_model"])
        model = AutoModelForCausalLM.from_pretrained(config["base_model"])
        load_adapter_into(model, ref)
    else:
        tokenizer = AutoTokenizer.from_pretrained(model_ref)
        model = AutoModelForCausalLM.from_pretrained(model_ref)
    model.eval()
    return tokenizer, model


def prompt_text(request: ChatCompletionRequest) -> str:
    """All text parts in order; image parts are accepted but not encoded."""
    chunks = []
    for message in request.messages:
        if isinstance(message.content, str):
            chunks.append(message.content)
            continue
        for part in message.content:
            if part.type == "text" and part.text is not None:
                chunks.append(part.text)
    return "\n".join(chunks)


def create_app(model_ref: str) -> FastAPI:
    tokenizer, model = load_model(model_ref)
    app = FastAPI(title="gcot-trainer-bridge")

    @app.post("/chat/completions")
    def chat_completions(request: ChatCompletionRequest):
        prompt = prompt_text(request)
        inputs = tokenizer(
            prompt, return_tensors="pt", truncation=True, max_length=256
        )
        do_sample = request.temperature > 0
        with torch.no_grad():
            output = model.generate(
                **inputs,
                max_new_tokens=min(request.max_tokens, MAX_NEW_TOKENS),
                do_sample=do_sample,
                temperature=request.temperature if do_sample else None,
                pad_token_id=tokenizer.pad_token_id or tokenizer.eos_token_id,
            )
        completion = tokenizer.decode(
            output[0][inputs["input_ids"].shape[1] :], skip_special_tokens=True
        )
        return {
            "id": "cmpl-bridge",
            "object": "chat.completion",
            "model": request.model,
            "choices": [
                {
                    "index": 0,
                    "message": {"role": "assistant", "content": completion},
                    "finish_reason": "stop",
                }
            ],
        }

    return app


def serve(model_ref: str, port: int, host: str = "127.0.0.1") -> None:
    import uvicorn

    uvicorn.run(create_app(model_ref), host=host, port=port, log_level="warning")
