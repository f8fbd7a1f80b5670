"""Vision-language runtime backed by a transformers checkpoint.

Loads a processor/model pair once and answers one forward pass per step
request: the session's image plus the prompt template, extended with every
token fed so far. No KV-cache reuse; this is a reference adapter, not a
serving stack. Needs the optional ``real`` extra and downloaded weights.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

DEFAULT_TEMPLATE = "USER: <image>\nDescribe the image in detail. ASSISTANT:"


class HFSession:
    def __init__(self, model: "HFVisionLanguageModel", image_id: str, prompt):
        from PIL import Image

        path = model.image_dir / image_id
        if not path.exists():
            raise FileNotFoundError(f"image file {path} not found")
        with Image.open(path) as img:
            inputs = model.processor(text=model.prompt_template,
                                     images=img.convert("RGB"),
                                     return_tensors="pt")
        self.model = model
        self.base_inputs = {k: v.to(model.device) for k, v in inputs.items()}
        self.fed = [int(t) for t in prompt]

    def step_logits(self) -> np.ndarray:
        torch = self.model.torch
        inputs = dict(self.base_inputs)
        if self.fed:
            extra = torch.tensor([self.fed], device=self.model.device)
            inputs["input_ids"] = torch.cat([inputs["input_ids"], extra], dim=1)
            if "attention_mask" in inputs:
                pad = torch.ones_like(extra)
                inputs["attention_mask"] = torch.cat(
                    [inputs["attention_mask"], pad], dim=1)
        with torch.no_grad():
            logits = self.model.model(**inputs).logits
        return logits[0, -1].float().cpu().numpy().astype(np.float64)

    def feed(self, token: int) -> None:
        self.fed.append(int(token))


class HFVisionLanguageModel:
    def __init__(self, model_id: str, image_dir=".", device: str = "cpu",
                 prompt_template: str = DEFAULT_TEMPLATE):
        try:
            import torch
            from transformers import AutoModelForVision2Seq, AutoProcessor
        except ImportError as exc:
            raise RuntimeError(
                "real model mode needs the optional 'real' extra "
                "(pip install cicd-adapter[real])") from exc
        self.torch = torch
        self.device = device
        self.image_dir = Path(image_dir)
        self.prompt_template = prompt_template
        self.processor = AutoProcessor.from_pretrained(model_id)
        self.model = AutoModelForVision2Seq.from_pretrained(model_id).to(device)
        self.model.eval()
        tokenizer = self.processor.tokenizer
        self.vocab_size = len(tokenizer)
        self.token_table = tokenizer.convert_ids_to_tokens(list(range(self.vocab_size)))
        self.eos_id = int(tokenizer.eos_token_id)

    def open_session(self, image_id: str, prompt) -> HFSession:
        return HFSession(self, image_id, prompt)
