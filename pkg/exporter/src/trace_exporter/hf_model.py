"""Adapter for transformers image-text-to-text models with attention output.

Assumed prompt layout: image tokens are the prompt positions whose input id
equals the model configuration's image token id (image_token_id or
image_token_index); every other prompt position counts as text. Models
whose vision spans are not marked by a placeholder id in input_ids are not
supported. Attention is taken from the decoder rows produced during
generation (eager attention implementation is forced so weights are
materialized), head-averaged, and restricted to prompt columns.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .toy_model import GenerationResult


class HfModel:
    def __init__(self, model_id: str, device: str = "cpu"):
        try:
            import torch  # noqa: F401
            from transformers import AutoModelForImageTextToText, AutoProcessor
        except ImportError as exc:  # pragma: no cover
            raise RuntimeError(
                "transformers is required for hf: models; install the [hf] extra"
            ) from exc
        self.processor = AutoProcessor.from_pretrained(model_id)
        self.model = AutoModelForImageTextToText.from_pretrained(
            model_id, attn_implementation="eager"
        ).to(device)
        self.model.eval()
        self.device = device
        self.model_id = model_id
        config = self.model.config
        self.image_token_id = getattr(config, "image_token_id", None)
        if self.image_token_id is None:
            self.image_token_id = getattr(config, "image_token_index", None)
        if self.image_token_id is None:
            raise RuntimeError(
                f"{model_id}: cannot locate the image placeholder token id; "
                "this model family is not supported"
            )

    def generate(self, image: Image.Image, question: str, max_tokens: int) -> GenerationResult:
        import torch

        messages = [
            {
                "role": "user",
                "content": [{"type": "image"}, {"type": "text", "text": question}],
            }
        ]
        prompt = self.processor.apply_chat_template(messages, add_generation_prompt=True)
        inputs = self.processor(text=[prompt], images=[image.convert("RGB")], return_tensors="pt")
        inputs = {k: v.to(self.device) for k, v in inputs.items()}
        input_ids = inputs["input_ids"][0]
        prompt_len = input_ids.shape[0]
        img_cols = (input_ids == self.image_token_id).cpu().numpy()
        txt_cols = ~img_cols

        with torch.inference_mode():
            out = self.model.generate(
                **inputs,
                max_new_tokens=max_tokens,
                do_sample=False,
                output_attentions=True,
                return_dict_in_generate=True,
            )

        steps = out.attentions  # one tuple of per-layer tensors per generated token
        layers = len(steps[0])
        s_img = np.zeros((len(steps), layers))
        s_txt = np.zeros((len(steps), layers))
        for t, layer_attns in enumerate(steps):
            for l, attn in enumerate(layer_attns):
                # (batch, heads, q_len, kv_len); last query row, prompt columns
                row = attn[0, :, -1, :prompt_len].mean(dim=0).float().cpu().numpy()
                s_img[t, l] = float(row[img_cols].sum())
                s_txt[t, l] = float(row[txt_cols].sum())

        new_ids = out.sequences[0, prompt_len:]
        answer = self.processor.batch_decode([new_ids], skip_special_tokens=True)[0]
        return GenerationResult(
            answer_text=answer,
            layers=layers,
            img_tokens=int(img_cols.sum()),
            txt_tokens=int(txt_cols.sum()),
            s_img=s_img,
            s_txt=s_txt,
        )
