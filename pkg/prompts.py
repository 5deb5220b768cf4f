"""
Chat templates - control-token names, think-block intent bodies and task prompts
"""
import logging
from typing import Dict, Optional, Tuple

logger = logging.getLogger(__name__)


TURN_START = "<|im_start|>"
TURN_END = "<|im_end|>"
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
VISION_START = "<|vision_start|>"
VISION_END = "<|vision_end|>"
AUDIO_START = "<|audio_start|>"
AUDIO_END = "<|audio_end|>"
SPEAKER_REF = "<|speaker_ref|>"
SLOT = "<|slot|>"
EDIT = "<|edit|>"
END_OF_TEXT = "<|endoftext|>"
PAD = "<|pad|>"

ROLE_TOKENS = {
    'system': "<|system|>",
    'user': "<|user|>",
    'assistant': "<|assistant|>",
}


# Intent-parsing bodies the assistant emits inside <think> ... </think>
INTENT_THINK = {
    'vqa': (
        "This is a VQA task. The user gave an image and a question. "
        "Use the continuous vision features and answer the question factually."
    ),
    'image_edit': (
        "This is an image edit request on interleaved image and text input. "
        "Emit vision tokens for the edited image and keep unchanged objects as they are."
    ),
    'audio_visual_speech': (
        "This is a spoken question about an image. Read the intent from the audio "
        "embedding, look at the image features, then answer with discrete audio tokens."
    ),
}


# task -> output modalities the template supports
TASK_OUTPUTS: Dict[str, Tuple[str, ...]] = {
    'chat': ('text',),
    'vqa': ('text',),
    'caption': ('text',),
    'ocr': ('text',),
    'asr': ('text',),
    't2i': ('image',),
    'edit': ('image',),
    'tts': ('audio',),
    'av_speech': ('audio', 'text'),
    'video': ('text',),
}

TASK_INTENT = {
    'vqa': 'vqa',
    'edit': 'image_edit',
    'av_speech': 'audio_visual_speech',
}

SYSTEM_PROMPT = "You are an omnimodal assistant."

CAPTION_PROMPTS = (
    "Describe the image.",
    "What is shown here?",
    "Write a short caption.",
)

OCR_PROMPT = "Read the text in the image."
ASR_PROMPT = "Transcribe the audio."
TTS_PROMPT = "Say this aloud: {text}"
T2I_PROMPT = "Draw {caption}."
EDIT_PROMPT = "Change the shape to a {shape}."
VIDEO_PROMPT = "What happens in this video?"


def think_text(intent_or_text: Optional[str]) -> Optional[str]:
    """
    Resolve a think argument: an intent key maps to its canned body,
    anything else is used verbatim
    """
    if intent_or_text is None:
        return None
    return INTENT_THINK.get(intent_or_text, intent_or_text)


def supports_output(task: str, modality: str) -> bool:
    return modality in TASK_OUTPUTS.get(task, ())
