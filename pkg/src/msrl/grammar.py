"""Prompt templates and the structured rationale grammar.

Two reply formats exist. The plain one (text-only stage) is::

    <think>
    Feedback:
    ...
    Comparision:
    ...
    Conclusion:
    ...
    </think>
    <answer>
    A
    </answer>

The typed one (caption and multimodal stages) opens the think block with a
``<type>...</type>`` task tag followed by a non-empty ``Caption:`` section.

Structure is strict, body whitespace is free: headings must start a line,
bodies are compared after stripping, and the answer token is trimmed before
it is matched against ``A`` / ``B``.
"""

from __future__ import annotations

import enum
import functools
import re
from dataclasses import dataclass, field

from .corpus import MediaKind, PreferenceExample, TaskKind


class StageFormat(enum.Enum):
    THINK_ANSWER = "think_answer"
    TYPED_THINK_ANSWER = "typed_think_answer"


class FormatViolation(enum.Enum):
    MISSING_TAG = "MissingTag"
    TAG_ORDER = "TagOrder"
    MISSING_SECTION = "MissingSection"
    BAD_ANSWER_TOKEN = "BadAnswerToken"
    TRAILING_CONTENT = "TrailingContent"


@dataclass(frozen=True)
class FormatError:
    kind: FormatViolation
    detail: str = ""

    def __bool__(self) -> bool:
        return False


HEADINGS = ("Caption", "Feedback", "Comparision", "Comparison", "Conclusion")
_SECTION_OF = {
    "Caption": "caption",
    "Feedback": "feedback",
    "Comparision": "comparison",
    "Comparison": "comparison",
    "Conclusion": "conclusion",
}
_TAGS = ("<think>", "</think>", "<answer>", "</answer>", "<type>", "</type>")


def comparison_heading(task: TaskKind | None) -> str:
    # understanding templates spell it "Comparision", generation ones "Comparison"
    return "Comparison" if task is not None and task.is_generation else "Comparision"


@dataclass(frozen=True)
class Rationale:
    stage_format: StageFormat
    answer: str
    feedback: str = ""
    comparison: str = ""
    conclusion: str = ""
    task_tag: TaskKind | None = None
    caption_text: str | None = None
    raw_text: str = field(default="", compare=False)
    comparison_spelling: str | None = field(default=None, compare=False)

    def validate(self) -> None:
        if self.answer not in ("A", "B"):
            raise ValueError(f"answer must be 'A' or 'B', got {self.answer!r}")
        typed = self.stage_format is StageFormat.TYPED_THINK_ANSWER
        if typed:
            if self.task_tag is None:
                raise ValueError("typed rationale needs a task tag")
            if not self.caption_text:
                raise ValueError("typed rationale needs a non-empty caption")
        elif self.task_tag is not None or self.caption_text is not None:
            raise ValueError("plain rationale carries no task tag or caption")
        bodies = [self.feedback, self.comparison, self.conclusion]
        if typed:
            bodies.append(self.caption_text)
        for body in bodies:
            _check_body(body)
        if self.comparison_spelling not in (None, "Comparision", "Comparison"):
            raise ValueError(f"bad comparison heading {self.comparison_spelling!r}")


def _check_body(body: str) -> None:
    if body != body.strip():
        raise ValueError(f"body has surrounding whitespace: {body!r}")
    if any(t in body for t in _TAGS):
        raise ValueError(f"body contains a reserved tag: {body!r}")
    for line in body.split("\n"):
        if line.startswith(tuple(h + ":" for h in HEADINGS)):
            raise ValueError(f"body line looks like a section heading: {line!r}")


def render_rationale(r: Rationale) -> str:
    r.validate()
    parts = ["<think>\n"]
    if r.stage_format is StageFormat.TYPED_THINK_ANSWER:
        parts.append(f"<type>{r.task_tag.display_name}</type>\n")
        parts.append(f"Caption:\n{r.caption_text}\n\n")
    comp = r.comparison_spelling or comparison_heading(r.task_tag)
    parts.append(f"Feedback:\n{r.feedback}\n\n")
    parts.append(f"{comp}:\n{r.comparison}\n\n")
    parts.append(f"Conclusion:\n{r.conclusion}\n")
    parts.append(f"</think>\n<answer>\n{r.answer}\n</answer>")
    return "".join(parts)


def parse_rationale(text: str | bytes, expected: StageFormat) -> Rationale | FormatError:
    """Parse a model reply; return a ``FormatError`` naming the first violation."""
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    return _parse_cached(text, expected)


@functools.lru_cache(maxsize=65536)
def _parse_cached(text: str, expected: StageFormat) -> Rationale | FormatError:
    typed = expected is StageFormat.TYPED_THINK_ANSWER
    required = ["<think>", "</think>", "<answer>", "</answer>"]
    if typed:
        required[1:1] = ["<type>", "</type>"]
    for tag in required:
        if tag not in text:
            return FormatError(FormatViolation.MISSING_TAG, tag)
    for tag in _TAGS:
        allowed = 1 if tag in required else 0
        if text.count(tag) > allowed:
            return FormatError(FormatViolation.TAG_ORDER, f"unexpected {tag}")
    pos = [text.index(tag) for tag in required]
    if pos != sorted(pos):
        return FormatError(FormatViolation.TAG_ORDER, "tags out of order")
    if text[: pos[0]].strip():
        return FormatError(FormatViolation.TAG_ORDER, "content before <think>")

    think_close = text.index("</think>")
    answer_open = text.index("<answer>")
    answer_close = text.index("</answer>")
    if text[think_close + len("</think>") : answer_open].strip():
        return FormatError(FormatViolation.TRAILING_CONTENT, "content between </think> and <answer>")
    if text[answer_close + len("</answer>") :].strip():
        return FormatError(FormatViolation.TRAILING_CONTENT, "content after </answer>")

    body_start = pos[0] + len("<think>")
    task = None
    if typed:
        type_open, type_close = text.index("<type>"), text.index("</type>")
        if text[body_start:type_open].strip():
            return FormatError(FormatViolation.TAG_ORDER, "content before <type>")
        task = _task_from_tag(text[type_open + len("<type>") : type_close])
        if task is None:
            return FormatError(FormatViolation.MISSING_SECTION, "unrecognized task type")
        body_start = type_close + len("</type>")

    sections = _split_sections(text[body_start:think_close])
    if isinstance(sections, FormatError):
        return sections
    names = [_SECTION_OF[h] for h, _ in sections]
    want = (["caption"] if typed else []) + ["feedback", "comparison", "conclusion"]
    if names != want:
        return FormatError(FormatViolation.MISSING_SECTION, f"sections {names}, expected {want}")
    bodies = {_SECTION_OF[h]: b for h, b in sections}
    if typed and not bodies["caption"]:
        return FormatError(FormatViolation.MISSING_SECTION, "empty caption")

    token = text[answer_open + len("<answer>") : answer_close].strip()
    if token not in ("A", "B"):
        return FormatError(FormatViolation.BAD_ANSWER_TOKEN, repr(token[:20]))

    spelling = next(h for h, _ in sections if _SECTION_OF[h] == "comparison")
    return Rationale(
        stage_format=expected,
        answer=token,
        feedback=bodies["feedback"],
        comparison=bodies["comparison"],
        conclusion=bodies["conclusion"],
        task_tag=task,
        caption_text=bodies.get("caption"),
        raw_text=text,
        comparison_spelling=spelling,
    )


def _split_sections(inner: str) -> list[tuple[str, str]] | FormatError:
    lines = inner.split("\n")
    if lines[0].strip():
        return FormatError(FormatViolation.MISSING_SECTION, "section heading must start a line")
    sections: list[tuple[str, list[str]]] = []
    for line in lines[1:]:
        heading = next((h for h in HEADINGS if line.startswith(h + ":")), None)
        if heading is not None:
            sections.append((heading, [line[len(heading) + 1 :]]))
        elif sections:
            sections[-1][1].append(line)
        elif line.strip():
            return FormatError(FormatViolation.MISSING_SECTION, "text before the first section")
    return [(h, "\n".join(body).strip()) for h, body in sections]


def _task_from_tag(content: str) -> TaskKind | None:
    key = " ".join(content.split()).casefold()
    return next((t for t in TaskKind if t.display_name == key), None)


_TYPE_RE = re.compile(r"<type>(.*?)</type>", re.DOTALL)
_ANSWER_RE = re.compile(r"<answer>\s*(\S+?)\s*</answer>")


def extract_task_tag(text: str) -> TaskKind | None:
    """Task named by the first well-delimited ``<type>`` element, if any."""
    m = _TYPE_RE.search(text)
    return _task_from_tag(m.group(1)) if m else None


def extract_answer(text: str) -> str | None:
    """Lenient answer extraction for voting over possibly malformed replies."""
    m = _ANSWER_RE.search(text)
    if m and m.group(1) in ("A", "B"):
        return m.group(1)
    return None


def is_well_formed(text: str, expected: StageFormat) -> bool:
    return not isinstance(parse_rationale(text, expected), FormatError)


# -- filler bodies ----------------------------------------------------------


def filler_rationale(
    answer: str,
    task: TaskKind | None,
    caption: str | None,
) -> Rationale:
    """Rationale with deterministic body text; typed iff ``task`` is given."""
    other = "B" if answer == "A" else "A"
    subject = "candidate" if task is None or not task.is_generation else task.media_kind.value
    fmt = StageFormat.THINK_ANSWER if task is None else StageFormat.TYPED_THINK_ANSWER
    return Rationale(
        stage_format=fmt,
        answer=answer,
        feedback=f"Both {subject}s were checked against the request.",
        comparison=f"{subject.capitalize()} {answer} follows the request more closely than {subject} {other}.",
        conclusion=f"{subject.capitalize()} {answer} is better.",
        task_tag=task,
        caption_text=caption if task is not None else None,
    )


# -- prompt templates -------------------------------------------------------

_REPLY_FORMAT = """Your reply should strictly follow this format:
<think>
{follow}<type>choose a task type: image understanding, image generation, video understanding, or video generation.</type>
Caption:
<provide a detailed description for {caption_target}>

Feedback:
<provide free-text feedback on {feedback_target}>

{comparison}:
<give a brief analysis on which {which}is better>

Conclusion:
<make your conclusion>
</think>
<answer>
A or B
</answer>

Here is the data.
"""

_IU_HEAD = """You are a helpful multimodal assistant tasked with evaluating the quality of responses generated for a given set of instructions and images. Your goal is to determine which response better addresses the user's question. Choose either Response A or Response B as the better option.

Do NOT say both / neither are good.

Here are some rules of the evaluation:
(1) If the instruction and image do not contain harmful content, you should prioritize evaluating whether the output honestly/precisely/closely executes the instruction and image, then consider its helpfulness, accuracy, level of detail, harmlessness, etc.
(2) If the instruction and image contain harmful content, prioritize the harmlessness and safety of the response.
(3) Responses should NOT contain more/less than what the instruction asks for, as such responses do NOT precisely execute the instruction and image.
(4) You should avoid any potential bias, and your judgment should be as objective as possible. Here are some potential sources of bias:
- The order in which the responses were presented should NOT affect your judgment, as Response A and Response B are **equally likely** to be the better.
- The length of the responses should NOT affect your judgement, as a longer response does not necessarily correspond to a better response. When making your decision, evaluate if the response length is appropriate for the given instruction.
"""

_IG_HEAD = """You are a helpful multimodal assistant tasked with evaluating the quality of images generated for a given input caption (a textual description of the image). Your goal is to determine which image better matches the caption. Choose either Image A or Image B as the better option.

Do NOT say both / neither are good.

Here are some rules for the evaluation:
(1) If the caption does not contain harmful content, prioritize evaluating whether the image faithfully and precisely reflects the caption, then consider its helpfulness, accuracy, level of detail, harmlessness, realism, and overall visual quality.
(2) If the caption contains harmful content, prioritize the harmlessness and safety of the image.
(3) The image should NOT include elements that are irrelevant to or missing from the caption, as such outputs do NOT precisely execute the instruction.
(4) You should avoid any potential bias, and your judgment should be as objective as possible. Here are some potential sources of bias:
- The order in which the images are presented should NOT affect your judgment, as Image A and Image B are equally likely to be better.
- The rendering style (e.g., realistic, cartoonish) should NOT affect your judgment unless explicitly specified in the caption.
- Do not assume that a more visually complex image is necessarily better; evaluate whether the complexity is appropriate for the given caption.
"""

_VU_HEAD = """You are a helpful multimodal assistant tasked with evaluating the quality of responses generated for a given user question and video. Your goal is to determine which response better addresses the user's question. Choose either Response A or Response B as the better option.

Do NOT say both / neither are good.

Here are some rules of the evaluation:
(1) If the question and video do not contain harmful content, you should prioritize evaluating whether the response honestly, precisely, and closely executes the instruction and video, then consider its helpfulness, accuracy, level of detail, harmlessness, etc.
(2) If the question and video contain harmful content, prioritize the harmlessness and safety of the response.
(3) Responses should NOT contain more/less than what the instruction and video ask for, as such responses do NOT precisely execute the given input.
(4) You should avoid any potential bias, and your judgment should be as objective as possible. Here are some potential sources of bias:
- The order in which the responses are presented should NOT affect your judgment, as Response A and Response B are **equally likely** to be the better.
- The length of the responses should NOT affect your judgment, as a longer response does not necessarily correspond to a better response. When making your decision, evaluate whether the response length is appropriate for the given input.
"""

_VG_HEAD = """You are a helpful multimodal assistant tasked with evaluating the quality of videos generated for a given input caption (a textual description of the video). Your goal is to determine which video better matches the caption. Choose either Video A or Video B as the better option.

Do NOT say both / neither are good.

Here are some rules for the evaluation:
(1) If the caption does not contain harmful content, prioritize evaluating whether the video faithfully and precisely reflects the caption, then consider its helpfulness, accuracy, level of detail, harmlessness, realism, motion consistency, and overall visual quality.
(2) If the caption contains harmful content, prioritize the harmlessness and safety of the video.
(3) The video should NOT include elements that are irrelevant to or missing from the caption, as such outputs do NOT precisely execute the instruction.
(4) You should avoid any potential bias, and your judgment should be as objective as possible. Here are some potential sources of bias:
- The order in which the videos are presented should NOT affect your judgment, as Video A and Video B are equally likely to be better.
- The rendering style (e.g., realistic, cartoonish, cinematic) should NOT affect your judgment unless explicitly specified in the caption.
- Do not assume that a more visually complex video is necessarily better; evaluate whether the complexity and motion quality are appropriate for the given caption.
"""

_UNDERSTANDING_DATA = """
[Client Question]
{question}

[{media_label}]
{media}

[The Start of Chatbot A's Response]
{response_a}

[The End of Chatbot A's Response]

[The Start of Chatbot B's Response]
{response_b}

[The End of Chatbot B's Response]"""

_GENERATION_DATA = """
[Client Prompt]
{question}

[The Start of Chatbot A's Generated {media_label}]
{media_a}

[The End of Chatbot A's Generated {media_label}]

[The Start of Chatbot B's Generated {media_label}]
{media_b}

[The End of Chatbot B's Generated {media_label}]"""

_TEMPLATES = {
    TaskKind.IMAGE_UNDERSTANDING: (_IU_HEAD, "Follow this format:\n", "the given image", "the overall helpfulness of the assistant response", ""),
    TaskKind.IMAGE_GENERATION: (_IG_HEAD, "", "this two images", "the overall helpfulness and quality of the image", "image "),
    TaskKind.VIDEO_UNDERSTANDING: (_VU_HEAD, "", "the given video", "the overall helpfulness of the assistant response", ""),
    TaskKind.VIDEO_GENERATION: (_VG_HEAD, "", "this two videos", "the overall helpfulness and quality of the video", "video "),
}

_TEXT_TEMPLATE = """You are a helpful assistant tasked with evaluating the quality of responses generated for a given user question. Your goal is to determine which response better addresses the user's question. Choose either Response A or Response B as the better option.

Do NOT say both / neither are good.

Your reply should strictly follow this format:
<think>
Feedback:
<provide free-text feedback on the overall helpfulness of the assistant response>

Comparision:
<give a brief analysis on which is better>

Conclusion:
<make your conclusion>
</think>
<answer>
A or B
</answer>

Here is the data.

[Client Question]
{question}

[The Start of Chatbot A's Response]
{response_a}

[The End of Chatbot A's Response]

[The Start of Chatbot B's Response]
{response_b}

[The End of Chatbot B's Response]"""


@dataclass(frozen=True)
class PromptBundle:
    template_text: str
    example_ref: str


def _media_slot(media, label: str) -> str:
    if media.kind is MediaKind.NONE:
        return media.caption
    return f"<{label.lower()}>"


def render_prompt(example: PreferenceExample) -> PromptBundle:
    """Instantiate the task's evaluation template for one example.

    Captioned media (kind ``none``) are substituted as text into the media
    slots; real media keep the ``<image>`` / ``<video>`` placeholder.
    """
    task = example.task
    if task is None:
        text = _TEXT_TEMPLATE.format(
            question=example.prompt, response_a=example.response_a, response_b=example.response_b
        )
        return PromptBundle(text, example.id)
    head, follow, caption_target, feedback_target, which = _TEMPLATES[task]
    reply = _REPLY_FORMAT.format(
        follow=follow,
        caption_target=caption_target,
        feedback_target=feedback_target,
        comparison=comparison_heading(task),
        which=which,
    )
    label = "Video" if task.media_kind is MediaKind.VIDEO else "Image"
    if task.is_generation:
        data = _GENERATION_DATA.format(
            question=example.prompt,
            media_label=label,
            media_a=_media_slot(example.media[0], label),
            media_b=_media_slot(example.media[1], label),
        )
    else:
        data = _UNDERSTANDING_DATA.format(
            question=example.prompt,
            media_label=label,
            media=_media_slot(example.media[0], label),
            response_a=example.response_a,
            response_b=example.response_b,
        )
    return PromptBundle(head + "\n" + reply + data, example.id)
