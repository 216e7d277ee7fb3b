"""Prompt templates for report rewriting, reasoning synthesis and translation, plus reply extraction."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

from .errors import ExtractionMiss, InvalidInputError
from .types import Stage


@dataclass(frozen=True)
class PromptTemplate:
    stage: Stage
    text: str
    # placeholder name -> literal token as it appears in the text
    placeholders: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, token in self.placeholders.items():
            if token not in self.text:
                raise InvalidInputError(f"{self.stage.value} template has no {token} for placeholder {name}")

    @property
    def names(self) -> List[str]:
        return list(self.placeholders)

    def _token_pattern(self) -> "re.Pattern[str]":
        tokens = sorted(self.placeholders.values(), key=len, reverse=True)
        return re.compile("|".join(re.escape(t) for t in tokens))

    def render(self, **values: str) -> str:
        missing = [name for name in self.placeholders if name not in values]
        if missing:
            raise InvalidInputError(f"{self.stage.value} template: unbound placeholder(s) {', '.join(missing)}")
        by_token = {token: str(values[name]) for name, token in self.placeholders.items()}
        return self._token_pattern().sub(lambda m: by_token[m.group(0)], self.text)

    def match(self, prompt: str) -> Optional[Dict[str, str]]:
        """Recover placeholder values from a rendered prompt, or None if it is not this template."""
        names = {token: name for name, token in self.placeholders.items()}
        parts: List[str] = []
        seen = set()
        position = 0
        for m in self._token_pattern().finditer(self.text):
            parts.append(re.escape(self.text[position: m.start()]))
            name = names[m.group(0)]
            parts.append(f"(?P={name})" if name in seen else f"(?P<{name}>.*?)")
            seen.add(name)
            position = m.end()
        parts.append(re.escape(self.text[position:]))
        found = re.fullmatch("".join(parts), prompt, flags=re.DOTALL)
        return found.groupdict() if found else None


REWRITE_TEMPLATE = PromptTemplate(
    Stage.REWRITE,
    """You are an expert radiologists. And your task is to paraphrase a given radiology report. 
You need to:
1. Take the following 3 examples for style of writing.
2. You MUST NOT change any meaning of the original report, nor add or remove any information, not event correction.
3. Give out the paraphrased report directly, without any other content.
4. In English only.

Here are some examples of CT reports:
{SOME EXAMPLES OF DATASETS}

The original report:
```
{}
```""",
    {"style_examples": "{SOME EXAMPLES OF DATASETS}", "report": "{}"},
)

QUESTIONS_TEMPLATE = PromptTemplate(
    Stage.QUESTIONS,
    """Here is a medical radiology report for a CT image.
```
{report}
```

Imagine you are assessing a student who is looking at a CT image, you are going to ask a list of questions. Don't mention the report, just list out as the form of questions, and questions only, in sequenced list.""",
    {"report": "{report}"},
)

ANSWER_TEMPLATE = PromptTemplate(
    Stage.ANSWERS,
    """You are a radiology medicine expert.
Your task is to answer the following radiology medicine question, using the patient's medical record report provided below.
When writing your thought process, imagine you are directly reviewing the patient's radiology images (do not mention the report), and describe your logical reasoning step by step as an expert would.
Then, provide your final, correct answer to the question.
Your response will be used to guide and improve the training of a multimodal large language model for radiology medicine images.
And here is the radiology report that you can see:
```
{report}
```

Now we have a question:
```
{question}
```

Please consider and answer the question in the following format:

Thinking: <thought process>

Answer: <answer to the question>""",
    {"report": "{report}", "question": "{question}"},
)

FILTER_TEMPLATE = PromptTemplate(
    Stage.FILTER,
    """You are an expert in radiology. Now you are reviewing a some questions and answers made by another expert.
You need to determine if the question is proper for a radiology exam, and the answer is correct.

If the question is proper for a radiology exam, and the answer is correct, return "Yes".
If the question is not proper for a radiology exam, or the answer is incorrect, return "No".
Do not return anything else.

The Report:
```
{report}
```
Question: {question}
Answer: {answer}""",
    {"report": "{report}", "question": "{question}", "answer": "{answer}"},
)

REFINE_TEMPLATE = PromptTemplate(
    Stage.REFINE,
    """Help me edit the narrative below:
- If the narrative refers to a report, you change it as if you see it from the radiology image
- Edit only the places mentioned above, leave all other text the same 
- Do not add/remove/change any other information
- Directly output the result text

**The narrative:**
```
{report}
```""",
    {"thinking": "{report}"},
)

FUSE_TEMPLATE = PromptTemplate(
    Stage.FUSE,
    """ou are a radiology medicine expert. Now you are looking at a radiology image.
Here is your self talk when viewing the image:
```
{thinking_before}
```

Please paraphrase the self talk text and output it as **thinking progress**. Remember:
- Do not add/remove/alter any information
- Mind the coherence and fluence of output
- Deductions are prefered
- Directly output the result text

Your output:""",
    {"thinking_before": "{thinking_before}"},
)

TRANSLATE_TEMPLATE = PromptTemplate(
    Stage.TRANSLATE,
    """This is an {source_lang} to {target_lang} translation, please provide the {target_lang} translation for this text. \\
Do not provide any explanations or text apart from the translation.
{source_lang}: {source_input}""",
    {"source_lang": "{source_lang}", "target_lang": "{target_lang}", "source_input": "{source_input}"},
)

TEMPLATES: Tuple[PromptTemplate, ...] = (
    REWRITE_TEMPLATE,
    QUESTIONS_TEMPLATE,
    ANSWER_TEMPLATE,
    FILTER_TEMPLATE,
    REFINE_TEMPLATE,
    FUSE_TEMPLATE,
    TRANSLATE_TEMPLATE,
)

# As printed alongside the question prompt; "[\^\n]" is a class of caret or newline.
QUESTION_PATTERN_AS_PRINTED = r".*?\d\. ?([\^\n]*)"
QUESTION_PATTERN = r".*?\d\. ?([^\n]*)"
THINKING_PATTERN = r"Thinking: ?([^\n]*)"
ANSWER_PATTERN = r"Answer: ?([^\n]*)"

_QUESTION_RE = re.compile(QUESTION_PATTERN)
_THINKING_RE = re.compile(THINKING_PATTERN)
_ANSWER_RE = re.compile(ANSWER_PATTERN)


def identify(prompt: str) -> Optional[Tuple[PromptTemplate, Dict[str, str]]]:
    for template in TEMPLATES:
        values = template.match(prompt)
        if values is not None:
            return template, values
    return None


def extract_questions(reply: str) -> List[str]:
    """Apply the question pattern to each line on its own; blank captures are dropped."""
    questions = []
    for line in reply.split("\n"):
        found = _QUESTION_RE.match(line)
        if found and found.group(1).strip():
            questions.append(found.group(1).strip())
    return questions


def extract_thinking_answer(reply: str) -> Tuple[str, str]:
    thinking = _THINKING_RE.search(reply)
    answer = _ANSWER_RE.search(reply)
    if not thinking or not thinking.group(1).strip():
        raise ExtractionMiss("reply has no Thinking: line", reply)
    if not answer or not answer.group(1).strip():
        raise ExtractionMiss("reply has no Answer: line", reply)
    return thinking.group(1).strip(), answer.group(1).strip()
