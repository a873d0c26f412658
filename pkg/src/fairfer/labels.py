"""Label vocabularies shared by every module."""

EXPRESSIONS = ("neutral", "happiness", "sadness", "surprise", "fear", "anger", "disgust")
AGE_GROUPS = ("children", "adults", "elderly")
AGE_SOURCES = ("ground_truth", "estimated")
SPLITS = ("train", "val", "test")

EXPRESSION_INDEX = {name: i for i, name in enumerate(EXPRESSIONS)}
GROUP_INDEX = {name: i for i, name in enumerate(AGE_GROUPS)}

# Common spellings found in public FER datasets; "contempt" is deliberately absent.
EXPRESSION_ALIASES = {
    "neutral": "neutral",
    "happy": "happiness",
    "happiness": "happiness",
    "joy": "happiness",
    "sad": "sadness",
    "sadness": "sadness",
    "surprise": "surprise",
    "surprised": "surprise",
    "fear": "fear",
    "fearful": "fear",
    "afraid": "fear",
    "anger": "anger",
    "angry": "anger",
    "disgust": "disgust",
    "disgusted": "disgust",
}


def canonical_expression(label):
    """Map a raw label onto the seven-class vocabulary, or None if it has no place there."""
    if label is None:
        return None
    return EXPRESSION_ALIASES.get(str(label).strip().lower())


def age_group_of(age_years):
    """Bin an age in years: <18 children, 18 to <60 adults, 60+ elderly."""
    age = float(age_years)
    if age != age or age < 0:
        raise ValueError(f"age must be a non-negative number, got {age_years!r}")
    if age < 18:
        return "children"
    if age < 60:
        return "adults"
    return "elderly"
