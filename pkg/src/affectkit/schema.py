"""Label vocabularies and sentinel values shared across modules."""

MTL_CLASSES = ("Neutral", "Anger", "Disgust", "Fear", "Happiness", "Sadness", "Surprise", "Other")
LSD_CLASSES = ("Anger", "Disgust", "Fear", "Happiness", "Sadness", "Surprise")
AU_NAMES = ("au1", "au2", "au4", "au6", "au7", "au10", "au12", "au15", "au23", "au24", "au25", "au26")

VA_UNLABELED = -5.0
EXPR_UNLABELED = -1
AU_UNLABELED = -1

TASKS = ("mtl", "lsd")


def class_names(task: str) -> tuple[str, ...]:
    if task == "mtl":
        return MTL_CLASSES
    if task == "lsd":
        return LSD_CLASSES
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def num_classes(task: str) -> int:
    return len(class_names(task))
