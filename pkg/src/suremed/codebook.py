"""Fixed finding codebook (CheXbert 14-label order) and label integer codes."""

FINDINGS: tuple[str, ...] = (
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
    "No Finding",
)

N_LABELS = 14
N_PATHOLOGIES = 13
NO_FINDING = 13

# integer codes used in corpus files
CODE_NEGATIVE = -1
CODE_ABSENT = 0
CODE_POSITIVE = 1
CODE_UNCERTAIN = 2

assert len(FINDINGS) == N_LABELS


def finding_index(name: str) -> int:
    """Case-insensitive lookup of a finding name."""
    lowered = name.lower()
    for i, f in enumerate(FINDINGS):
        if f.lower() == lowered:
            return i
    raise KeyError(name)
