import pytest
import torch

from aliaug.models import (
    DatasetManifest,
    DownstreamMetrics,
    Pairing,
    PromptVocabulary,
    SampleRecord,
)
from tests.conftest import make_record


def test_vocabulary_prompt_ids_follow_order():
    """Тест: prompt_id равен индексу строки словаря."""
    vocabulary = PromptVocabulary(prompts=["add scratch", "add hole", "no defect"])
    assert vocabulary.prompt("add hole").prompt_id == 1
    assert "no defect" in vocabulary
    assert len(vocabulary) == 3


def test_vocabulary_unknown_prompt():
    vocabulary = PromptVocabulary(prompts=["add scratch"])
    with pytest.raises(KeyError):
        vocabulary.prompt("add dent")


def test_vocabulary_rejects_duplicates():
    with pytest.raises(ValueError):
        PromptVocabulary(prompts=["add scratch", "add scratch"])


def test_vocabulary_extended_keeps_existing_ids():
    vocabulary = PromptVocabulary(prompts=["add scratch", "no defect"])
    extended = vocabulary.extended(["add crack", "add scratch", "add crack"])
    assert extended.prompts == ["add scratch", "no defect", "add crack"]


def test_manifest_rejects_duplicate_ids():
    """Тест: id записей в манифесте уникальны."""
    record = make_record("same")
    with pytest.raises(ValueError, match="same"):
        DatasetManifest(records=[record, record])


def test_display_image_prefers_target():
    record = make_record("r0", pairing=Pairing.MASK_ONLY)
    assert record.input_image is None
    assert torch.equal(record.display_image, record.target_image)
    assert record.is_defect


def test_display_image_without_images():
    record = SampleRecord(
        record_id="empty",
        mask=torch.zeros(1, 16, 16),
        prompt=make_record("x").prompt,
        pairing=Pairing.MASK_ONLY,
        label="scratch",
    )
    with pytest.raises(ValueError):
        _ = record.display_image


def test_downstream_metrics_as_dict():
    metrics = DownstreamMetrics(precision=0.5, recall=1.0, accuracy=0.75, mask_iou=0.25)
    assert metrics.as_dict() == {"precision": 0.5, "recall": 1.0, "accuracy": 0.75, "mask_iou": 0.25}
