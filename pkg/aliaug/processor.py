import re
from pathlib import Path
from typing import List, Optional, Sequence

import torch
from tqdm import tqdm

from .config import GeneratorConfig, derive_seed
from .dataset import to_storage_range
from .generator import AliAugGenerator
from .models import GenerationResult, Pairing, Provenance, SampleRecord


class GenerationProcessor:
    """Пакетная генерация по записям манифеста; ошибки собираются по записям, а не выбрасываются."""

    def __init__(self, generator: AliAugGenerator, cfg: Optional[GeneratorConfig] = None):
        self.generator = generator
        self.cfg = cfg or GeneratorConfig()

    def process_record(
        self,
        record: SampleRecord,
        seed: int = 0,
        input_override: Optional[torch.Tensor] = None,
        mask_only: bool = False,
        record_id: Optional[str] = None,
    ) -> GenerationResult:
        output_id = self.sanitize_record_id(record_id or f"{record.record_id}_gen")
        try:
            source = record
            if mask_only:
                source = record.model_copy(
                    update={"input_image": None, "input_path": None, "pairing": Pairing.MASK_ONLY}
                )
                input_override = None
            image = self.generator.generate(source, self.cfg, seed=seed, input_override=input_override)
            if not torch.isfinite(image).all():
                raise ValueError("Генератор вернул нечисловые значения")

            generated = SampleRecord(
                record_id=output_id,
                mask=record.mask,
                mask_path=record.mask_path,
                prompt=record.prompt,
                target_image=to_storage_range(image),
                pairing=Pairing.MASK_ONLY,
                label=record.label,
                provenance=Provenance.SYNTHETIC,
            )
            return GenerationResult(record_id=output_id, success=True, record=generated)

        except Exception as e:
            return GenerationResult(record_id=output_id, success=False, error=f"{record.record_id}: {e}")

    def process_batch(
        self,
        records: Sequence[SampleRecord],
        seed: int = 0,
        mask_only: bool = False,
        verbose: bool = True,
    ) -> List[GenerationResult]:
        results = []
        for index, record in enumerate(tqdm(records, desc="generate", disable=not verbose)):
            results.append(self.process_record(record, seed=derive_seed(seed, index), mask_only=mask_only))

        failed = [r for r in results if not r.success]
        if verbose and failed:
            print(f"⚠️  Не удалось сгенерировать {len(failed)} из {len(results)} записей")
            for result in failed[:5]:
                print(f"   ❌ {result.error}")
        return results

    @staticmethod
    def sanitize_record_id(record_id: str) -> str:
        if not record_id:
            return "unnamed_record"
        record_id = Path(str(record_id)).name
        record_id = re.sub(r'[<>:"/\\|?*\x00-\x1f\s]', "_", record_id).strip(". ")
        return record_id or "unnamed_record"
