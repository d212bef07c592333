# Ali-AUG: одношаговый редактор изображений по маске и промпту для аугментации размеченных данных
__version__ = "0.1.0"
