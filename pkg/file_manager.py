import csv
import logging
import os
import shutil
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

Schema = Tuple[str, int, Sequence[str]]


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class CsvWriter:
    """CSV file whose first line is ``# schema=<name> version=<n>``, then the column header."""

    def __init__(self, path, schema: Schema):
        self.path = Path(path)
        self.name, self.version, self.columns = schema
        self.rows_written = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = open(self.path, "w", newline="", encoding="utf-8")
        self._handle.write(f"# schema={self.name} version={self.version}\n")
        self._writer = csv.writer(self._handle, lineterminator="\n")
        self._writer.writerow(self.columns)

    def write_row(self, row: Sequence):
        if len(row) != len(self.columns):
            raise ValueError(f"{self.name}: expected {len(self.columns)} fields, got {len(row)}")
        self._writer.writerow([_format(v) for v in row])
        self.rows_written += 1

    def write_rows(self, rows: Iterable[Sequence]):
        for row in rows:
            self.write_row(row)

    def close(self):
        if not self._handle.closed:
            self._handle.close()
            logging.info(f"{self.path}에 {self.rows_written}개 행 저장 완료")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class FileManager:
    """출력 디렉토리 및 CSV 파일 관리 클래스"""

    @staticmethod
    def ensure_dir(path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        return path

    @staticmethod
    def run_dir(out_dir, command: str, clean: bool = False) -> Path:
        """명령별 출력 디렉토리 생성"""
        path = Path(out_dir) / command
        if clean and path.exists():
            shutil.rmtree(path)
            logging.info(f"이전 결과 삭제: {path}")
        return FileManager.ensure_dir(path)

    @staticmethod
    def write_csv(path, schema: Schema, rows: Iterable[Sequence]) -> Path:
        with CsvWriter(path, schema) as writer:
            writer.write_rows(rows)
        return Path(path)

    @staticmethod
    def read_csv(path, schema: Schema | None = None) -> Tuple[str, int, List[Dict[str, str]]]:
        """CSV 파일 읽기 (스키마 이름, 버전, 행)"""
        if not os.path.exists(path):
            raise FileNotFoundError(f"CSV file not found: {path}")
        with open(path, newline="", encoding="utf-8") as f:
            first = f.readline().strip()
            if not first.startswith("# schema="):
                raise ValueError(f"{path}: missing schema line")
            tags = dict(part.split("=", 1) for part in first[2:].split())
            name, version = tags.get("schema", ""), int(tags.get("version", "0"))
            reader = csv.DictReader(f)
            rows = list(reader)
            if schema is not None:
                expected_name, expected_version, columns = schema
                if (name, version) != (expected_name, expected_version) or reader.fieldnames != list(columns):
                    raise ValueError(f"{path}: schema {name} v{version} does not match {expected_name} v{expected_version}")
        return name, version, rows
