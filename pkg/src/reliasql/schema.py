"""Database schema with prose descriptions, rendered for prompts."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

from reliasql.core import ValidationError

SHIPPED_CATALOG = "ehrsql_mimic_iv.json"


class RenderFormat(enum.Enum):
    NATURAL_LANGUAGE = "natural_language"
    DDL = "ddl"

    @classmethod
    def parse(cls, value: "str | RenderFormat") -> "RenderFormat":
        if isinstance(value, cls):
            return value
        aliases = {"nl": cls.NATURAL_LANGUAGE, "natural": cls.NATURAL_LANGUAGE, "sql": cls.DDL}
        value = str(value).lower()
        if value in aliases:
            return aliases[value]
        return cls(value)


@dataclass(frozen=True)
class ColumnInfo:
    name: str
    sql_type: str
    description: str = ""
    example_values: tuple[str, ...] = ()


@dataclass(frozen=True)
class ForeignKey:
    column: str
    ref_table: str
    ref_column: str


@dataclass(frozen=True)
class TableInfo:
    name: str
    description: str
    columns: tuple[ColumnInfo, ...]
    primary_key: Optional[str] = None
    foreign_keys: tuple[ForeignKey, ...] = ()

    def column(self, name: str) -> Optional[ColumnInfo]:
        key = name.lower()
        for col in self.columns:
            if col.name.lower() == key:
                return col
        return None

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]


@dataclass(frozen=True)
class SchemaCatalog:
    tables: tuple[TableInfo, ...]
    dialect: str = "sqlite"
    _by_name: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        by_name: dict[str, TableInfo] = {}
        for table in self.tables:
            key = table.name.lower()
            if not table.name:
                raise ValidationError("table name must be non-empty")
            if key in by_name:
                raise ValidationError(f"duplicate table {table.name!r}")
            by_name[key] = table
            seen = set()
            for col in table.columns:
                if not col.name:
                    raise ValidationError(f"{table.name}: empty column name")
                if col.name.lower() in seen:
                    raise ValidationError(f"{table.name}: duplicate column {col.name!r}")
                seen.add(col.name.lower())
        object.__setattr__(self, "_by_name", by_name)
        for table in self.tables:
            if table.primary_key and table.column(table.primary_key) is None:
                raise ValidationError(f"{table.name}: primary key {table.primary_key!r} is not a column")
            for fk in table.foreign_keys:
                ref = f"{table.name}.{fk.column} -> {fk.ref_table}.{fk.ref_column}"
                if table.column(fk.column) is None:
                    raise ValidationError(f"dangling foreign key {ref}: no local column {fk.column!r}")
                target = by_name.get(fk.ref_table.lower())
                if target is None:
                    raise ValidationError(f"dangling foreign key {ref}: no table {fk.ref_table!r}")
                if target.column(fk.ref_column) is None:
                    raise ValidationError(f"dangling foreign key {ref}: no column {fk.ref_column!r}")

    def __len__(self) -> int:
        return len(self.tables)

    def table(self, name: str) -> Optional[TableInfo]:
        return self._by_name.get(name.lower())

    def canonical(self, name: str) -> Optional[str]:
        table = self.table(name)
        return table.name if table else None

    @property
    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def all_column_names(self) -> set[str]:
        return {c.name.lower() for t in self.tables for c in t.columns}

    @classmethod
    def from_json(cls, doc: dict) -> "SchemaCatalog":
        tables = []
        for t in doc["tables"]:
            columns = tuple(
                ColumnInfo(
                    name=c["name"],
                    sql_type=c.get("type", "TEXT"),
                    description=c.get("description", ""),
                    example_values=tuple(str(v) for v in c.get("examples", ())),
                )
                for c in t["columns"]
            )
            fks = tuple(
                ForeignKey(fk["column"], fk["ref_table"], fk["ref_column"])
                for fk in t.get("foreign_keys", ())
            )
            tables.append(TableInfo(t["name"], t.get("description", ""), columns, t.get("primary_key"), fks))
        dialect = doc.get("dialect", "sqlite")
        if dialect != "sqlite":
            raise ValidationError(f"unsupported dialect {dialect!r}")
        return cls(tuple(tables), dialect)


def load_catalog(path: str | Path | None = None) -> SchemaCatalog:
    """Load a JSON catalog descriptor; ``None`` loads the shipped EHRSQL one."""
    if path is None:
        text = resources.files("reliasql").joinpath("data", SHIPPED_CATALOG).read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return SchemaCatalog.from_json(json.loads(text))


def _ddl(table: TableInfo) -> str:
    lines = [f"  {c.name} {c.sql_type}" for c in table.columns]
    if table.primary_key:
        lines.append(f"  PRIMARY KEY ({table.primary_key})")
    for fk in table.foreign_keys:
        lines.append(f"  FOREIGN KEY ({fk.column}) REFERENCES {fk.ref_table}({fk.ref_column})")
    return f"CREATE TABLE {table.name} (\n" + ",\n".join(lines) + "\n);"


def render_brief(catalog: SchemaCatalog, format: RenderFormat = RenderFormat.NATURAL_LANGUAGE) -> str:
    format = RenderFormat.parse(format)
    if format is RenderFormat.DDL:
        return "\n\n".join(_ddl(t) for t in catalog.tables)
    blocks = [
        f"{t.name}: {t.description}\ncolumns: {', '.join(t.column_names)}" for t in catalog.tables
    ]
    return "\n".join(blocks)


def render_detailed(catalog: SchemaCatalog, tables: Iterable[str]) -> str:
    """Column-level detail for the requested tables, in catalog order."""
    wanted = {name.lower() for name in tables}
    unknown = sorted(n for n in wanted if catalog.table(n) is None)
    if unknown:
        raise KeyError(f"unknown tables: {', '.join(unknown)}")
    blocks = []
    for table in catalog.tables:
        if table.name.lower() not in wanted:
            continue
        lines = [f"{table.name}: {table.description}"]
        for col in table.columns:
            line = f"  {col.name} ({col.sql_type}): {col.description}"
            if col.example_values:
                line += "; e.g. " + ", ".join(col.example_values)
            lines.append(line)
        if table.primary_key:
            lines.append(f"  primary key: {table.primary_key}")
        for fk in table.foreign_keys:
            lines.append(f"  foreign key: {fk.column} -> {fk.ref_table}.{fk.ref_column}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def load_template(name: str, templates_dir: str | Path | None = None) -> str:
    if templates_dir is not None:
        candidate = Path(templates_dir) / name
        if candidate.exists():
            return candidate.read_text("utf-8")
    return resources.files("reliasql").joinpath("templates", name).read_text("utf-8")
