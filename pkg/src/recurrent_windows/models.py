"""Peewee ORM models - the run ledger kept next to each output directory."""

from __future__ import annotations

from datetime import datetime, timezone
from pathlib import Path

from peewee import (
    AutoField,
    CharField,
    DateTimeField,
    FloatField,
    ForeignKeyField,
    IntegerField,
    Model,
    SqliteDatabase,
    TextField,
)

LEDGER_FILENAME = "ledger.db"

# Deferred: bound to <output_dir>/ledger.db by init_db().
database = SqliteDatabase(None, pragmas={
    'journal_mode': 'wal',
    'cache_size': -16 * 1000,  # 16MB
    'foreign_keys': 1,
})


class BaseModel(Model):
    """Base model with database binding."""

    class Meta:
        database = database


class Run(BaseModel):
    """One train/eval/sweep invocation."""

    id = AutoField()
    name = CharField()
    command = CharField()  # train, eval, sweep
    seed = IntegerField(default=0)
    config_toml = TextField(null=True)
    status = CharField(default='running')  # running, success, failed
    best_val_nll = FloatField(null=True)
    started_at = DateTimeField(default=lambda: datetime.now(timezone.utc))
    finished_at = DateTimeField(null=True)
    wallclock_ms = FloatField(null=True)
    notes = TextField(null=True)

    class Meta:
        table_name = 'runs'


class TrainStep(BaseModel):
    """One optimizer step of a training run."""

    id = AutoField()
    run = ForeignKeyField(Run, backref='steps', on_delete='CASCADE')
    step = IntegerField(index=True)
    tokens_seen = IntegerField()
    lr = FloatField()
    train_nll = FloatField()
    val_nll = FloatField(null=True)
    wallclock_ms = FloatField(null=True)

    class Meta:
        table_name = 'train_steps'


class EvalRow(BaseModel):
    """One evaluation report (a CSV row) produced by eval or sweep."""

    id = AutoField()
    run = ForeignKeyField(Run, backref='eval_rows', on_delete='CASCADE')
    model = CharField()
    mode = CharField()  # baseline, recurrent
    window = IntegerField()
    overlap = IntegerField()
    ppl_token = FloatField()
    ppl_word = FloatField()
    flops_per_token = FloatField()
    scored_tokens = IntegerField()
    scored_words = IntegerField()

    class Meta:
        table_name = 'eval_rows'


# All models for table creation
ALL_MODELS = [Run, TrainStep, EvalRow]


def init_db(path: Path) -> None:
    """Bind the ledger to ``path`` and create tables."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not database.is_closed() and database.database != str(path):
        database.close()
    database.init(str(path))
    database.connect(reuse_if_open=True)
    database.create_tables(ALL_MODELS, safe=True)


def close_db() -> None:
    """Close database connection."""
    if not database.is_closed():
        database.close()
