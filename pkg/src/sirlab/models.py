#!/usr/bin/env python3
"""models.py: run catalogue for sirlab"""

import datetime
from typing import Optional

from sqlalchemy import DateTime, Float, Integer, String, select
from sqlalchemy.orm import DeclarativeBase, Mapped, Session, mapped_column

RUN_STATUSES = ("running", "ok", "failed")


class Base(DeclarativeBase):
    pass


class RunRecord(Base):
    """One CLI run: what was run, where its artifacts went, how it ended"""

    __tablename__ = "run"
    __table_args__ = ({"sqlite_autoincrement": True},)

    id: Mapped[int] = mapped_column(primary_key=True)
    command: Mapped[str] = mapped_column(String(16), index=True)
    config_path: Mapped[Optional[str]] = mapped_column(String, nullable=True)
    seed: Mapped[int] = mapped_column(Integer, default=0)
    output_dir: Mapped[str] = mapped_column(String, unique=True)
    version: Mapped[str] = mapped_column(String(64))
    started_at: Mapped[datetime.datetime] = mapped_column(DateTime)
    finished_at: Mapped[Optional[datetime.datetime]] = mapped_column(
        DateTime, nullable=True
    )
    status: Mapped[str] = mapped_column(String(8), default="running", index=True)
    psnr: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    total_nfe: Mapped[Optional[int]] = mapped_column(Integer, nullable=True)
    message: Mapped[Optional[str]] = mapped_column(String, nullable=True)

    def __repr__(self):
        return (
            f"<RunRecord(id={self.id}, command='{self.command}', "
            f"status='{self.status}', output_dir='{self.output_dir}')>"
        )

    @property
    def duration_s(self) -> Optional[float]:
        if self.finished_at is None:
            return None
        return (self.finished_at - self.started_at).total_seconds()

    @classmethod
    def by_output_dir(cls, session: Session, output_dir: str) -> Optional["RunRecord"]:
        """query table by output directory"""
        stmt = select(cls).where(cls.output_dir == output_dir)
        return session.execute(stmt).scalar_one_or_none()
