# Periodic self check of the running enclave against the artifact registry

import datetime as dt
import logging
from typing import Callable, Optional

from apscheduler.schedulers.asyncio import AsyncIOScheduler
from apscheduler.triggers.interval import IntervalTrigger
from pytz import utc

from .enclave import AttestationReport
from .registry import ArtifactRegistry, DriftVerdict
from .utils import run_in_thread_pool

logger = logging.getLogger(__name__)


class DriftWatch:
    def __init__(
        self,
        registry: ArtifactRegistry,
        name: str,
        version: str,
        attest: Callable[[], AttestationReport],
        root_public: bytes,
        interval_minutes: float,
    ):
        self._registry = registry
        self._name = name
        self._version = version
        self._attest = attest
        self._root_public = root_public
        self._interval = interval_minutes
        self.last_verdict: Optional[DriftVerdict] = None
        self._scheduler = AsyncIOScheduler(
            job_defaults={
                "coalesce": True,
                "misfire_grace_time": 300,
                "max_instances": 1,
            },
            timezone=utc,
        )

    async def check_once(self) -> DriftVerdict:
        verdict = await run_in_thread_pool(
            self._registry.check_deployment,
            self._name,
            self._version,
            self._attest(),
            self._root_public,
        )
        self.last_verdict = verdict
        if not verdict.ok:
            logger.warning(
                "Drift watch: {} {} is {}".format(
                    self._name, self._version, verdict.status.value
                )
            )
        return verdict

    def start(self) -> None:
        """Must be called with the event loop running"""
        self._scheduler.add_job(
            self.check_once,
            IntervalTrigger(minutes=self._interval, timezone=utc),
            id="drift-check",
            replace_existing=True,
            next_run_time=dt.datetime.now(tz=utc),
        )
        self._scheduler.start()
        logger.info(
            "Drift watch for {} {} every {} minutes".format(
                self._name, self._version, self._interval
            )
        )

    def shutdown(self) -> None:
        if self._scheduler.running:
            self._scheduler.shutdown(wait=False)
