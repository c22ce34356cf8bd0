"""
SQLite storage for experiment reports.
"""

import json
import logging
import sqlite3
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from .models import INDEXES_SQL, MODULE_RESULTS_SCHEMA_SQL, RUNS_SCHEMA_SQL

logger = logging.getLogger(__name__)

MODULE_COLUMNS = (
    'deadline_ms', 'completed', 'missed', 'dropped', 'samples', 'miss_rate',
    'latency_mean', 'latency_std', 'latency_p99', 'timeout',
)


class ReportStore:
    """SQLite store of experiment runs and their per-module results."""

    def __init__(self, db_path: str):
        """
        Open (and create if needed) the report database.

        Args:
            db_path: Path to SQLite database file
        """
        self.db_path = Path(db_path)
        self.conn = None
        self._connect()
        self._initialize_schema()

    def _connect(self):
        logger.debug(f"Connecting to database: {self.db_path}")
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self.conn = sqlite3.connect(str(self.db_path))
        self.conn.row_factory = sqlite3.Row

    def _initialize_schema(self):
        cursor = self.conn.cursor()
        cursor.execute(RUNS_SCHEMA_SQL)
        cursor.execute(MODULE_RESULTS_SCHEMA_SQL)
        for index_sql in INDEXES_SQL:
            cursor.execute(index_sql)
        self.conn.commit()

    def insert_report(self, report: Dict[str, Any], recorded_at: Optional[datetime] = None) -> str:
        """
        Store one experiment report, replacing an earlier run with the same id.

        Args:
            report: Report document as written to `.report.json`
            recorded_at: Timestamp of the run (defaults to now)

        Returns:
            The run id
        """
        if recorded_at is None:
            recorded_at = datetime.now()

        energy = report.get('energy', {})
        shares = energy.get('shares', {})
        run = {
            'run_id': report['run_id'],
            'app': report['app'],
            'stage': report['stage'],
            'profile': report.get('profile'),
            'seed': report['seed'],
            'horizon_ms': report['horizon_ms'],
            'policy': report.get('policy'),
            'makespan': report.get('makespan'),
            'overall_miss_rate': report.get('overall_miss_rate'),
            'starved_count': len(report.get('starved', [])),
            'starved': json.dumps(report.get('starved', [])),
            'total_energy_mj': energy.get('total_mj'),
            'gpu_share': shares.get('GPU', 0.0),
            'dla_share': shares.get('DLA', 0.0),
            'cpu_share': shares.get('CPU', 0.0),
            'average_power_w': energy.get('average_power_w'),
            'candidates': report.get('candidates', 0),
            'recorded_at': recorded_at.isoformat(timespec='seconds'),
        }

        columns = list(run)
        sql = f"""
            INSERT OR REPLACE INTO runs ({','.join(columns)})
            VALUES ({','.join('?' for _ in columns)})
        """
        cursor = self.conn.cursor()
        cursor.execute(sql, [run[c] for c in columns])

        cursor.execute("DELETE FROM module_results WHERE run_id = ?", (run['run_id'],))
        for module, stats in sorted(report.get('modules', {}).items()):
            values = [run['run_id'], module]
            for column in MODULE_COLUMNS:
                value = stats.get(column)
                values.append(int(value) if isinstance(value, bool) else value)
            cursor.execute(
                f"INSERT INTO module_results (run_id, module, {','.join(MODULE_COLUMNS)}) "
                f"VALUES ({','.join('?' for _ in values)})",
                values,
            )
        self.conn.commit()

        logger.debug(f"Stored run {run['run_id']}")
        return run['run_id']

    def get_run(self, run_id: str) -> Optional[Dict[str, Any]]:
        """Run row plus its module rows (under 'modules'), or None."""
        cursor = self.conn.cursor()
        cursor.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,))
        row = cursor.fetchone()
        if row is None:
            return None
        run = dict(row)
        run['starved'] = json.loads(run['starved'] or '[]')
        cursor.execute("SELECT * FROM module_results WHERE run_id = ? ORDER BY module", (run_id,))
        run['modules'] = [dict(r) for r in cursor.fetchall()]
        return run

    def get_stats(self, app: Optional[str] = None) -> Dict[str, Any]:
        """
        Aggregate statistics over stored runs.

        Args:
            app: Optional application to filter by

        Returns:
            Statistics dictionary
        """
        where_clause = ""
        params = []
        if app:
            where_clause = "WHERE app = ?"
            params.append(app)

        sql = f"""
            SELECT
                COUNT(*) as total_runs,
                COUNT(DISTINCT app) as app_count,
                COUNT(DISTINCT stage) as stage_count,
                COUNT(*) FILTER (WHERE overall_miss_rate = 0) as clean_runs,
                COUNT(*) FILTER (WHERE starved_count > 0) as starving_runs,
                AVG(overall_miss_rate) as avg_miss_rate,
                AVG(total_energy_mj) as avg_energy_mj,
                AVG(average_power_w) as avg_power_w,
                MIN(recorded_at) as first_run,
                MAX(recorded_at) as last_run
            FROM runs
            {where_clause}
        """
        cursor = self.conn.cursor()
        cursor.execute(sql, params)
        row = cursor.fetchone()
        return dict(row) if row else {}

    def execute_query(self, sql: str, params: tuple = ()) -> List[Dict[str, Any]]:
        """
        Execute a custom SQL query.

        Args:
            sql: SQL query string
            params: Query parameters

        Returns:
            List of result dictionaries
        """
        cursor = self.conn.cursor()
        cursor.execute(sql, params)
        return [dict(row) for row in cursor.fetchall()]

    def close(self):
        if self.conn:
            self.conn.close()
            self.conn = None
            logger.debug("Database connection closed")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()
