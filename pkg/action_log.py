import sys
from datetime import datetime

import pandas as pd
from tqdm import tqdm

# Audit trail of (timestamp, level, message) tuples for the current process
ACTION_LOG = []

LEVELS = ("debug", "info", "warning", "error")


def log_action(message, level="info"):
    """Audit logging with timestamps"""
    if level not in LEVELS:
        level = "info"
    timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    ACTION_LOG.append((timestamp, level, message))
    if level != "debug":
        tqdm.write(f"[{timestamp}] {level.upper()}: {message}", file=sys.stderr)


def log_warning(message):
    log_action(message, level="warning")


def action_log_frame():
    """Return the audit trail as a DataFrame"""
    return pd.DataFrame(ACTION_LOG, columns=["Timestamp", "Level", "Action"])


def export_action_log(path):
    """Write the audit trail to CSV (used at the end of every CLI run)"""
    action_log_frame().to_csv(path, index=False)
    return path


def clear_action_log():
    ACTION_LOG.clear()
