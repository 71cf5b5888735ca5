#!/usr/bin/env python3
"""
Command-line entry point for the discharge-letter weak-labelling pipeline
"""
import logging
import os
import sys

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

from wsdiag.routes.pipeline_cli import main  # noqa: E402

if __name__ == "__main__":
    logging.basicConfig(
        level=os.getenv("PIPELINE_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    sys.exit(main())
