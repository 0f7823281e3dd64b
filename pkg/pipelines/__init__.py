"""
Pipeline entry points.

This package contains the `pudding` CLI, its run configuration, routed
inference and one orchestration function per subcommand.
"""
