"""Distance-kernel cost ratio and database add+query throughput."""

import json

from irloc.bench import bench_database, bench_distances


if __name__ == "__main__":
    print(json.dumps({"distances": bench_distances().as_dict(), "database": bench_database().as_dict()}, indent=2))
