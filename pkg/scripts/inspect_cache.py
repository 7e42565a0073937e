#!/usr/bin/env python3
"""
List the artifact cache (pretrained denoisers, Stage-1 teachers, embedders)
and optionally drop entries of one kind
"""

import sys
from datetime import datetime

import click
import pandas as pd

from utils import add_project_to_path

add_project_to_path()

from app import create_app                                   # noqa: E402
from app.models.artifact_cache import ArtifactCache          # noqa: E402
from app.utils.formats import read_named_arrays              # noqa: E402


def cache_table(cache):
    """One row per cached file with the header fields worth checking"""
    rows = []
    for entry in cache.entries():
        _, meta = read_named_arrays(cache.path_for(entry['kind'], entry['key']))
        history = meta.get('history') or []
        rows.append({
            'kind': entry['kind'],
            'key': entry['key'],
            'model': meta.get('kind', '-'),
            'lora_rank': meta.get('lora_rank', 0),
            'final_loss': history[-1] if history else float('nan'),
            'MB': round(entry['bytes'] / 2 ** 20, 2),
            'modified': datetime.fromtimestamp(entry['modified']).strftime('%Y-%m-%d %H:%M'),
        })
    return pd.DataFrame(rows)


@click.command()
@click.option('--env', default=None, help="Runtime configuration name.")
@click.option('--drop', 'drop_kind', default=None, help="Delete every cached file of this kind.")
def main(env, drop_kind):
    runtime = create_app(env)
    cache = ArtifactCache(runtime)
    table = cache_table(cache)
    if table.empty:
        print(f"cache {runtime.CACHE_FOLDER} is empty")
        return 0
    print(table.to_string(index=False))

    if drop_kind:
        victims = [cache.path_for(drop_kind, key) for key in table.loc[table['kind'] == drop_kind, 'key']]
        for path in victims:
            path.unlink()
        cache.invalidate(drop_kind)
        print(f"\n{len(victims)} '{drop_kind}' entries removed")
    return 0


if __name__ == '__main__':
    sys.exit(main())
