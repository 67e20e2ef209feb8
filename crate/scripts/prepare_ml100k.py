#!/usr/bin/env python3
"""Prepare MovieLens-100k in the tab-separated layout read by `sain`.

The raw files are taken from the copy of ml-100k bundled in the RecBole wheel
on PyPI (the GroupLens host is often unreachable from CI sandboxes). Pass
--from-dir to convert an existing GroupLens `ml-100k/` directory instead.

Output (default data/ml-100k/):
  ratings.tsv          user, item, rating, timestamp
  user_gender.tsv      user, M|F
  user_age.tsv         user, age bucket (1, 18, 25, 35, 45, 50, 56)
  user_occupation.tsv  user, occupation
  item_genre.tsv       item, pipe-separated genres
  dataset.toml         dataset manifest
  run_sain.toml, run_biasedmf.toml
"""

import argparse
import glob
import os
import subprocess
import sys
import tempfile
import zipfile

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]
AGE_BUCKETS = [1, 18, 25, 35, 45, 50, 56]


def age_bucket(age):
    bucket = AGE_BUCKETS[0]
    for b in AGE_BUCKETS:
        if age >= b:
            bucket = b
    return bucket


def from_recbole(tmp):
    subprocess.check_call([
        sys.executable, "-m", "pip", "download", "recbole==1.2.1",
        "--no-deps", "-q", "-d", tmp,
    ])
    wheel = glob.glob(os.path.join(tmp, "recbole-*.whl"))[0]
    prefix = "recbole/dataset_example/ml-100k/ml-100k."
    with zipfile.ZipFile(wheel) as z:
        read = lambda ext: z.read(prefix + ext).decode("utf-8").splitlines()[1:]
        inter = [l.split("\t") for l in read("inter")]
        users = [l.split("\t") for l in read("user")]
        items = [l.split("\t") for l in read("item")]
    ratings = [(u, i, r, t.split(".")[0]) for u, i, r, t in inter]
    user_rows = [(u, int(a), g, o) for u, a, g, o, _zip in users]
    item_rows = [(row[0], row[3].split(" ") if row[3] else []) for row in items]
    return ratings, user_rows, item_rows


def from_grouplens(path):
    ratings = []
    with open(os.path.join(path, "u.data"), encoding="latin-1") as f:
        for line in f:
            u, i, r, t = line.rstrip("\n").split("\t")
            ratings.append((u, i, r, t))
    user_rows = []
    with open(os.path.join(path, "u.user"), encoding="latin-1") as f:
        for line in f:
            u, a, g, o, _zip = line.rstrip("\n").split("|")
            user_rows.append((u, int(a), g, o))
    item_rows = []
    with open(os.path.join(path, "u.item"), encoding="latin-1") as f:
        for line in f:
            cols = line.rstrip("\n").split("|")
            flags = cols[5:24]
            item_rows.append((cols[0], [g for g, b in zip(GENRES, flags) if b == "1"]))
    return ratings, user_rows, item_rows


def write(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write("\t".join(str(c) for c in row) + "\n")


DATASET = """\
ratings = "ratings.tsv"
min_ratings = 5
tag_top_t = 50

[[features]]
field = "gender"
owner = "user"
path = "user_gender.tsv"
kind = "closed"

[[features]]
field = "age"
owner = "user"
path = "user_age.tsv"
kind = "closed"

[[features]]
field = "occupation"
owner = "user"
path = "user_occupation.tsv"
kind = "closed"

[[features]]
field = "genre"
owner = "item"
path = "item_genre.tsv"
kind = "closed"
"""

RUN = """\
dataset = "dataset.toml"
model = "{model}"
output_dir = "../../runs/ml100k-{model}"

[train]
seed = 2019
"""


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "ml-100k"))
    ap.add_argument("--from-dir", help="existing GroupLens ml-100k directory")
    args = ap.parse_args()

    if args.from_dir:
        ratings, users, items = from_grouplens(args.from_dir)
    else:
        with tempfile.TemporaryDirectory() as tmp:
            ratings, users, items = from_recbole(tmp)

    os.makedirs(args.out, exist_ok=True)
    write(os.path.join(args.out, "ratings.tsv"), ratings)
    write(os.path.join(args.out, "user_gender.tsv"), [(u, g) for u, _a, g, _o in users])
    write(os.path.join(args.out, "user_age.tsv"), [(u, age_bucket(a)) for u, a, _g, _o in users])
    write(os.path.join(args.out, "user_occupation.tsv"), [(u, o) for u, _a, _g, o in users])
    write(os.path.join(args.out, "item_genre.tsv"), [(i, "|".join(g)) for i, g in items])
    with open(os.path.join(args.out, "dataset.toml"), "w") as f:
        f.write(DATASET)
    for model in ("sain", "biasedmf"):
        with open(os.path.join(args.out, f"run_{model}.toml"), "w") as f:
            f.write(RUN.format(model=model))
    print(f"wrote {len(ratings)} ratings, {len(users)} users, {len(items)} items to {args.out}")


if __name__ == "__main__":
    main()
