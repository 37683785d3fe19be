"""Persistence: posterior binary codec, the artifact store, joint cache,
surface CSVs, and dataset JSON."""

import numpy as np
import pytest

from mergeview import (
    ArtifactStore,
    ChecksumError,
    GaussianPosterior,
    GridMismatchError,
    JointCache,
    MissingArtifactError,
    MixturePosterior,
    PosteriorArtifact,
    PreviewSurface,
    Provenance,
    StoreError,
    TrainerConfig,
    VersionMismatchError,
    load_surface_csv,
    make_synthetic_digits,
    save_surface_csv,
    simplex_grid,
)
from mergeview.store import (
    decode_posterior,
    encode_posterior,
    load_dataset_json,
    load_json,
    save_dataset_json,
    save_json,
)


def _prov(task_id="t1", seed=0, notes=()):
    return Provenance(
        task_id, TrainerConfig(method="von_full", seed=seed), 1.25, tuple(notes)
    )


def _rand_gauss(rng, dim, layout):
    m = rng.normal(size=dim)
    if layout == "diag":
        return GaussianPosterior(m, rng.uniform(0.5, 2.0, size=dim))
    a = rng.normal(size=(dim, dim))
    return GaussianPosterior(m, a @ a.T + dim * np.eye(dim))


def _artifact(kind, rng, dim=5, k=3):
    if kind == "point":
        return PosteriorArtifact("point", rng.normal(size=dim), _prov())
    if kind == "gaussian_diag":
        return PosteriorArtifact("gaussian_diag", _rand_gauss(rng, dim, "diag"), _prov())
    if kind == "gaussian_full":
        return PosteriorArtifact("gaussian_full", _rand_gauss(rng, dim, "full"), _prov())
    w = rng.uniform(0.5, 1.5, size=k)
    mix = MixturePosterior(w / w.sum(), tuple(_rand_gauss(rng, dim, "full") for _ in range(k)))
    return PosteriorArtifact("mixture", mix, _prov())


class TestPosteriorCodec:
    @pytest.mark.parametrize(
        "kind", ["point", "gaussian_diag", "gaussian_full", "mixture"]
    )
    def test_round_trip_bitwise(self, kind):
        rng = np.random.default_rng(0)
        art = _artifact(kind, rng)
        back = decode_posterior(encode_posterior(art), art.provenance)
        assert back.kind == art.kind
        if kind == "point":
            assert np.array_equal(back.payload, art.payload)
        elif kind == "mixture":
            assert np.array_equal(back.payload.weights, art.payload.weights)
            for a, b in zip(art.payload.components, back.payload.components):
                assert np.array_equal(a.mean, b.mean)
                assert np.array_equal(a.precision, b.precision)
        else:
            assert np.array_equal(back.payload.mean, art.payload.mean)
            assert np.array_equal(back.payload.precision, art.payload.precision)

    def test_large_mixture_preserves_component_order(self):
        rng = np.random.default_rng(1)
        art = _artifact("mixture", rng, dim=3, k=30)
        back = decode_posterior(encode_posterior(art), art.provenance)
        assert len(back.payload.components) == 30
        means = [c.mean[0] for c in art.payload.components]
        assert [c.mean[0] for c in back.payload.components] == means

    def test_encoding_is_deterministic(self):
        rng1, rng2 = np.random.default_rng(2), np.random.default_rng(2)
        a = encode_posterior(_artifact("mixture", rng1))
        b = encode_posterior(_artifact("mixture", rng2))
        assert a == b

    def test_bad_magic(self):
        rng = np.random.default_rng(3)
        blob = bytearray(encode_posterior(_artifact("point", rng)))
        blob[0] ^= 0xFF
        with pytest.raises(StoreError, match="magic"):
            decode_posterior(bytes(blob), _prov())

    def test_future_version_rejected(self):
        rng = np.random.default_rng(4)
        blob = bytearray(encode_posterior(_artifact("point", rng)))
        blob[8] = 99  # format version field
        with pytest.raises(VersionMismatchError):
            decode_posterior(bytes(blob), _prov())

    def test_truncated_body(self):
        rng = np.random.default_rng(5)
        blob = encode_posterior(_artifact("gaussian_full", rng))
        with pytest.raises(StoreError):
            decode_posterior(blob[:-8], _prov())

    def test_truncated_header(self):
        with pytest.raises(StoreError, match="truncated"):
            decode_posterior(b"MRGP", _prov())


class TestArtifactStore:
    def test_save_load_round_trip(self, tmp_path):
        store = ArtifactStore(tmp_path)
        rng = np.random.default_rng(6)
        art = _artifact("gaussian_full", rng)
        store.save("exp", art, method="von_full")
        back = store.load("exp", "t1", "von_full", 0)
        assert np.array_equal(back.payload.mean, art.payload.mean)
        assert back.provenance == art.provenance

    def test_provenance_notes_survive(self, tmp_path):
        store = ArtifactStore(tmp_path)
        art = PosteriorArtifact(
            "point", np.arange(3.0), _prov(notes=("precision_floored",))
        )
        store.save("exp", art, method="gd")
        assert store.load("exp", "t1", "gd", 0).provenance.notes == (
            "precision_floored",
        )

    def test_missing_artifact(self, tmp_path):
        store = ArtifactStore(tmp_path)
        with pytest.raises(MissingArtifactError):
            store.load("exp", "nope", "gd", 0)

    def test_corrupted_payload_detected(self, tmp_path):
        store = ArtifactStore(tmp_path)
        rng = np.random.default_rng(7)
        path = store.save("exp", _artifact("point", rng), method="gd")
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            store.load("exp", "t1", "gd", 0)

    def test_sidecar_version_checked(self, tmp_path):
        store = ArtifactStore(tmp_path)
        rng = np.random.default_rng(8)
        path = store.save("exp", _artifact("point", rng), method="gd")
        sidecar = load_json(path.with_suffix(".json"))
        sidecar["format_version"] = 0
        save_json(path.with_suffix(".json"), sidecar)
        with pytest.raises(VersionMismatchError):
            store.load("exp", "t1", "gd", 0)

    def test_exists_and_index(self, tmp_path):
        store = ArtifactStore(tmp_path)
        rng = np.random.default_rng(9)
        store.save("exp", _artifact("point", rng), method="gd")
        assert store.exists("exp", "t1", "gd", 0)
        assert not store.exists("exp", "t1", "gd", 1)
        idx = store.index("exp")
        assert len(idx) == 1
        assert idx[0]["task_id"] == "t1" and idx[0]["method"] == "gd"
        assert store.index("other") == []

    def test_hostile_ids_stay_inside_store(self, tmp_path):
        store = ArtifactStore(tmp_path)
        path = store.path_for("exp", "../../etc/passwd", "gd", 0)
        assert tmp_path in path.parents

    def test_resave_overwrites_identically(self, tmp_path):
        store = ArtifactStore(tmp_path)
        rng1, rng2 = np.random.default_rng(10), np.random.default_rng(10)
        p1 = store.save("exp", _artifact("mixture", rng1), method="m")
        first = p1.read_bytes()
        p2 = store.save("exp", _artifact("mixture", rng2), method="m")
        assert p1 == p2 and p2.read_bytes() == first


class TestJointCache:
    def test_miss_returns_none(self, tmp_path):
        assert JointCache(tmp_path).get("ab" + "0" * 62) is None

    def test_put_get_bitwise(self, tmp_path):
        cache = JointCache(tmp_path)
        theta = np.random.default_rng(11).normal(size=17)
        key = "cd" + "1" * 62
        cache.put(key, theta)
        assert np.array_equal(cache.get(key), theta)

    def test_survives_reopen(self, tmp_path):
        key = "ef" + "2" * 62
        JointCache(tmp_path).put(key, np.arange(4.0))
        assert np.array_equal(JointCache(tmp_path).get(key), np.arange(4.0))


def _surface(grid, metrics, iterations=None):
    n = len(grid)
    return PreviewSurface(
        grid=grid,
        method="stub",
        thetas=tuple(None for _ in range(n)),
        metrics=np.asarray(metrics, dtype=float),
        iterations=np.asarray(iterations if iterations is not None else np.arange(n)),
        converged=np.ones(n, dtype=bool),
    )


class TestSurfaceCsv:
    def test_round_trip_bitwise(self, tmp_path):
        grid = simplex_grid(3, 0.2)
        rng = np.random.default_rng(12)
        surface = _surface(grid, rng.normal(size=len(grid)))
        path = tmp_path / "s.csv"
        save_surface_csv(path, surface)
        back = load_surface_csv(path, method="stub")
        assert np.array_equal(back.metrics, surface.metrics)
        assert np.array_equal(back.iterations, surface.iterations)
        assert back.grid.counts == grid.counts

    def test_shuffled_rows_reload_identically(self, tmp_path):
        grid = simplex_grid(3, 0.25)
        rng = np.random.default_rng(13)
        surface = _surface(grid, rng.normal(size=len(grid)))
        path = tmp_path / "s.csv"
        save_surface_csv(path, surface)
        lines = path.read_text().strip().split("\n")
        body = lines[1:]
        rng.shuffle(body)
        shuffled = tmp_path / "shuffled.csv"
        shuffled.write_text("\n".join([lines[0]] + body) + "\n")
        back = load_surface_csv(shuffled)
        assert np.array_equal(back.metrics, surface.metrics)

    def test_wrong_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("alpha_1,alpha_2,value\n1.0,0.0,3.0\n")
        with pytest.raises(StoreError, match="header"):
            load_surface_csv(path)

    def test_missing_row_rejected(self, tmp_path):
        grid = simplex_grid(2, 0.5)
        path = tmp_path / "s.csv"
        save_surface_csv(path, _surface(grid, [0.1, 0.2, 0.3]))
        lines = path.read_text().strip().split("\n")
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(GridMismatchError, match="rows"):
            load_surface_csv(path)

    def test_duplicate_row_rejected(self, tmp_path):
        grid = simplex_grid(2, 0.5)
        path = tmp_path / "s.csv"
        save_surface_csv(path, _surface(grid, [0.1, 0.2, 0.3]))
        lines = path.read_text().strip().split("\n")
        lines[1] = lines[2]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(GridMismatchError, match="duplicate"):
            load_surface_csv(path)

    def test_off_lattice_weight_rejected(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text(
            "alpha_1,alpha_2,metric,iterations,converged\n"
            "0.0,1.0,0.1,1,1\n0.37,0.63,0.2,1,1\n1.0,0.0,0.3,1,1\n"
        )
        with pytest.raises(GridMismatchError):
            load_surface_csv(path)


class TestDatasetJson:
    def test_round_trip(self, tmp_path):
        data = make_synthetic_digits(seed=3, per_class=5, d=6, eval_per_class=2)
        path = tmp_path / "data.json"
        save_dataset_json(path, data)
        back = load_dataset_json(path)
        assert np.array_equal(back.features, data.features)
        assert np.array_equal(back.labels, data.labels)
        assert np.array_equal(back.eval_features, data.eval_features)
        assert back.split == data.split
        assert back.fingerprint() == data.fingerprint()

    def test_unknown_schema(self, tmp_path):
        path = tmp_path / "data.json"
        save_json(path, {"schema": "mergeview.dataset/99"})
        with pytest.raises(StoreError, match="schema"):
            load_dataset_json(path)
