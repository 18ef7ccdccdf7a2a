import os
import random
import socket
import subprocess

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

import treegen
from flatcache.digest import DigestInput, root_id, state_id
from flatcache.errors import CorruptionError, LockError, StoreError
from flatcache.meta import ImageMetadata, MetadataManifest
from flatcache.store import Store, snapshot

SID = state_id(root_id(), DigestInput("INSTR", b"RUN test"))


def commit(store, wt, threshold=None, text="RUN test"):
    tree = store.tree
    res = store.commit_state(wt, SID, text, threshold, tree.root.commit_ref)
    node = tree.add_node(tree.root, SID, text, res.commit, rebuild=True)
    return res, node


def git_paths(store, commit_ref):
    out = store.git.text("ls-tree", "-r", "--name-only", "-z", commit_ref)
    return set(filter(None, out.split("\0")))


def test_init_layout(tmp_path):
    s = Store.init(tmp_path / "s")
    for sub in ("bucache", "img", "dlcache", "bularge"):
        assert (tmp_path / "s" / sub).is_dir()
    assert s.tree.render() == "4A6F\nROOT [root]\n"
    again = Store.init(tmp_path / "s")
    assert again.tree.root.commit_ref == s.tree.root.commit_ref


def test_init_refuses_foreign_dir(tmp_path):
    (tmp_path / "junk").mkdir()
    (tmp_path / "junk" / "file").write_text("x")
    with pytest.raises(StoreError, match="reset"):
        Store.init(tmp_path / "junk")
    (tmp_path / "f").write_text("x")
    with pytest.raises(StoreError):
        Store.init(tmp_path / "f")


def test_hardlinks_gitignore_fifo_emptydir(store):
    wt = store.worktree("t")
    wt.path.mkdir(parents=True)
    (wt.path / "one").write_text("shared")
    os.link(wt.path / "one", wt.path / "two")
    (wt.path / ".gitignore").write_text("*\n")
    (wt.path / "a").mkdir()
    os.mkfifo(wt.path / "pipe")
    before = snapshot(wt.path)
    res, node = commit(store, wt)
    assert snapshot(wt.path) == before
    paths = git_paths(store, res.commit)
    assert "one" in paths and "two" not in paths
    assert ".weirdal_ignore" in paths and ".gitignore" not in paths
    assert "pipe" not in paths and not any(p.startswith("a") for p in paths)
    m = res.manifest
    assert m.hardlink_groups == [("one", ["two"])]
    assert m.empty_dirs == ["a"] and m.fifos == ["pipe"]
    assert (wt.path / "one").stat().st_ino == (wt.path / "two").stat().st_ino
    other = store.checkout_state(node, "u")
    assert snapshot(other.path) == before


def test_git_directory_in_image(store):
    wt = store.worktree("t")
    (wt.path / "src" / ".git" / "objects").mkdir(parents=True)
    (wt.path / "src" / ".git" / "HEAD").write_text("ref: x\n")
    before = snapshot(wt.path)
    res, node = commit(store, wt)
    assert "src/.weirdal_/HEAD" in git_paths(store, res.commit)
    assert snapshot(store.checkout_state(node, "u").path) == before
    assert snapshot(wt.path) == before


def test_renamed_prefix_collision(store):
    wt = store.worktree("t")
    wt.path.mkdir(parents=True)
    (wt.path / ".weirdal_x").write_text("")
    with pytest.raises(StoreError, match=".weirdal_"):
        commit(store, wt)


def test_socket_rejected_and_worktree_restored(store, tmp_path):
    wt = store.worktree("t")
    wt.path.mkdir(parents=True)
    (wt.path / "x").write_text("x")
    (wt.path / ".gitkeep").write_text("")
    sock = socket.socket(socket.AF_UNIX)
    path = wt.path / "zz.sock"
    try:
        sock.bind(str(path))
        before = snapshot_without(wt.path, "zz.sock")
        with pytest.raises(StoreError, match="socket"):
            commit(store, wt)
        assert snapshot_without(wt.path, "zz.sock") == before
    finally:
        sock.close()


def snapshot_without(root, name):
    snap = snapshot(root) if not os.path.exists(os.path.join(root, name)) else None
    if snap is None:
        os.rename(os.path.join(root, name), os.path.join(root, name + ".tmp"))
        try:
            return {k: v for k, v in snapshot(root)["entries"].items() if k != name + ".tmp"}
        finally:
            os.rename(os.path.join(root, name + ".tmp"), os.path.join(root, name))
    return snap["entries"]


def test_device_rejected(store):
    wt = store.worktree("t")
    wt.path.mkdir(parents=True)
    try:
        os.mknod(wt.path / "null", 0o600 | 0o020000, os.makedev(1, 3))
    except PermissionError:
        pytest.skip("mknod needs privilege")
    with pytest.raises(StoreError, match="device"):
        commit(store, wt)


def test_large_files_out_of_band(store):
    wt = store.worktree("t")
    wt.path.mkdir(parents=True)
    (wt.path / "big").write_bytes(os.urandom(5000))
    (wt.path / "small").write_bytes(os.urandom(100))
    res, node = commit(store, wt, threshold=4096)
    assert res.hashed["small"] == 100 and "big" not in res.hashed
    assert "big" not in git_paths(store, res.commit)
    assert (wt.path / "big").stat().st_nlink == 2
    other = store.checkout_state(node, "u")
    assert (other.path / "big").stat().st_ino == (wt.path / "big").stat().st_ino
    assert (wt.path / "big").stat().st_nlink == 3


def test_missing_oob_is_corruption(store):
    wt = store.worktree("t")
    wt.path.mkdir(parents=True)
    (wt.path / "big").write_bytes(os.urandom(5000))
    res, node = commit(store, wt, threshold=4096)
    for key in store.large.keys():
        os.unlink(store.large.path(key))
    with pytest.raises(CorruptionError, match="missing"):
        store.checkout_state(node, "u")
    assert any("large file" in p for p in store.validate())


def test_metadata_only_commit(store):
    wt = store.worktree("t")
    wt.path.mkdir(parents=True)
    (wt.path / "f").write_text("f")
    res, node = commit(store, wt)
    meta = ImageMetadata(environment={"A": "1"}, workdir="/x")
    sid = state_id(SID, DigestInput("INSTR", b"ENV A=1"))
    r2 = store.commit_metadata_only(wt, meta, sid, "ENV A=1", res.commit)
    diff = store.git.text("diff-tree", "--name-only", "-r", res.commit, r2.commit).split()
    assert diff == ["ch/metadata.json"]
    assert store.read_metadata(r2.commit) == meta


def test_manifest_version_checked():
    with pytest.raises(CorruptionError):
        MetadataManifest.loads(b"flatcache-git-meta 99\n")


def test_lock_contention(store):
    code = ("import sys, time; from flatcache.store import Store; "
            "s = Store(sys.argv[1]);\n"
            "with s.lock():\n print('held', flush=True); time.sleep(30)")
    proc = subprocess.Popen(["python3", "-c", code, str(store.dir)], stdout=subprocess.PIPE,
                            text=True)
    try:
        assert proc.stdout.readline().strip() == "held"
        with pytest.raises(LockError, match=f"PID {proc.pid}"):
            with store.lock(timeout=0.2):
                pass
    finally:
        proc.kill()
        proc.wait()
    with store.lock(timeout=1):
        pass


def test_compact_on_fresh_store(store):
    r = store.compact()
    assert r.bytes_before > 0 and r.nodes_removed == 0
    assert store.validate() == []


@pytest.mark.parametrize("seed", range(10))
def test_round_trip_seeds(store, seed):
    wt = store.worktree("t")
    treegen.random_tree(wt.path, random.Random(seed), big=seed % 3)
    before = snapshot(wt.path)
    res, node = commit(store, wt, threshold=60000)
    assert snapshot(wt.path) == before
    assert snapshot(store.checkout_state(node, "u").path) == before


@settings(max_examples=25, deadline=None,
          suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(0, 2**32))
def test_round_trip_property(store, seed):
    name = f"p{seed}"
    wt = store.worktree(name)
    treegen.random_tree(wt.path, random.Random(seed))
    before = snapshot(wt.path)
    res, node = commit(store, wt)
    assert snapshot(wt.path) == before
    assert snapshot(store.checkout_state(node, name + "-out").path) == before
    store.delete_image(name)
