import os

import pytest
from hypothesis import given, settings, strategies as st

from flatcache.digest import (
    DEFAULT_EXCLUDED, DigestContext, DigestInput, FileStatSummary, StateID, digest_input_for,
    pull_input, root_id, state_id, stat_summaries,
)
from flatcache.errors import BuildError, UsageError
from flatcache.recipe import parse

# Frozen outputs of coreutils md5sum over the framed byte strings, e.g.
#   printf '\x4a\x6f...\x61\x00INSTR\x00RUN echo foo\x00' | md5sum
GOLDEN = {
    ("INSTR", b"RUN echo foo"): "41546c943e258a9dd2020c3491d9c3ca",
    ("INSTR", b"ARG FOO=bar"): "282ce6b33a04df0b08f91c9f9420d50c",
    ("PULL", b"{}"): "21f7f748675110c3a1ca5e251a67d8a2",
}


def test_root_constant():
    assert root_id().hex == "4a6f73c3a92043617061626c616e6361"
    assert root_id().abbrev == "4A6F"
    assert root_id() == root_id()


@pytest.mark.parametrize("key", list(GOLDEN))
def test_golden_ids(key):
    kind, payload = key
    assert state_id(root_id(), DigestInput(kind, payload)).hex == GOLDEN[key]


def test_root_kind_rejected():
    with pytest.raises(UsageError):
        state_id(root_id(), DigestInput("ROOT"))


def test_state_id_is_128_bits():
    sid = state_id(root_id(), DigestInput("INSTR", b"RUN true"))
    assert len(sid.raw) == 16 and len(sid.hex) == 32
    assert StateID.from_hex(sid.hex) == sid


def test_parent_matters():
    a = state_id(root_id(), DigestInput("INSTR", b"RUN a"))
    b = state_id(root_id(), DigestInput("INSTR", b"RUN b"))
    x = DigestInput("INSTR", b"RUN echo foo")
    assert state_id(a, x) != state_id(b, x)


def _input(line, **ctx):
    return digest_input_for(parse(line)[0], DigestContext(**ctx))


def test_arg_payloads():
    assert _input("ARG FOO=bar").payload == b"ARG FOO=bar"
    assert _input("ARG HTTP_PROXY=http://p:3128").payload == b"ARG HTTP_PROXY"
    assert _input("ENV no_proxy=localhost").payload == b"ENV no_proxy"
    assert _input("ARG FOO").payload == b"ARG FOO"
    assert _input("ARG FOO=bar", excluded=frozenset({"FOO"})).payload == b"ARG FOO"


def test_default_excluded_set():
    assert {"HTTP_PROXY", "https_proxy", "NO_PROXY", "SSH_AUTH_SOCK"} <= DEFAULT_EXCLUDED


def test_from_and_ignored_not_digested():
    ins = parse("FROM alpine\nLABEL a=b\nRUN true\n")
    ctx = DigestContext()
    assert digest_input_for(ins[0], ctx) is None
    assert digest_input_for(ins[1], ctx) is None
    assert digest_input_for(ins[2], ctx) == DigestInput("INSTR", b"RUN true")


def test_copy_serialization(tmp_path):
    (tmp_path / "d" / "sub").mkdir(parents=True)
    (tmp_path / "d" / "b").write_text("bb")
    (tmp_path / "d" / "sub" / "a").write_text("a")
    os.symlink("b", tmp_path / "d" / "link")
    for p in ("d/b", "d/sub/a", "d/link", "d/sub", "d"):
        os.utime(tmp_path / p, ns=(5, 1_000_000_007), follow_symlinks=False)
    os.chmod(tmp_path / "d" / "b", 0o640)
    din = _input("COPY d /x/", context_dir=tmp_path)
    lines = din.extra.split(b"\n")[:-1]
    assert [ln.split(b"\0")[0] for ln in lines] == [b"d", b"d/b", b"d/link", b"d/sub",
                                                      b"d/sub/a"]
    assert lines[1] == b"d/b\0regular\x00640\x002\x001000000007"
    assert lines[2].split(b"\0")[1] == b"symlink"


def test_copy_missing_source(tmp_path):
    with pytest.raises(BuildError, match="not found: nope"):
        _input("COPY nope /", context_dir=tmp_path)
    with pytest.raises(BuildError, match="outside context"):
        _input("COPY ../x /", context_dir=tmp_path)


def test_copy_content_only_change_keeps_id(tmp_path):
    f = tmp_path / "f"
    f.write_text("aaaa")
    st0 = f.stat()
    before = _input("COPY f /", context_dir=tmp_path)
    f.write_text("bbbb")
    os.utime(f, ns=(st0.st_atime_ns, st0.st_mtime_ns))
    assert _input("COPY f /", context_dir=tmp_path) == before
    os.chmod(f, 0o600)
    assert _input("COPY f /", context_dir=tmp_path) != before


def test_summary_sorting_is_bytewise(tmp_path):
    for name in ("B", "a", "_", "a.b", "a-b"):
        (tmp_path / name).write_text("x")
    got = [s.path for s in stat_summaries(tmp_path, ["B", "a", "_", "a.b", "a-b"])]
    assert got == sorted(got, key=str.encode)


def test_serialize_format():
    s = FileStatSummary("p", "regular", 0o755, 3, 42)
    assert s.serialize() == b"p\0regular\x00755\x003\x0042\n"


@given(st.binary(max_size=64))
def test_pull_ignores_reference(manifest):
    # the same bytes under any name give the same ID; the name is never an input
    assert state_id(root_id(), pull_input(manifest)) == state_id(root_id(), pull_input(manifest))


@settings(max_examples=100)
@given(st.binary(min_size=1, max_size=64), st.data())
def test_pull_bit_flip_changes_id(manifest, data):
    bit = data.draw(st.integers(0, len(manifest) * 8 - 1))
    flipped = bytearray(manifest)
    flipped[bit // 8] ^= 1 << (bit % 8)
    assert state_id(root_id(), pull_input(manifest)) != \
        state_id(root_id(), pull_input(bytes(flipped)))


@given(st.sampled_from(sorted(DEFAULT_EXCLUDED)), st.text(alphabet="abc:/.0", max_size=12),
       st.text(alphabet="abc:/.0", max_size=12))
def test_excluded_values_never_matter(name, v1, v2):
    a = _input(f"ARG {name}={v1}" if v1 else f"ARG {name}")
    b = _input(f"ARG {name}={v2}" if v2 else f"ARG {name}")
    assert a == b
