import pytest

from flatcache.digest import DigestInput, root_id, state_id
from flatcache.errors import CorruptionError, UsageError
from flatcache.tree import CacheTree


def sid(parent, text):
    return state_id(parent.state_id, DigestInput("INSTR", text.encode()))


def chain(tree, parent, *texts):
    for text in texts:
        parent = tree.add_node(parent, sid(parent, text), text, f"c{tree.next_seq}")
    return parent


@pytest.fixture
def tree(tmp_path):
    return CacheTree.create("root-commit", tmp_path / "tree")


@pytest.fixture
def fig6(tree):
    """Pull, then a = foo,bar; b = a + baz; c = foo,qux."""
    pull = tree.add_node(tree.root, state_id(root_id(), DigestInput("PULL", b"m")),
                         "PULL alpine:3.17", "c-pull")
    tree.move_label("alpine+3.17", pull)
    a = chain(tree, pull, "RUN echo foo", "RUN echo bar")
    tree.move_label("a", a)
    tree.move_label("b", chain(tree, a, "RUN echo baz"))
    foo = a.parent
    tree.move_label("c", chain(tree, foo, "RUN echo qux"))
    return tree


def test_empty_tree_renders_root_label(tree):
    assert tree.render() == "4A6F\nROOT [root]\n"
    assert len(tree) == 1 and tree.root.state_id == root_id()


def test_pull_shape(tree):
    node = tree.add_node(tree.root, state_id(root_id(), DigestInput("PULL", b"m")),
                         "PULL alpine:3.17", "c1")
    tree.move_label("alpine+3.17", node)
    lines = tree.render().splitlines()
    assert lines[:2] == ["4A6F", "ROOT"]
    assert lines[3] == "  PULL alpine:3.17 [alpine+3.17]"


def test_fig4_shape(tree):
    pull = tree.add_node(tree.root, state_id(root_id(), DigestInput("PULL", b"m")), "PULL x",
                         "c1")
    tip = chain(tree, pull, "RUN echo foo", "RUN echo bar")
    tree.move_label("a", tip)
    assert len(tree) == 4
    assert len(tip.path()) == 4
    dot = tree.render_dot()
    assert dot.count(" -> n") - dot.count("arrowhead=none") == 3
    assert dot.count("fillcolor=gray") == 1


def test_duplicate_child_is_usage_error(tree):
    chain(tree, tree.root, "RUN a")
    with pytest.raises(UsageError, match="cache hit"):
        chain(tree, tree.root, "RUN a")
    tree.add_node(tree.root, sid(tree.root, "RUN a"), "RUN a", "dup", rebuild=True)
    assert len(tree.root.children) == 2


def test_hit_on_shared_node(fig6):
    foo = fig6.labels["a"].parent
    assert fig6.find_hit(foo.state_id, "c") is foo
    assert fig6.find_hit(foo.state_id, "c", rebuild=True) is None


def test_miss_returns_none(fig6):
    assert fig6.find_hit(sid(fig6.root, "RUN nothing"), "a") is None


def test_branch_priority_over_recency(tree):
    old = chain(tree, tree.root, "RUN a")
    tree.move_label("x", old)
    new = tree.add_node(tree.root, old.state_id, "RUN a", "c2", rebuild=True)
    tree.move_label("y", new)
    assert tree.find_hit(old.state_id, "x") is old
    assert tree.find_hit(old.state_id, "y") is new
    # no branch match: most recent wins
    assert tree.find_hit(old.state_id, "z") is new


def test_reachable(fig6):
    assert fig6.reachable() == set(fig6.nodes.values())
    only_c = fig6.reachable(["c"])
    assert {n.instruction_text for n in only_c} == {"ROOT", "PULL alpine:3.17",
                                                   "RUN echo foo", "RUN echo qux"}


def test_rebuild_branch_unreachable_after_move(tree):
    pull = chain(tree, tree.root, "PULL")
    first = chain(tree, pull, "RUN echo foo", "RUN echo bar")
    tree.move_label("a", first)
    second = tree.add_node(pull, first.parent.state_id, "RUN echo foo", "x", rebuild=True)
    second = tree.add_node(second, first.state_id, "RUN echo bar", "y", rebuild=True)
    tree.move_label("a", second)
    dead = set(tree.nodes.values()) - tree.reachable()
    assert dead == {first, first.parent}


def test_remove_nodes(fig6):
    b = fig6.labels["b"]
    with pytest.raises(UsageError, match="labeled"):
        fig6.remove_nodes({b})
    fig6.delete_label("b")
    fig6.remove_nodes({b})
    assert b.seq not in fig6.nodes
    assert fig6.find_hit(b.state_id, None) is None
    with pytest.raises(UsageError, match="surviving children"):
        fig6.remove_nodes({fig6.labels["a"].parent})


def test_persistence_round_trip(fig6, tmp_path):
    loaded = CacheTree.load(tmp_path / "tree")
    assert loaded.render() == fig6.render()
    assert loaded.render_dot() == fig6.render_dot()
    assert loaded.next_seq == fig6.next_seq
    weird = chain(loaded, loaded.root, "RUN printf 'a\\tb\\n'\tx")
    again = CacheTree.load(tmp_path / "tree")
    assert again.nodes[weird.seq].instruction_text == weird.instruction_text


def test_corrupt_index(tmp_path):
    p = tmp_path / "tree"
    p.write_text("garbage\n")
    with pytest.raises(CorruptionError):
        CacheTree.load(p)
    p.write_text("# flatcache tree v1\nN\t1\tzz\t-\tc\tx\n")
    with pytest.raises(CorruptionError):
        CacheTree.load(p)
    with pytest.raises(CorruptionError):
        CacheTree.load(tmp_path / "missing")


def test_multiple_labels_on_one_node(fig6):
    fig6.move_label("also-a", fig6.labels["a"])
    assert "RUN echo bar [a, also-a]" in fig6.render()
