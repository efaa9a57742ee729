"""Structural checks shared by the tree tests and the acceptance suite."""

import math

from entropy_tree.tree import DecodingTree, collect_leaves


def root_to_leaf_paths(tree: DecodingTree):
    paths = []
    stack = [[tree.root]]
    while stack:
        path = stack.pop()
        node = path[-1]
        if node.is_leaf and node is not tree.root:
            paths.append(path)
        for child in reversed(node.children):
            stack.append(path + [child])
    return paths


def check_tree(tree: DecodingTree) -> None:
    cfg = tree.config
    eos = tree.vocab.eos_id
    nodes = list(tree.nodes())
    leaves = collect_leaves(tree)
    branched = [n for n in nodes if n.branched]

    # leaf budget and budget arithmetic
    assert 1 <= len(leaves) <= cfg.n_tree
    if branched:
        assert len(leaves) >= 2
    assert len(leaves) == 1 + sum(len(n.children) - 1 for n in branched)

    # node shape and gate soundness
    for n in nodes:
        if n.branched:
            assert 2 <= len(n.children) <= cfg.b
            toks = [c.token for c in n.children]
            assert len(set(toks)) == len(toks)
            for c in n.children:
                assert c.entropy >= cfg.tau
                assert c.importance is None or c.importance >= cfg.delta
        else:
            assert len(n.children) <= 1
        for c in n.children:
            assert c.depth == n.depth + 1
        if n.token is not None and not n.is_leaf:
            assert n.token != eos

    # revert to sampling once the budget is used
    if len(leaves) == cfg.n_tree:
        assert tree.budget_serial is not None
    if tree.budget_serial is not None:
        for n in nodes:
            if n.serial >= tree.budget_serial:
                assert not n.branched
            if n.branched:
                assert all(c.serial < tree.budget_serial for c in n.children)

    # breadth-first creation order
    by_serial = sorted(nodes, key=lambda n: n.serial)
    assert all(a.depth <= b.depth for a, b in zip(by_serial, by_serial[1:]))

    # leaves: finish reasons, token paths, log-probabilities
    paths = root_to_leaf_paths(tree)
    assert len(paths) == len(leaves)
    for leaf, path in zip(leaves, paths):
        assert leaf.tokens == tuple(n.token for n in path[1:])
        assert abs(leaf.cum_logprob - math.fsum(n.logprob for n in path[1:])) <= 1e-9
        assert leaf.cum_logprob <= 0
        assert leaf.length == len(leaf.tokens) >= 1
        assert leaf.finish_reason in ("eos", "max_tokens")
        if leaf.finish_reason == "eos":
            assert leaf.tokens[-1] == eos
        else:
            assert leaf.length == cfg.max_tokens and leaf.tokens[-1] != eos

    # prefix sharing: token paths agree up to the lowest common ancestor, then differ
    for i in range(len(paths)):
        for j in range(i + 1, len(paths)):
            a, b = paths[i], paths[j]
            lca = 0
            while lca + 1 < min(len(a), len(b)) and a[lca + 1] is b[lca + 1]:
                lca += 1
            ta, tb = leaves[i].tokens, leaves[j].tokens
            assert ta[:lca] == tb[:lca]
            assert a[lca].branched
            assert ta[lca] != tb[lca]
