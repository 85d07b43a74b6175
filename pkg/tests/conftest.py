import functools

import pytest

from tracelift import cfg, corpus, structure, trace, vm


@functools.lru_cache(maxsize=None)
def program(name):
    return corpus.program(name)


@functools.lru_cache(maxsize=None)
def merged_trace(name):
    p = program(name)
    return trace.merge([vm.run(p, i, tracing=True).traces for i in corpus.inputs(name)])


@functools.lru_cache(maxsize=None)
def expanded(name, strategy):
    p = program(name)
    return cfg.expand(cfg.build_cfg(merged_trace(name), p), p, strategy)


@functools.lru_cache(maxsize=None)
def structured(name, strategy):
    return structure.structure(expanded(name, strategy))


@pytest.fixture(params=corpus.names())
def corpus_name(request):
    return request.param


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
