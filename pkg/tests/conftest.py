import pytest

from trajcast import neuralnet, pipeline, simgen


@pytest.fixture(scope="session")
def quick_model():
    """A briefly trained model: good enough to track routes, fast enough for unit tests."""
    seqs = []
    for i, kind in enumerate(simgen.ROUTE_TYPES * 2):
        route = simgen.generate(simgen.archetype_spec(kind, 100 + i))
        seqs += pipeline.route_sequences(route, f"quick{i}")
    params, _ = neuralnet.train(seqs, neuralnet.TrainConfig(batch_size=128, epochs=20, lr=3e-3),
                                neuralnet.ModelConfig(), seed=0)
    return params


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict line; all lines are repeated in the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
