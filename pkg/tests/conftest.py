import pytest
import torch

torch.set_num_threads(1)  # fixed reduction order keeps runs reproducible

# filled by test_acceptance, printed in the terminal summary
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if ok else "FAIL"
        line = f"{status}  {name}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_corpus():
    from genret.synthgen import SynthConfig, generate, split

    corpus = generate(
        SynthConfig(
            n_videos=80,
            facets_per_video=3,
            d_f=32,
            facet_noise=0.05,
            queries_per_facet=4,
            min_angle_deg=60.0,
            seed=11,
            split_fraction=0.5,
        )
    )
    train_v, train_q, test_v, test_q = split(corpus, 0.5, 11)
    return {
        "corpus": corpus,
        "train_videos": train_v,
        "train_queries": train_q,
        "test_videos": test_v,
        "test_queries": test_q,
    }


@pytest.fixture(scope="session")
def small_trained(small_corpus):
    from genret.cotrain import TrainConfig, train

    cfg = TrainConfig(
        n_views=3,
        m_layers=2,
        codebook_size=16,
        d_z=16,
        hidden=32,
        batch_size=128,
        learning_rate=3e-3,
        align_epochs=2,
        later_align_epochs=1,
        train_epochs=3,
        seed=3,
    )
    return train(cfg, small_corpus["train_videos"], small_corpus["train_queries"])
