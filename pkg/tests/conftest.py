import pytest

from moelab.activation_stats import ActivationLog
from moelab.experiment import evaluate_model
from moelab.model import ModelConfig
from moelab.tasks import TaskSpec, generate_dataset
from moelab.training import TrainConfig, train

#: Reference training setup: the desk-scale default model on the modular
#: addition task, seed 0. Trained once per session and shared. Modulus 7
#: wraps the digit-sum classes into disjoint arcs, which keeps the task from
#: collapsing into a linearly separable shortcut.
REFERENCE_TASK = TaskSpec(kind="modular_sum", param=7, seed=7)
REFERENCE_TRAIN = TrainConfig(steps=5000, learning_rate=0.5, batch_size=16, seed=0)


class TrainedBundle:
    def __init__(self, result, task, eval_set, baseline_log, baseline, outputs,
                 train_seconds):
        self.result = result
        self.model = result.model
        self.task = task
        self.eval_set = eval_set
        self.baseline_log = baseline_log
        self.baseline = baseline
        self.baseline_outputs = outputs
        self.train_seconds = train_seconds


@pytest.fixture(scope="session")
def trained_bundle():
    """Default-config model trained on modular_sum plus its clean-run eval."""
    import time

    data = generate_dataset(REFERENCE_TASK, 1024, split="train")
    t0 = time.perf_counter()
    result = train(ModelConfig(), data, REFERENCE_TRAIN)
    train_seconds = time.perf_counter() - t0
    eval_set = generate_dataset(REFERENCE_TASK, 256, split="eval")
    log = ActivationLog.empty(
        result.model.config.num_layers, result.model.config.num_experts
    )
    outputs, baseline, _ = evaluate_model(result.model, eval_set, recorder=log)
    return TrainedBundle(
        result, REFERENCE_TASK, eval_set, log, baseline, outputs, train_seconds
    )


@pytest.fixture(scope="session")
def micro_model():
    """Small untrained model for mechanical tests."""
    from moelab.model import init_model

    config = ModelConfig(
        num_layers=2, num_experts=4, top_k=2, d_model=8, d_ff=16,
        vocab_size=32, max_seq_len=16,
    )
    return init_model(config, seed=11)
