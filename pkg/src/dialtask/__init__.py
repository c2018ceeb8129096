"""Task-level further pre-training and fine-tuning for dialogue encoders.

The pipeline has three stages: a general pre-trained encoder (here: a small
reference transformer trained from scratch), task-level further pre-training
on self-supervised objectives derived from unlabeled dialogues (DSP, CRM,
DCV, ENP, DUR, plus MLM), and task-specific fine-tuning on four downstream
tasks (intent recognition, dialogue-act prediction, response selection,
dialogue state tracking).
"""

from dialtask.corpus import (Corpus, Dialogue, RuleBasedAnnotator, Speaker, Split,
                             Utterance, annotate_entities, load_corpus, save_corpus,
                             split_corpus)
from dialtask.downstream import DOWNSTREAM_TASKS, TaskData, load_task_data
from dialtask.encoder import (DialogueEncoder, EncoderConfig, ReferenceEncoder,
                              load_checkpoint, save_checkpoint, tokenize_history,
                              tokenize_utterance)
from dialtask.experiments import (AffinityTable, ExperimentSpec, PretrainSpec,
                                  affinity_overlap, standard_grid, run_matrix)
from dialtask.metrics import (MetricReport, dst_metrics, f1_multilabel,
                              intent_metrics, recall_at_k)
from dialtask.taskgen import GenConfig, PRETRAIN_TASKS, generate
from dialtask.trainer import (TaskModel, TrainConfig, evaluate, finetune,
                              further_pretrain, load_task_model, save_task_model)
from dialtask.vocab import Vocabulary

__version__ = "0.1.0"

__all__ = [
    "Corpus", "Dialogue", "Speaker", "Split", "Utterance", "RuleBasedAnnotator",
    "annotate_entities", "load_corpus", "save_corpus", "split_corpus",
    "DOWNSTREAM_TASKS", "TaskData", "load_task_data",
    "DialogueEncoder", "EncoderConfig", "ReferenceEncoder",
    "load_checkpoint", "save_checkpoint", "tokenize_history", "tokenize_utterance",
    "AffinityTable", "ExperimentSpec", "PretrainSpec", "affinity_overlap",
    "standard_grid", "run_matrix",
    "MetricReport", "dst_metrics", "f1_multilabel", "intent_metrics", "recall_at_k",
    "GenConfig", "PRETRAIN_TASKS", "generate",
    "TaskModel", "TrainConfig", "evaluate", "finetune", "further_pretrain",
    "load_task_model", "save_task_model",
    "Vocabulary",
]
