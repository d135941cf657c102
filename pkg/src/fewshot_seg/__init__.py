"""Few-shot segmentation with region-prototype pseudo labels and an online fg/bg classifier."""

from .clustering import HierarchicalPrototypes, PrototypeHierarchy, SphericalKMeans, build_hierarchy, kmeans
from .data import SyntheticDataset, SyntheticDatasetConfig, generate_synthetic_dataset, sample_episodes
from .evaluation import EvalReport, compute_miou
from .models import load_checkpoint, save_checkpoint, tiny_encoder
from .pseudo_labels import PseudoLabelStack, assign_pseudo_labels
from .regions import RegionMap, RegionSegmenter, SegConfig, segment_regions
from .srofb import FewShotSegmenter, OFBClassifier, RefineConfig, segment_episode
from .training import LossWeights, TrainConfig, train_baseline, train_spfl
from .pipeline import PipelineConfig, run_pipeline

__version__ = "0.1.0"
