"""Procedural scenes of coloured shapes with unambiguous referring phrases."""
from .augment import AugmentParams, apply_augmentation, augment, sample_params
from .dataset import GroundingSample, generate_dataset, generate_scene, sample_rng
from .io import manifest_hash, read_dataset, read_ppm, write_dataset
from .render import downsample_mask, mask_tight_box
from .scene import (COLORS, KINDS, PAD_ID, RELATIONS, SIZES, UNK_ID, VOCAB, Description, Phrase, SceneConfig,
                    SceneObject, match, relation_holds)
