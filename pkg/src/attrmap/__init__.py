"""Residual network with per-block pooled taps, a linear multi-attribute head,
and attribute activation maps."""
from .data import Manifest, Sample, SynthSpec, hflip, load_manifest, save_manifest, split, synth_generate
from .evaluation import EvalReport, evaluate, spearman_rho
from .maps import AttributeMap, cam, grad_cam, render_overlay, upsample_bilinear
from .model import ForwardCache, TapNet, TapNetConfig, load, save
from .names import ATTRIBUTES
from .train import TrainConfig, TrainLog, fit, optimizer_step, train_epoch

__version__ = "0.1.0"
