"""Gaussian mixture copulas over flow marginals for irregular multivariate time series."""
from .univariate import Gmm1dParams, IcdfSolverError, gmm_cdf, gmm_icdf, gmm_icdf_grads, gmm_pdf
from .latent import LatentGmmParams, marginalize, mixture_logpdf, sample_latent
from .data import Dataset, ImtsInstance, ToySpec, collate, gen_imts, gen_toy, load_imts, save_imts, toy_dataset
from .flow import MarginalFlow
from .copula import CopulaModel, JointModel, infer_latent_params, joint_loglik, sample_joint
from .training import TrainConfig, grad_check, njnll_loss, train, train_copula, train_marginal
from .config import ModelConfig, build_model

__version__ = "0.1.0"
