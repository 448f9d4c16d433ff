"""Bi-level training of Field-of-Experts image priors and MAP denoising."""

from .imaging import add_gaussian_noise, load_pgm, psnr, sample_patches, save_pgm
from .inner import InnerSolveConfig, SolveReport, denoise, minimize_energy
from .linsolve import SingularSystemError, solve_hessian
from .model import (FilterBasis, FoEModel, assemble_filter, build_dct_basis, conv_adjoint,
                    conv_apply, energy, energy_gradient, hessian_apply, hessian_assemble,
                    load_model, rho, rho_prime, rho_second, save_model)
from .trainer import (GradientPack, TrainConfig, TrainingSample, dataset_gradients, loss,
                      sample_gradients, train)

__version__ = "0.1.0"
