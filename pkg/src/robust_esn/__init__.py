"""Robust polynomial state feedback combined with an ESN inverse-model controller."""

from . import esn, lmi, polymodel, sim
from .esn import EmbeddingSpec, EsnConfig, EsnModel, InverseController, train_inverse_model
from .lmi import SynthesisProblem, SynthesisSolution, line_search_mu, solve_synthesis, verify_iss_decrease
from .polymodel import PolyQuasiLpvModel, load_plant, van_der_pol_model
from .sim import SimTrace, VanDerPolPlant, simulate

__version__ = "0.1.0"
