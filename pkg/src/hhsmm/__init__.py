"""Hidden hybrid Markov/semi-Markov models.

States are either Markovian (geometric sojourn, self-transitions allowed) or
semi-Markovian (explicit sojourn distribution, no self-transition). The
package covers simulation, initialization, EM fitting, decoding, future-state
prediction and remaining-useful-life estimation.
"""

from __future__ import annotations

import types

from .data import (DataError, SequenceSet, hhsmmdata, homogeneity, lagdata, load_sequences,
                   store_sequences, train_test_split)
from .decode import (RULEstimate, estimate_rul, predict_states, smoothed_probabilities,
                     smoothing_decode, viterbi)
from .emissions import (AddReg, MixLM, MixLMParams, MixMVN, MixMVNParams, Nonpar,
                        SplineEmissionParams, addreg_hhsmm_predict, additive_reg_mstep, dmixlm,
                        dmixmvnorm, dnonpar, dnorm_additive_reg, mixlm_mstep, mixmvnorm_mstep,
                        miss_mixmvnorm_mstep, nonpar_mstep, rmixlm, rmixmvnorm)
from .inference import FitResult, NumericError, estep, forward, backward, hhsmmfit, score
from .initialize import (ClusterResult, InitError, initial_cluster, initialize_model, ltr_clus,
                         ltr_cluster_K)
from .model import ModelError, ModelSpec, load_model, save_model, validate_model
from .simulate import simulate
from .sojourn import SojournSpec, fit_sojourn_moments, select_sojourn_auto, sojourn_pmf

__version__ = "0.1.0"

__all__ = [name for name, obj in dict(globals()).items()
           if not name.startswith("_") and name != "annotations" and not isinstance(obj, types.ModuleType)]
