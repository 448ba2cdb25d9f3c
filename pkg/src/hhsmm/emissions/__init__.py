"""Emission families and a name registry used for JSON round trips."""

from __future__ import annotations

from .base import Emission, EmissionError, check_weights
from .mixmvnorm import (MixMVN, MixMVNParams, dmixmvnorm, impute_initial, miss_mixmvnorm_mstep,
                        mixmvnorm_mstep, rmixmvnorm)
from .regress import (AdditiveRegParams, AddReg, MixLM, MixLMParams, addreg_hhsmm_predict,
                      additive_reg_mstep, dmixlm, dnorm_additive_reg, mixlm_mstep, rmixlm)
from .spline import Nonpar, SplineEmissionParams, bspline_basis, dnonpar, nonpar_mstep

FAMILIES: dict[str, type[Emission]] = {
    cls.family: cls for cls in (MixMVN, Nonpar, MixLM, AddReg)
}


def emission_from_dict(d: dict) -> Emission:
    try:
        cls = FAMILIES[d["family"]]
    except KeyError:
        raise EmissionError(f"unknown emission family {d.get('family')!r}") from None
    return cls.from_dict(d)


__all__ = [
    "Emission", "EmissionError", "check_weights", "FAMILIES", "emission_from_dict",
    "MixMVN", "MixMVNParams", "dmixmvnorm", "rmixmvnorm", "mixmvnorm_mstep",
    "miss_mixmvnorm_mstep", "impute_initial",
    "Nonpar", "SplineEmissionParams", "bspline_basis", "dnonpar", "nonpar_mstep",
    "MixLM", "MixLMParams", "dmixlm", "mixlm_mstep", "rmixlm",
    "AddReg", "AdditiveRegParams", "dnorm_additive_reg", "additive_reg_mstep",
    "addreg_hhsmm_predict",
]
