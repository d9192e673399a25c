"""Predictor identifiers, canonical channel order, and channel groupings.

The 15 diagnostics are stored in a fixed channel order shared by every
stack in the package; the three static geographic inputs are handled
separately (they are scalars per coarse cell, not gridded channels).
"""

from enum import Enum


class PredictorId(str, Enum):
    # storm-scale explicit diagnostics
    CREF = "cref"
    UH_0_2KM = "uh_0_2km"
    UH_2_5KM = "uh_2_5km"
    APCP = "apcp"
    SPD_10M = "spd_10m"
    GRPL = "grpl"
    # environmental diagnostics
    MSLP = "mslp"
    TEMP_2M = "temp_2m"
    DEWPOINT_2M = "dewpoint_2m"
    CAPE = "cape"
    CIN = "cin"
    SRH_0_1KM = "srh_0_1km"
    SRH_0_3KM = "srh_0_3km"
    USHR_0_6KM = "ushr_0_6km"
    VSHR_0_6KM = "vshr_0_6km"
    # static geographic inputs
    LATITUDE = "latitude"
    LONGITUDE = "longitude"
    ELEVATION = "elevation"


P = PredictorId

#: channel order of every 15-channel diagnostic stack
DIAGNOSTICS = (
    P.CREF, P.UH_0_2KM, P.UH_2_5KM, P.APCP, P.SPD_10M, P.GRPL,
    P.MSLP, P.TEMP_2M, P.DEWPOINT_2M, P.CAPE, P.CIN,
    P.SRH_0_1KM, P.SRH_0_3KM, P.USHR_0_6KM, P.VSHR_0_6KM,
)

STATICS = (P.LATITUDE, P.LONGITUDE, P.ELEVATION)

EXPLICIT = (P.CREF, P.UH_0_2KM, P.UH_2_5KM, P.APCP, P.SPD_10M, P.GRPL)

#: conditional inputs to both generators (never generated themselves)
COND_CHANNELS = (P.UH_2_5KM, P.UH_0_2KM, P.APCP, P.GRPL, P.SPD_10M)

#: generated by the first CGAN
GROUP_A = (P.CAPE, P.CIN, P.CREF)

#: generated by the second CGAN
GROUP_B = (
    P.MSLP, P.TEMP_2M, P.DEWPOINT_2M,
    P.SRH_0_1KM, P.SRH_0_3KM, P.USHR_0_6KM, P.VSHR_0_6KM,
)

#: normalization method per predictor
NORMALIZATION = {
    P.CREF: "log", P.UH_0_2KM: "log", P.UH_2_5KM: "log", P.APCP: "log",
    P.SPD_10M: "log", P.GRPL: "log", P.CAPE: "log", P.CIN: "log",
    P.MSLP: "standardize", P.TEMP_2M: "standardize", P.DEWPOINT_2M: "standardize",
    P.SRH_0_1KM: "standardize", P.SRH_0_3KM: "standardize",
    P.USHR_0_6KM: "standardize", P.VSHR_0_6KM: "standardize",
    P.LATITUDE: "minmax", P.LONGITUDE: "minmax", P.ELEVATION: "minmax",
}

CHANNEL_INDEX = {p: i for i, p in enumerate(DIAGNOSTICS)}

COND_IDX = tuple(CHANNEL_INDEX[p] for p in COND_CHANNELS)
GROUP_A_IDX = tuple(CHANNEL_INDEX[p] for p in GROUP_A)
GROUP_B_IDX = tuple(CHANNEL_INDEX[p] for p in GROUP_B)

assert set(COND_IDX) | set(GROUP_A_IDX) | set(GROUP_B_IDX) == set(range(15))
