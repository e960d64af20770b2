"""Storm resilience estimation and DER siting for overhead distribution networks."""
from .geo import GeoPoint, PlanarPoint, project, haversine
from .network import NetworkGraph, NetworkConfig, synthesize, summarize
from .weather import WindDistribution, WeatherConfig, fit_lognormal, sample_storm
from .fragility import FragilityCurve, TreeFragilityModel, Fragility, p_wind, p_joint
from .simulation import (CrewPool, SimulationConfig, EpisodeRecord, ResilienceReport, run_episode,
                         estimate, aggregate, trapezoid_resilience)
from .enhance import DERKind, DERPlacement, DERPlan, GAConfig, evolve, fitness, replay_with_ders

__version__ = "0.1.0"
