from .consensus import (ChangepointSet, ConsensusConfig, EpochPartition, consensus,
                        partition_epochs, smooth_posterior)
from .sampler import SamplerConfig, McmcConfig, SignalError, run_chains, run_sampler

__all__ = ["ChangepointSet", "ConsensusConfig", "EpochPartition", "McmcConfig", "SamplerConfig",
           "SignalError", "consensus", "partition_epochs", "run_chains", "run_sampler",
           "smooth_posterior"]
