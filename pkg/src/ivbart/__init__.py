from ivbart.policy import SamplerPolicy

__version__ = "0.1.0"

SCHEMA_VERSION = "ivbart/1"

_sampler_policy = SamplerPolicy()


def set_policy(policy):
    """Set the sampler policy to be used.

    A sampler policy is an object holding the declared defaults of the priors and of
    the MCMC run lengths. Many of these are not fixed by the method and are set
    per analysis.

    The policy is set on a global scope, thus, multiple simultaneous policies are not
    supported within one process. Worker processes started for parallel chains
    receive the policy explicitly.

    Arguments:
        policy -- sampler policy
    """
    global _sampler_policy  # pylint: disable=global-statement
    _sampler_policy = policy


def get_policy():
    """Get the current sampler policy.

    Returns:
        sampler policy
    """
    return _sampler_policy
