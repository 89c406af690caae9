from .cartpole import (
    CartpoleEnvironment,
    CartpoleSpec,
    DiscretizationMap,
    cartpole_model_set,
    cartpole_tensor,
)
from .frozen_lake import (
    FrozenLakeSpec,
    frozen_lake_environment,
    frozen_lake_mdp,
    frozen_lake_model_set,
    success_probability,
)
