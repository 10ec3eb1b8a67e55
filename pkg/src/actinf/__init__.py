from actinf.diffcore import Tensor, ComputationTape, OptimizerState, ShapeError, NonFiniteError, TapeError
from actinf.dist import DiagonalGaussian, SampleBatch, EntropyEstimate, knn_entropy
from actinf.genmodel import ModelConfig, TrainConfig, GenerativeModel, TransitionModel, RewardModel
from actinf.planner import PlannerConfig, PolicyDistribution, ParticleSet, EfeBreakdown, cem_plan
from actinf.envsim import EnvSpec, StepResult, MountainCar, Pendulum, LinearSystem, ProtocolError
from actinf.agentloop import Transition, ReplayBuffer, AgentConfig, CoverageGrid, run_experiment

__version__ = "0.1"
