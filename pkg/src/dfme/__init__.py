"""Data-free model extraction with generator ensembles, selective queries and class-balanced replay.

Everything runs on plain numpy: small dense networks with manual
backpropagation stand in for both the victim and the attacker's models.
"""

from dfme.clones import ClassRegistry, CloneEnsemble
from dfme.engine import EvalSet, ExtractionConfig, Extractor, lr_schedule
from dfme.generators import GeneratorEnsemble, lambda_schedule, partition_batch
from dfme.nn import DenseNetwork
from dfme.replay import CircularReplay, ReplayContainer, StoredSample
from dfme.selection import select_batch
from dfme.victim import BudgetExhausted, VictimOracle, VictimResponse
from dfme.wire import RemoteVictimOracle, make_server

__version__ = "0.1.0"
