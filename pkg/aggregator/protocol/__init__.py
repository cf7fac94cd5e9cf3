from aggregator.protocol.entities import ClientState, Federation, ServerS0State, ServerS1State
from aggregator.protocol.rounds import (
    audit_privacy, client_local_round, initialize, precompute_masks, replay_round, run_round, select_clients
)
from aggregator.protocol.transcript import RoundTranscript

__all__ = [
    'ClientState', 'Federation', 'RoundTranscript', 'ServerS0State', 'ServerS1State',
    'audit_privacy', 'client_local_round', 'initialize', 'precompute_masks', 'replay_round',
    'run_round', 'select_clients',
]
