import base64
from dataclasses import dataclass, field, fields
import json

from aggregator.transport.accounting import byte_accounting
from aggregator.transport.network import Delivery


# Per-client fields, keyed by client id
CLIENT_FIELDS = (
    'estimated_norms', 'oracle_norms', 'squared_norm_lifts', 'inner_products',
    'cosines', 'trust_scores', 'weights', 'quantized_weights',
)


@dataclass(eq=False)
class RoundTranscript:
    round: int
    selected: list = field(default_factory=list)
    attackers: list = field(default_factory=list)
    deliveries: list = field(default_factory=list)

    norm_std: float = None
    estimated_norms: dict = field(default_factory=dict)
    oracle_norms: dict = field(default_factory=dict)
    squared_norm_lifts: dict = field(default_factory=dict)
    inner_products: dict = field(default_factory=dict)
    cosines: dict = field(default_factory=dict)
    trust_scores: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    quantized_weights: dict = field(default_factory=dict)
    mask_sum: list = field(default_factory=list)
    global_gradient: list = field(default_factory=list)

    no_trust: bool = False
    saturated: int = 0
    failed: bool = False
    error: str = ''

    # Wall-clock measurements; never serialised so transcripts stay reproducible
    online_ms: float = field(default=0.0, compare=False)
    secnorm_ms: float = field(default=0.0, compare=False)
    secnorm_exponentiations: int = 0

    @property
    def skipped(self):
        return not self.selected

    def link_bytes(self):
        return byte_accounting(self)

    def to_dict(self):
        data = {}
        for item in fields(self):
            if item.name in ('online_ms', 'secnorm_ms'):
                continue
            value = getattr(self, item.name)
            if item.name == 'deliveries':
                value = [
                    {'src': d.src, 'dst': d.dst, 'frame': base64.b64encode(d.frame).decode('ascii')}
                    for d in value
                ]
            elif item.name in CLIENT_FIELDS:
                value = {str(cid): v for cid, v in sorted(value.items())}
            data[item.name] = value
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['deliveries'] = [
            Delivery(src=d['src'], dst=d['dst'], frame=base64.b64decode(d['frame']))
            for d in data.get('deliveries', [])
        ]
        for name in CLIENT_FIELDS:
            data[name] = {int(cid): v for cid, v in data.get(name, {}).items()}
        return cls(**data)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, 'w') as handle:
            handle.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as handle:
            return cls.from_json(handle.read())
