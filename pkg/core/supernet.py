"""
Weight-sharing elastic transformer policy.

One parameter set sized for the largest configuration; any SubnetConfig reads
the left prefix of every elastic dimension (heads, MLP hidden units). Blocks run
with fake-quantized weights (per-output-channel, bw bits) and fake-quantized
linear-layer inputs (per-tensor, ba bits). Embedding and action head stay at
full precision.
"""
import logging
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from core import numerics as nx
from core import quant
from core.configspace import (LayerChoice, ModelDims, SearchSpace, SubnetConfig, largest_config,
                              subnet_param_count, validate_config)
from core.error_handler import NumericsError
from core.numerics import Tensor
from core.quant import PASS_THROUGH_BITS, QuantizerBank, QuantizerSpec

logger = logging.getLogger(__name__)

BLOCK_PARAMS = ('ln1.g', 'ln1.b', 'attn.wq', 'attn.wk', 'attn.wv', 'attn.wo', 'attn.bo',
                'ln2.g', 'ln2.b', 'mlp.w1', 'mlp.b1', 'mlp.w2')

# parameter name -> quantizer tensor name
WEIGHT_QUANT_NAMES = {
    'attn.wq': 'wq', 'attn.wk': 'wk', 'attn.wv': 'wv', 'attn.wo': 'wo',
    'mlp.w1': 'w1', 'mlp.w2': 'w2',
}

# Called as quantizer(kind, tensor_name, bits, value) with kind 'weight' or 'act'
QuantizerFn = Callable[[str, str, int, Tensor], QuantizerSpec]


def block_param_name(layer: int, name: str) -> str:
    return f'blocks.{layer}.{name}'


def parameter_order(n_layers: int) -> List[str]:
    names = ['embed.w', 'embed.b']
    for l in range(n_layers):
        names.extend(block_param_name(l, n) for n in BLOCK_PARAMS)
    names.extend(['head.w', 'head.b'])
    return names


def tokenize(obs: np.ndarray, dims: ModelDims) -> np.ndarray:
    """(B, obs_dim) -> (B, n_tokens, token_dim): each (x, y) pair plus a one-hot role"""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[1] != dims.obs_dim:
        raise NumericsError(f"observation batch must have shape (B, {dims.obs_dim}), got {obs.shape}")
    batch = obs.shape[0]
    coords = obs.reshape(batch, dims.n_tokens, dims.obs_dim // dims.n_tokens)
    roles = np.broadcast_to(np.eye(dims.n_tokens), (batch, dims.n_tokens, dims.n_tokens))
    return np.concatenate([coords, roles], axis=-1)


def init_parameters(dims: ModelDims, n_layers: int, seed: int = 0) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, inner, hidden = dims.d_model, dims.n_heads * dims.head_dim, dims.max_hidden

    def dense(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)).astype(np.float32)

    params = {'embed.w': dense(dims.token_dim, d), 'embed.b': np.zeros(d, np.float32)}
    for l in range(n_layers):
        block = {
            'ln1.g': np.ones(d, np.float32), 'ln1.b': np.zeros(d, np.float32),
            'attn.wq': dense(d, inner), 'attn.wk': dense(d, inner), 'attn.wv': dense(d, inner),
            'attn.wo': dense(inner, d), 'attn.bo': np.zeros(d, np.float32),
            'ln2.g': np.ones(d, np.float32), 'ln2.b': np.zeros(d, np.float32),
            'mlp.w1': dense(d, hidden), 'mlp.b1': np.zeros(hidden, np.float32),
            'mlp.w2': dense(hidden, d),
        }
        for name, value in block.items():
            params[block_param_name(l, name)] = value
    params['head.w'] = dense(d, dims.act_dim)
    params['head.b'] = np.zeros(dims.act_dim, np.float32)
    return {name: params[name] for name in parameter_order(n_layers)}


# ===========================
# SHARED FORWARD
# ===========================

def _linear_weight(w: Tensor, spec: QuantizerSpec, rows: int, cols: int) -> Tensor:
    """Prefix-slice a (in, out) weight and fake-quantize it with its output-channel scales"""
    w = nx.narrow(nx.narrow(w, 0, 0, rows), 1, 0, cols)
    return quant.fake_quant(quant.slice_weight_spec(spec, cols), w)


def block_forward(x: Tensor, choice: LayerChoice, weights: Callable[[str], Tensor],
                  quantizer: QuantizerFn, dims: ModelDims) -> Tensor:
    """
    One pre-norm transformer block restricted to `choice`. `weights(name)` returns
    the block's parameter tensor (full or already sliced); `quantizer` returns the
    spec for a weight or activation point.
    """
    d, dh = dims.d_model, dims.head_dim
    n_h = dims.heads_for(choice.h)
    inner = n_h * dh
    hidden = dims.hidden_for(choice.r)
    batch, tokens = x.shape[0], x.shape[1]

    def weight(name, rows, cols):
        w = weights(name)
        return _linear_weight(w, quantizer('weight', WEIGHT_QUANT_NAMES[name], choice.bw, w), rows, cols)

    def act(name, value):
        return quant.fake_quant(quantizer('act', name, choice.ba, value), value)

    # attention
    h = nx.add(nx.mul(nx.layer_norm(x, dims.ln_eps), weights('ln1.g')), weights('ln1.b'))
    h = act('attn_in', h)
    heads = []
    for name in ('attn.wq', 'attn.wk', 'attn.wv'):
        proj = nx.matmul(h, weight(name, d, inner))
        proj = nx.reshape(proj, (batch, tokens, n_h, dh))
        heads.append(nx.transpose(proj, (0, 2, 1, 3)))
    q, k, v = heads
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = nx.softmax(scores, axis=-1)
    ctx = nx.transpose(nx.matmul(attn, v), (0, 2, 1, 3))
    ctx = act('attn_out', nx.reshape(ctx, (batch, tokens, inner)))
    out = nx.add(nx.matmul(ctx, weight('attn.wo', inner, d)), weights('attn.bo'))
    x = nx.add(x, out)

    # mlp
    h = nx.add(nx.mul(nx.layer_norm(x, dims.ln_eps), weights('ln2.g')), weights('ln2.b'))
    h = act('mlp_in', h)
    b1 = nx.narrow(weights('mlp.b1'), 0, 0, hidden)
    hid = nx.gelu(nx.add(nx.matmul(h, weight('mlp.w1', d, hidden)), b1))
    hid = act('mlp_hidden', hid)
    return nx.add(x, nx.matmul(hid, weight('mlp.w2', hidden, d)))


def embed_forward(obs: np.ndarray, weights: Callable[[str], Tensor], dims: ModelDims) -> Tensor:
    tokens = Tensor(tokenize(obs, dims))
    return nx.add(nx.matmul(tokens, weights('embed.w')), weights('embed.b'))


def head_forward(x: Tensor, weights: Callable[[str], Tensor]) -> Tensor:
    pooled = nx.mean(x, axis=1)
    return nx.tanh(nx.add(nx.matmul(pooled, weights('head.w')), weights('head.b')))


def _as_batch(obs) -> Tuple[np.ndarray, bool]:
    obs = np.asarray(obs)
    if obs.ndim == 1:
        return obs[None, :], True
    return obs, False


# ===========================
# SUPERNET
# ===========================

class Supernet:
    """Shared parameters, quantizer bank and the elastic forward pass"""

    def __init__(self, space: SearchSpace, dims: ModelDims, params: Optional[Dict[str, np.ndarray]] = None,
                 bank: Optional[QuantizerBank] = None, seed: int = 0, ema_decay: float = 0.99,
                 warmup_steps: Optional[int] = 200):
        if dims.r_max < max(space.r_menu):
            raise NumericsError(f"model r_max {dims.r_max} smaller than r menu maximum {max(space.r_menu)}")
        if dims.obs_dim % dims.n_tokens or dims.token_dim != dims.obs_dim // dims.n_tokens + dims.n_tokens:
            raise NumericsError(f"token layout inconsistent with obs_dim={dims.obs_dim}")
        self.space = space
        self.dims = dims
        self.names = parameter_order(space.n_layers)
        bits = sorted(set(space.bw_menu) | set(space.ba_menu))
        self.bank = bank or QuantizerBank(space.n_layers, bits, decay=ema_decay, warmup_steps=warmup_steps)
        self.params: Dict[str, np.ndarray] = {}
        self.update_params(params if params is not None else init_parameters(dims, space.n_layers, seed))

    def update_params(self, params: Dict[str, np.ndarray]):
        """Install new parameter values and re-derive every weight scale from them"""
        missing = [n for n in self.names if n not in params]
        if missing:
            raise NumericsError(f"missing parameters: {missing[:5]}")
        self.params = {n: np.asarray(params[n], dtype=np.float32) for n in self.names}
        self.refresh_weight_scales()

    def refresh_weight_scales(self):
        weights = {}
        for l in range(self.space.n_layers):
            for pname, qname in WEIGHT_QUANT_NAMES.items():
                weights[(l, qname)] = self.params[block_param_name(l, pname)]
        self.bank.refresh_weights(weights)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def leaves(self) -> Dict[str, Tensor]:
        """Fresh trainable leaf tensors for one tape"""
        return {n: Tensor(self.params[n], requires_grad=True, name=n) for n in self.names}

    def forward(self, config: SubnetConfig, obs, leaves: Optional[Dict[str, Tensor]] = None,
                calibrate: bool = False) -> Tensor:
        """
        pi(a | o) under `config`. With calibrate=True, activation quantizers that are
        still warming up absorb this batch before being applied.
        """
        if len(config.layers) != self.space.n_layers:
            raise NumericsError(f"config has {len(config.layers)} layers, supernet has {self.space.n_layers}")
        validate_config(config, self.space, check_depth=False, extra_bits=(PASS_THROUGH_BITS,))
        obs, _ = _as_batch(obs)
        tensors = leaves if leaves is not None else {n: Tensor(self.params[n]) for n in self.names}
        x = embed_forward(obs, tensors.__getitem__, self.dims)
        for l, choice in enumerate(config.layers):
            if not choice.m:
                continue
            x = block_forward(x, choice, self._weights(tensors, l), self._quantizer(l, calibrate), self.dims)
        return head_forward(x, tensors.__getitem__)

    def predict(self, config: SubnetConfig, obs) -> np.ndarray:
        obs, single = _as_batch(obs)
        with nx.no_grad():
            out = self.forward(config, obs).numpy()
        return out[0] if single else out

    def _weights(self, tensors: Dict[str, Tensor], layer: int) -> Callable[[str], Tensor]:
        def lookup(name: str) -> Tensor:
            return tensors[block_param_name(layer, name)]
        return lookup

    def _quantizer(self, layer: int, calibrate: bool) -> QuantizerFn:
        bank = self.bank

        def lookup(kind: str, name: str, bits: int, value: Tensor) -> QuantizerSpec:
            if kind == 'act' and calibrate:
                bank.calibrate_activation(layer, name, bits, value)
            return bank.require(layer, name, bits)
        return lookup

    def active_masks(self, config: SubnetConfig) -> Dict[str, np.ndarray]:
        """Boolean mask per parameter of the entries `config` reads"""
        masks = {n: np.zeros(self.params[n].shape, dtype=bool) for n in self.names}
        for n in ('embed.w', 'embed.b', 'head.w', 'head.b'):
            masks[n][...] = True
        for l, choice in enumerate(config.layers):
            if not choice.m:
                continue
            inner = self.dims.heads_for(choice.h) * self.dims.head_dim
            hidden = self.dims.hidden_for(choice.r)

            def mark(name, index=Ellipsis):
                masks[block_param_name(l, name)][index] = True
            for name in ('ln1.g', 'ln1.b', 'ln2.g', 'ln2.b', 'attn.bo'):
                mark(name)
            for name in ('attn.wq', 'attn.wk', 'attn.wv'):
                mark(name, (slice(None), slice(0, inner)))
            mark('attn.wo', (slice(0, inner), slice(None)))
            mark('mlp.w1', (slice(None), slice(0, hidden)))
            mark('mlp.b1', slice(0, hidden))
            mark('mlp.w2', (slice(0, hidden), slice(None)))
        return masks

    def extract(self, config: SubnetConfig) -> "Subnet":
        validate_config(config, self.space)
        return Subnet.from_supernet(self, config)


def calibrate_bank(supernet: Supernet, obs: np.ndarray, rounds: int = 1):
    """
    Seed every activation quantizer: one calibrating pass of the largest
    architecture per activation bit-width
    """
    space = supernet.space
    top = largest_config(space)
    with nx.no_grad():
        for bits in space.ba_menu:
            if bits >= quant.PASS_THROUGH_BITS:
                continue
            layers = tuple(LayerChoice(1, c.r, c.h, space.bw_menu[-1], bits) for c in top.layers)
            for _ in range(rounds):
                supernet.forward(SubnetConfig(layers), obs, calibrate=True)
    logger.info(f"calibrated activation quantizers for bits {list(space.ba_menu)} on {len(obs)} observations")


# ===========================
# STANDALONE SUBNET
# ===========================

class Subnet:
    """Extracted subnet: only the active, sliced parameters plus matching quantizer specs"""

    def __init__(self, config: SubnetConfig, dims: ModelDims, params: Dict[str, np.ndarray],
                 specs: Dict[Tuple[int, str], QuantizerSpec]):
        self.config = config
        self.dims = dims
        self.params = {n: np.asarray(p, dtype=np.float32) for n, p in params.items()}
        self.specs = specs

    @classmethod
    def from_supernet(cls, supernet: Supernet, config: SubnetConfig) -> "Subnet":
        dims = supernet.dims
        params = {n: supernet.params[n].copy() for n in ('embed.w', 'embed.b', 'head.w', 'head.b')}
        specs: Dict[Tuple[int, str], QuantizerSpec] = {}
        for l, choice in enumerate(config.layers):
            if not choice.m:
                continue
            inner = dims.heads_for(choice.h) * dims.head_dim
            hidden = dims.hidden_for(choice.r)
            slices = {
                'attn.wq': (slice(None), slice(0, inner)),
                'attn.wk': (slice(None), slice(0, inner)),
                'attn.wv': (slice(None), slice(0, inner)),
                'attn.wo': (slice(0, inner), slice(None)),
                'mlp.w1': (slice(None), slice(0, hidden)),
                'mlp.b1': slice(0, hidden),
                'mlp.w2': (slice(0, hidden), slice(None)),
            }
            for name in BLOCK_PARAMS:
                full = supernet.params[block_param_name(l, name)]
                params[block_param_name(l, name)] = full[slices.get(name, Ellipsis)].copy()
            for pname, qname in WEIGHT_QUANT_NAMES.items():
                spec = supernet.bank.require(l, qname, choice.bw)
                cols = params[block_param_name(l, pname)].shape[1]
                specs[(l, qname)] = quant.slice_weight_spec(spec, cols)
            for qname in quant.ACTIVATION_TENSORS:
                specs[(l, qname)] = supernet.bank.require(l, qname, choice.ba)
        return cls(config, dims, params, specs)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def expected_parameter_count(self) -> int:
        return subnet_param_count(self.config, self.dims)

    def forward(self, obs) -> Tensor:
        obs, _ = _as_batch(obs)
        tensors = {n: Tensor(p) for n, p in self.params.items()}
        x = embed_forward(obs, tensors.__getitem__, self.dims)
        for l, choice in enumerate(self.config.layers):
            if not choice.m:
                continue

            def weights(name, _l=l):
                return tensors[block_param_name(_l, name)]

            def quantizer(kind, name, bits, value, _l=l):
                return self.specs[(_l, name)]
            x = block_forward(x, choice, weights, quantizer, self.dims)
        return head_forward(x, tensors.__getitem__)

    def predict(self, obs) -> np.ndarray:
        obs, single = _as_batch(obs)
        with nx.no_grad():
            out = self.forward(obs).numpy()
        return out[0] if single else out
