"""
Simulated two-world executor: TEE vs GPU.

Offloaded linear work is protected with one-time pads over Z_p:

    TEE:  h_hat = quantize(h)              8-bit levels
          h_e   = (h_hat + r) mod p        r uniform in Z_p, used once
    GPU:  g(h_e) = h_e @ W_q  mod p
    TEE:  g(h_hat) = g(h_e) - g(r) mod p   g(r) precomputed offline
          check   g(h_e) s == h_e (W_q s)  mod p   (Freivalds)

Because every accumulator stays below p/2, the decrypted field value is the
exact integer product, so MASKED execution is bit-identical to QUANTIZED
(plain execution of the same 8-bit model).

How an offloaded weighted layer is published depends on the plan:
plain GPU layers publish W, Intermediate layers publish scalar*W (the TEE
divides back), Magnitude layers publish W with the shielded weights zeroed
(the TEE adds the shielded part), and OBFUSCATED layers publish the ShadowNet
filters (the TEE subtracts each filter's mask channel). Biases are always
added in the TEE.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- quantize(x) / dequantize(q): 8-bit affine quantization
- quantize_weights(w): Symmetric 8-bit weight quantization
- otp_encrypt(q, pad, fp): (h_hat + r) mod p, consuming the pad
- otp_decrypt_linear(g_he, g_r, fp): (g_he - g_r) mod p
- field_matmul(a, b, fp): Exact modular matrix product
- field_conv2d_direct(x, w, stride, fp): Direct modular convolution (cross-check)
- freivalds_sample(wt, rounds, fp, rng): Offline vectors s and s_tilde = W s
- freivalds_verify(h, claimed, s_tilde, s, fp, rounds): Randomized product check
- effective_plan(model, plan, protocol): Placement actually used by the executor
- execute_plan(model, plan, x, protocol, ...): Run a plan end to end

CLASSES:
--------
- FieldParams, QuantTensor, OtpPad, VerifyRecord (dataclasses)
- PadPool: Per-layer pad queues with consumption accounting
- GpuWorker / CorruptingGpuWorker: Honest and adversarial GPU stubs
"""

import dataclasses
import json
import threading
from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, List, Optional, Set, Tuple

import numpy as np

from tsdplab.core.flops import CostReport, utility_of_plan
from tsdplab.core.layers import BATCHNORM, CONV2D, LayerSpec, im2col, layer_forward
from tsdplab.core.nn import INPUT, ModelGraph, apply_output_mode, check_input
from tsdplab.core.partition import (
    GPU,
    OBFUSCATED,
    TEE,
    PartitionPlan,
    ensure_obfuscations,
)
from tsdplab.utils.logging import (
    PadReuseError,
    TSDPIntegrityError,
    TSDPValidationError,
    logger,
)
from tsdplab.utils.rng import make_rng

MERSENNE_31 = 2**31 - 1
LEVELS = 255
WEIGHT_LEVELS = 127
LOW_WATER = 0.05

PLAIN = "PLAIN"
QUANTIZED = "QUANTIZED"
MASKED = "MASKED"
PROTOCOLS = (PLAIN, QUANTIZED, MASKED)

_LIMB = 16
_CHUNK = 2**15


def is_prime(p: int) -> bool:
    if p < 2:
        return False
    if p % 2 == 0:
        return p == 2
    i = 3
    while i * i <= p:
        if p % i == 0:
            return False
        i += 2
    return True


@dataclass(frozen=True)
class FieldParams:
    """
    Prime modulus of the masking field.

    Masking needs p > 2^8. `masking=False` admits small primes for
    verification-only arithmetic such as exhaustive Freivalds checks.
    """

    p: int = MERSENNE_31
    masking: bool = True

    def __post_init__(self) -> None:
        if not is_prime(self.p):
            raise TSDPValidationError(f"Field modulus {self.p} is not prime")
        if self.p >= 2**31:
            raise TSDPValidationError("Field modulus must be below 2^31")
        if self.masking and self.p <= 2**8:
            raise TSDPValidationError(f"Masking field needs p > 256, got {self.p}")


def _require_masking_field(fp: FieldParams) -> None:
    if not fp.masking:
        raise TSDPValidationError(f"Field p={fp.p} is marked verification-only")


@dataclass
class QuantTensor:
    """Field elements with the affine map back to reals."""

    values: np.ndarray
    scale: float
    zero_point: int
    shape: Tuple[int, ...]


@dataclass
class OtpPad:
    """One-time mask r, its offline product g(r) and Freivalds vectors."""

    mask: np.ndarray
    g_r: Optional[np.ndarray] = None
    s: Optional[np.ndarray] = None
    s_tilde: Optional[np.ndarray] = None
    layer: str = ""
    pad_id: int = 0
    consumed: bool = False

    def consume(self) -> None:
        if self.consumed:
            raise PadReuseError(
                f"One-time pad {self.layer}#{self.pad_id} presented for a second use"
            )
        self.consumed = True


@dataclass
class VerifyRecord:
    """Outcome of one Freivalds check."""

    layer: str
    rounds: int
    passed: bool
    pad_id: int = 0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


def quantize(x: np.ndarray) -> QuantTensor:
    """
    Affine 8-bit quantization over a range that always contains 0.

    scale = (max - min) / 255, zero_point = round(-min / scale); rounding is
    half-to-even. A constant input maps to scale 1, zero point 0, all zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise TSDPValidationError("Cannot quantize non-finite values")
    lo = min(float(x.min()) if x.size else 0.0, 0.0)
    hi = max(float(x.max()) if x.size else 0.0, 0.0)
    if hi == lo:
        return QuantTensor(np.zeros(x.shape, dtype=np.int64), 1.0, 0, x.shape)
    scale = (hi - lo) / LEVELS
    zp = int(np.round(-lo / scale))
    values = np.clip(np.round(x / scale) + zp, 0, LEVELS).astype(np.int64)
    return QuantTensor(values, scale, zp, x.shape)


def dequantize(q: QuantTensor) -> np.ndarray:
    return (q.values.astype(np.float64) - q.zero_point) * q.scale


def quantize_weights(w: np.ndarray) -> Tuple[np.ndarray, float]:
    """Symmetric 8-bit weights in [-127, 127] and their scale."""
    amax = float(np.abs(w).max()) if w.size else 0.0
    scale = amax / WEIGHT_LEVELS if amax > 0 else 1.0
    return np.clip(np.round(w / scale), -WEIGHT_LEVELS, WEIGHT_LEVELS).astype(np.int64), scale


def otp_encrypt(q: QuantTensor, pad: OtpPad, fp: FieldParams) -> QuantTensor:
    if pad.mask.shape != q.values.shape:
        raise TSDPValidationError(
            f"Pad shape {pad.mask.shape} does not match tensor {q.values.shape}"
        )
    pad.consume()
    values = (q.values + pad.mask) % fp.p
    return QuantTensor(values, q.scale, q.zero_point, q.shape)


def otp_decrypt_linear(g_he: np.ndarray, g_r: np.ndarray, fp: FieldParams) -> np.ndarray:
    if np.shape(g_he) != np.shape(g_r):
        raise TSDPValidationError("Decryption operands differ in shape")
    return (np.asarray(g_he, dtype=np.int64) - np.asarray(g_r, dtype=np.int64)) % fp.p


def field_matmul(a: np.ndarray, b: np.ndarray, fp: FieldParams) -> np.ndarray:
    """
    (a @ b) mod p without int64 overflow.

    `a` is split into 16-bit limbs and the inner dimension is processed in
    chunks of 2^15, so every partial sum stays below 2^63.
    """
    p = fp.p
    a = np.asarray(a, dtype=np.int64) % p
    b = np.asarray(b, dtype=np.int64) % p
    if a.shape[-1] != b.shape[0]:
        raise TSDPValidationError(f"field_matmul shapes {a.shape} x {b.shape}")
    lo = a & ((1 << _LIMB) - 1)
    hi = a >> _LIMB
    out = np.zeros(a.shape[:-1] + b.shape[1:], dtype=np.int64)
    for start in range(0, a.shape[-1], _CHUNK):
        sl = slice(start, start + _CHUNK)
        part_lo = (lo[..., sl] @ b[sl]) % p
        part_hi = (hi[..., sl] @ b[sl]) % p
        out = (out + (part_hi << _LIMB) % p + part_lo) % p
    return out


def field_conv2d_direct(x: np.ndarray, w: np.ndarray, stride: int, fp: FieldParams) -> np.ndarray:
    """Unpadded convolution of integer tensors evaluated term by term mod p."""
    p = fp.p
    x = np.asarray(x, dtype=np.int64) % p
    w = np.asarray(w, dtype=np.int64) % p
    n, c, h, wd = x.shape
    c_out, _, k, _ = w.shape
    ho = (h - k) // stride + 1
    wo = (wd - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo), dtype=np.int64)
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                window = x[:, ci, i:i + stride * ho:stride, j:j + stride * wo:stride]
                term = (window[:, None] * w[None, :, ci, i, j, None, None]) % p
                out = (out + term) % p
    return out


def freivalds_sample(
    wt: np.ndarray, rounds: int, fp: FieldParams, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """Random s (rounds, c_out) in Z_p and s_tilde = (wt @ s.T).T of shape (rounds, d)."""
    s = rng.integers(0, fp.p, size=(rounds, wt.shape[1]), dtype=np.int64)
    s_tilde = field_matmul(wt, s.T, fp).T
    return s, np.ascontiguousarray(s_tilde)


def freivalds_verify(
    h: np.ndarray,
    claimed: np.ndarray,
    s_tilde: np.ndarray,
    s: np.ndarray,
    fp: FieldParams,
    rounds: Optional[int] = None,
) -> bool:
    """
    Accept iff claimed @ s == h @ s_tilde (mod p) for every round.

    `h` is (rows, d) or (d,), `claimed` (rows, c_out) or (c_out,), `s` is
    (rounds, c_out) and `s_tilde` (rounds, d).
    """
    h2 = np.atleast_2d(np.asarray(h, dtype=np.int64))
    c2 = np.atleast_2d(np.asarray(claimed, dtype=np.int64))
    s2 = np.atleast_2d(np.asarray(s, dtype=np.int64))
    st2 = np.atleast_2d(np.asarray(s_tilde, dtype=np.int64))
    if h2.shape[0] != c2.shape[0]:
        raise TSDPValidationError("Input and claimed result differ in row count")
    if s2.shape[1] != c2.shape[1] or st2.shape[1] != h2.shape[1]:
        raise TSDPValidationError(
            f"Freivalds dimension mismatch: claimed {c2.shape}, s {s2.shape}, "
            f"h {h2.shape}, s_tilde {st2.shape}"
        )
    if s2.shape[0] != st2.shape[0]:
        raise TSDPValidationError("s and s_tilde carry different round counts")
    n_rounds = s2.shape[0] if rounds is None else min(rounds, s2.shape[0])
    for r in range(n_rounds):
        lhs = field_matmul(c2, s2[r][:, None], fp)
        rhs = field_matmul(h2, st2[r][:, None], fp)
        if not np.array_equal(lhs, rhs):
            return False
    return True


class GpuWorker:
    """Honest untrusted accelerator: computes field products it is given."""

    def __init__(self) -> None:
        self.calls = 0

    def matmul(self, layer: str, a: np.ndarray, wt: np.ndarray, fp: FieldParams) -> np.ndarray:
        self.calls += 1
        return field_matmul(a, wt, fp)


class CorruptingGpuWorker(GpuWorker):
    """Adversarial stub adding 1 (mod p) to one random entry of each result."""

    def __init__(self, seed: int = 0, layers: Optional[Set[str]] = None) -> None:
        super().__init__()
        self.rng = make_rng(seed, "corrupt")
        self.layers = layers

    def matmul(self, layer: str, a: np.ndarray, wt: np.ndarray, fp: FieldParams) -> np.ndarray:
        out = super().matmul(layer, a, wt, fp)
        if self.layers is None or layer in self.layers:
            idx = tuple(int(self.rng.integers(0, d)) for d in out.shape)
            out[idx] = (out[idx] + 1) % fp.p
        return out


class PadPool:
    """
    Per-layer queues of one-time pads.

    Pads are generated offline by `refill` together with g(r) and the
    Freivalds vectors; `acquire` hands each pad out exactly once and warns
    when a queue drops below 5 % of its last refill size.
    """

    def __init__(self, fp: Optional[FieldParams] = None, seed: int = 0) -> None:
        self.fp = fp or FieldParams()
        _require_masking_field(self.fp)
        self.seed = seed
        self._queues: Dict[str, Deque[OtpPad]] = {}
        self._capacity: Dict[str, int] = {}
        self._issued: Dict[str, int] = {}
        self._lock = threading.Lock()

    def refill(
        self,
        layer: str,
        shape: Tuple[int, ...],
        wt: np.ndarray,
        k: int = 0,
        stride: int = 1,
        count: int = 1,
        rounds: int = 1,
    ) -> None:
        """Generate `count` pads for inputs of `shape` (padded for conv layers)."""
        with self._lock:
            queue = self._queues.setdefault(layer, deque())
            for _ in range(count):
                pad_id = self._issued.get(layer, 0)
                self._issued[layer] = pad_id + 1
                rng = make_rng(self.seed, "pad", layer, pad_id)
                r = rng.integers(0, self.fp.p, size=shape, dtype=np.int64)
                cols = im2col(r, k, stride) if k else r.reshape(shape[0], -1)
                g_r = field_matmul(cols, wt, self.fp)
                s, s_tilde = freivalds_sample(wt, rounds, self.fp, rng)
                queue.append(OtpPad(mask=r, g_r=g_r, s=s, s_tilde=s_tilde,
                                    layer=layer, pad_id=pad_id))
            self._capacity[layer] = len(queue)
        logger.debug(f"Refilled {count} pads for {layer} (shape {shape})")

    def remaining(self, layer: str) -> int:
        with self._lock:
            return len(self._queues.get(layer, ()))

    def acquire(self, layer: str, shape: Tuple[int, ...]) -> OtpPad:
        with self._lock:
            queue = self._queues.get(layer)
            if not queue:
                raise TSDPValidationError(f"Pad pool for {layer} is exhausted; refill it")
            pad = queue.popleft()
            left = len(queue)
            cap = self._capacity.get(layer, 1)
        if pad.mask.shape != tuple(shape):
            raise TSDPValidationError(
                f"Pad for {layer} has shape {pad.mask.shape}, input needs {tuple(shape)}"
            )
        if left < LOW_WATER * cap:
            logger.warning(f"Pad pool for {layer} is low: {left}/{cap} remaining")
        return pad

    def prepare(
        self, model: ModelGraph, plan: PartitionPlan, batch: int, count: int = 1,
        rounds: int = 1,
    ) -> None:
        """Offline phase: pads for every offloaded weighted layer of `plan`."""
        ensure_obfuscations(model, plan)
        for layer in model.layers:
            if not layer.is_weighted or plan.placements[layer.name] == TEE:
                continue
            w_pub = published_weight(layer, plan)
            wq, _ = quantize_weights(w_pub)
            wt = wq.reshape(wq.shape[0], -1).T % self.fp.p
            assert layer.in_shape is not None
            if layer.kind == CONV2D:
                pad = layer.params.get("padding", 0)
                c, h, w = layer.in_shape
                shape: Tuple[int, ...] = (batch, c, h + 2 * pad, w + 2 * pad)
                self.refill(layer.name, shape, wt, layer.params["k"],
                            layer.params.get("stride", 1), count, rounds)
            else:
                shape = (batch, int(np.prod(layer.in_shape)))
                self.refill(layer.name, shape, wt, 0, 1, count, rounds)


def published_weight(layer: LayerSpec, plan: PartitionPlan) -> np.ndarray:
    """The weight tensor an offloaded layer exposes to the GPU."""
    w = layer.weights["weight"]
    where = plan.placements[layer.name]
    if where == OBFUSCATED:
        return plan.obfuscations[layer.name].filters
    if plan.scalars and layer.name in plan.scalars:
        return plan.scalars[layer.name] * w
    if plan.weight_masks is not None and layer.name in plan.weight_masks:
        return np.where(plan.weight_masks[layer.name], 0.0, w)
    return w


def _is_plain_offload(layer: LayerSpec, plan: PartitionPlan) -> bool:
    if plan.placements[layer.name] != GPU:
        return False
    if plan.scalars and layer.name in plan.scalars:
        return False
    if plan.weight_masks is not None and layer.name in plan.weight_masks:
        return bool(not plan.weight_masks[layer.name].any())
    return True


def _to_output(layer: LayerSpec, rows: np.ndarray, n: int) -> np.ndarray:
    if layer.kind == CONV2D:
        assert layer.out_shape is not None
        _, ho, wo = layer.out_shape
        return np.ascontiguousarray(rows.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2))
    return rows


def _linop_float(layer: LayerSpec, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    if layer.kind == CONV2D:
        p = layer.params
        cols = im2col(x, p["k"], p.get("stride", 1), p.get("padding", 0))
        return _to_output(layer, cols @ w.reshape(w.shape[0], -1).T, x.shape[0])
    return x.reshape(x.shape[0], -1) @ w.T


def _centered(values: np.ndarray, p: int) -> np.ndarray:
    return np.where(values > p // 2, values - p, values)


class _Executor:
    def __init__(
        self,
        plan: PartitionPlan,
        protocol: str,
        fp: FieldParams,
        pads: Optional[PadPool],
        gpu: GpuWorker,
        rounds: int,
    ) -> None:
        self.plan = plan
        self.protocol = protocol
        self.fp = fp
        self.pads = pads
        self.gpu = gpu
        self.rounds = rounds
        self.verify_log: List[VerifyRecord] = []

    def offloaded(self, layer: LayerSpec, x: np.ndarray) -> np.ndarray:
        plan = self.plan
        if self.protocol == PLAIN and _is_plain_offload(layer, plan):
            return layer_forward(layer, [x])[0]

        w_pub = published_weight(layer, plan)
        if self.protocol == PLAIN:
            y = _linop_float(layer, x, w_pub)
        else:
            y = self._linop_quantized(layer, x, w_pub)

        if plan.placements[layer.name] == OBFUSCATED:
            obf = plan.obfuscations[layer.name]
            pos_sum, pos_mask = obf.secret.positions(obf.n)
            y = y[:, pos_sum] - y[:, pos_mask]
        elif plan.scalars and layer.name in plan.scalars:
            y = y / plan.scalars[layer.name]
        elif plan.weight_masks is not None and layer.name in plan.weight_masks:
            shielded = np.where(plan.weight_masks[layer.name], layer.weights["weight"], 0.0)
            y = y + _linop_float(layer, x, shielded)

        bias = layer.weights["bias"]
        return y + (bias.reshape(1, -1, 1, 1) if layer.kind == CONV2D else bias)

    def _linop_quantized(self, layer: LayerSpec, x: np.ndarray, w_pub: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        q = quantize(x)
        wq, sw = quantize_weights(w_pub)
        wt = wq.reshape(wq.shape[0], -1).T
        if layer.kind == CONV2D:
            p = layer.params
            k, stride, pad = p["k"], p.get("stride", 1), p.get("padding", 0)
            h_int = np.pad(q.values, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                           constant_values=q.zero_point) if pad else q.values
        else:
            k, stride = 0, 1
            h_int = q.values.reshape(n, -1)

        if self.protocol == QUANTIZED:
            cols = im2col(h_int, k, stride) if k else h_int
            acc = cols @ wt
        else:
            acc = self._masked(layer, h_int, wt, k, stride)

        rows = q.scale * sw * (acc - q.zero_point * wt.sum(axis=0)).astype(np.float64)
        return _to_output(layer, rows, n)

    def _masked(
        self, layer: LayerSpec, h_int: np.ndarray, wt: np.ndarray, k: int, stride: int
    ) -> np.ndarray:
        fp = self.fp
        assert self.pads is not None
        pad = self.pads.acquire(layer.name, h_int.shape)
        qt = QuantTensor(h_int, 1.0, 0, h_int.shape)
        he = otp_encrypt(qt, pad, fp).values
        he_cols = im2col(he, k, stride) if k else he
        claimed = self.gpu.matmul(layer.name, he_cols, wt % fp.p, fp)

        assert pad.s is not None and pad.s_tilde is not None and pad.g_r is not None
        ok = freivalds_verify(he_cols, claimed, pad.s_tilde, pad.s, fp, self.rounds)
        record = VerifyRecord(layer=layer.name, rounds=self.rounds, passed=ok,
                              pad_id=pad.pad_id)
        self.verify_log.append(record)
        if not ok:
            logger.error(f"Freivalds check failed on {layer.name}: {record.to_json()}")
            raise TSDPIntegrityError(
                f"Offloaded result for {layer.name} failed verification",
                verify_log=self.verify_log,
            )
        return _centered(otp_decrypt_linear(claimed, pad.g_r, fp), fp.p)


def effective_plan(model: ModelGraph, plan: PartitionPlan, protocol: str) -> PartitionPlan:
    """Under MASKED, GPU-placed batch-norm layers execute in the TEE."""
    if protocol != MASKED:
        return plan
    placements = dict(plan.placements)
    for layer in model.layers:
        if layer.kind == BATCHNORM and placements[layer.name] != TEE:
            placements[layer.name] = TEE
    return dataclasses.replace(plan, placements=placements)


def execute_plan(
    model: ModelGraph,
    plan: PartitionPlan,
    x: np.ndarray,
    protocol: str = PLAIN,
    pads: Optional[PadPool] = None,
    gpu: Optional[GpuWorker] = None,
    fp: Optional[FieldParams] = None,
    rounds: int = 1,
    seed: int = 0,
) -> Tuple[np.ndarray, CostReport, List[VerifyRecord]]:
    """
    Route every layer to its world and return (output, cost, verify_log).

    Without a pad pool, MASKED execution runs the offline phase for this
    batch first. A failed verification aborts with TSDPIntegrityError.
    """
    protocol = protocol.upper()
    if protocol not in PROTOCOLS:
        raise TSDPValidationError(f"Unknown protocol '{protocol}'")
    plan.check_total(model)
    xb, single = check_input(model, x)
    ensure_obfuscations(model, plan)
    fp = fp or FieldParams()

    if protocol == MASKED:
        _require_masking_field(fp)
        if pads is None:
            pads = PadPool(fp, seed)
            pads.prepare(model, plan, xb.shape[0], rounds=rounds)

    ex = _Executor(plan, protocol, fp, pads, gpu or GpuWorker(), rounds)
    acts: Dict[str, np.ndarray] = {INPUT: xb}
    for layer in model.layers:
        ins = [acts[s] for s in layer.inputs]
        if layer.is_weighted and plan.placements[layer.name] != TEE:
            acts[layer.name] = ex.offloaded(layer, ins[0])
        else:
            acts[layer.name] = layer_forward(layer, ins)[0]

    out = apply_output_mode(model, acts[model.layers[-1].name])
    cost = utility_of_plan(model, effective_plan(model, plan, protocol))
    logger.debug(
        f"execute_plan {plan.scheme} [{protocol}]: {len(ex.verify_log)} checks, "
        f"pct_flops_tee={cost.pct_flops_tee:.4f}"
    )
    return (out[0] if single else out), cost, ex.verify_log


def verify_log_jsonl(log: List[VerifyRecord]) -> str:
    return "\n".join(record.to_json() for record in log)
