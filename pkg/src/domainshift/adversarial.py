"""Adversarial domain-adaptation compositions.

Five sub-networks: a private encoder per domain, a shared encoder, a domain
discriminator, and a class classifier. Two training modes differ in what the
generators are pushed toward:

- faraday: the generator loss is the inverse discriminator loss (generators
  are rewarded for fooling the discriminator), driving domain-invariant
  shared representations.
- dirac: the generator loss IS the discriminator loss (critic style), and
  each private encoder receives only its own domain's classification loss.

Gradient routing applies the three loss weights: the classifier and
discriminator update from beta times their own losses; generators update
from beta times the adversarial term plus gamma times the classification
term. The adversarial term reaching the generators is backpropagated through
a frozen discriminator (its parameter gradients from that pass are
discarded), which realizes "fool the discriminator" without a
gradient-reversal layer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError, ShapeError
from .nn import (
    ForwardCache,
    GradBundle,
    NetworkParams,
    backward,
    checkpoint_bytes,
    checkpoint_from_bytes,
    cross_entropy,
    dense_network,
    forward,
    grad_add,
    grad_scale,
    set_mode,
)

ADVERSARIAL_MODES = ("faraday", "dirac")
SUBNET_NAMES = ("private_source", "private_target", "shared", "discriminator", "classifier")
CONTAINER_MAGIC = b"DSCA"
CONTAINER_VERSION = 1
_CONTAINER_HEADER = "<4sIQ"


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0  # weight of the target classification term
    beta: float = 1.0  # weight of adversarial gradients (and D/C updates)
    gamma_w: float = 1.0  # weight of classification gradients into generators

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0 or self.gamma_w < 0:
            raise ConfigError(f"loss weights must be nonnegative, got {self}")


@dataclass
class AdversarialNet:
    private_source: NetworkParams  # domain-specific encoder for source rows
    private_target: NetworkParams
    shared: NetworkParams  # common representation encoder
    discriminator: NetworkParams  # which domain did a representation come from
    classifier: NetworkParams  # cut vs non-cut head
    mode: str = "faraday"

    def __post_init__(self):
        if self.mode not in ADVERSARIAL_MODES:
            raise ConfigError(f"mode must be one of {ADVERSARIAL_MODES}, got {self.mode!r}")
        ps, pt = self.private_source, self.private_target
        if ps.in_dim != pt.in_dim or ps.out_dim != pt.out_dim:
            raise ShapeError("private encoders must share input/output dims")
        if self.shared.in_dim != ps.out_dim:
            raise ShapeError(
                f"shared encoder input {self.shared.in_dim} != private output {ps.out_dim}"
            )
        for name in ("discriminator", "classifier"):
            head: NetworkParams = getattr(self, name)
            if head.in_dim != self.shared.out_dim:
                raise ShapeError(f"{name} input {head.in_dim} != shared output {self.shared.out_dim}")
            if head.out_dim != 2:
                raise ShapeError(f"{name} must have 2 outputs, got {head.out_dim}")

    def parts(self) -> dict[str, NetworkParams]:
        return {name: getattr(self, name) for name in SUBNET_NAMES}


def replace_parts(net: AdversarialNet, **parts: NetworkParams) -> AdversarialNet:
    return replace(net, **parts)


def set_net_mode(net: AdversarialNet, mode: str) -> AdversarialNet:
    return replace(net, **{k: set_mode(v, mode) for k, v in net.parts().items()})


def build_adversarial(in_dim: int = 1025, private_hidden: int = 768,
                      private_out: int = 512, shared_out: int = 200,
                      head_hidden: int = 100, seed: int = 0,
                      mode: str = "faraday") -> AdversarialNet:
    """Default dims: 1025 -> 768 -> 512 private (sigmoid), 512 -> 200 shared
    (relu), 200 -> 100 -> 2 heads (relu, softmax). No dropout anywhere."""
    return AdversarialNet(
        dense_network([in_dim, private_hidden, private_out], ["sigmoid", "sigmoid"], seed=seed),
        dense_network([in_dim, private_hidden, private_out], ["sigmoid", "sigmoid"], seed=seed + 1),
        dense_network([private_out, shared_out], ["relu"], seed=seed + 2),
        dense_network([shared_out, head_hidden, 2], ["relu", "softmax"], seed=seed + 3),
        dense_network([shared_out, head_hidden, 2], ["relu", "softmax"], seed=seed + 4),
        mode=mode,
    )


def build_vanilla(in_dim: int = 1025, seed: int = 0) -> NetworkParams:
    """Baseline classifier: in -> 512 relu -> dropout .2 -> 200 relu ->
    dropout .2 -> 2 softmax."""
    return dense_network([in_dim, 512, 200, 2], ["relu", "relu", "softmax"],
                         dropout=[0.2, 0.2], seed=seed)


def build_probe(in_dim: int = 1025, seed: int = 0) -> NetworkParams:
    """Transform-comparison probe: in -> 512 sigmoid -> 2 softmax."""
    return dense_network([in_dim, 512, 2], ["sigmoid", "softmax"], seed=seed)


def domain_onehot(n_source: int, n_target: int, flipped: bool = False):
    """One-hot domain labels: source rows [1,0], target rows [0,1]."""
    src = np.tile([0.0, 1.0] if flipped else [1.0, 0.0], (n_source, 1))
    tgt = np.tile([1.0, 0.0] if flipped else [0.0, 1.0], (n_target, 1))
    return src, tgt


@dataclass
class PairCapture:
    """Everything one joint forward produced, plus the caches backward needs."""

    net: AdversarialNet
    rep_source: np.ndarray  # shared representation of the source batch
    rep_target: np.ndarray
    domain_probs_source: np.ndarray
    domain_probs_target: np.ndarray
    class_probs_source: np.ndarray
    class_probs_target: np.ndarray
    caches: dict[str, ForwardCache]


def forward_pair(net: AdversarialNet, x_source, x_target, rng=None) -> PairCapture:
    """Push one batch per domain through its private path and both heads."""
    x_s = np.asarray(x_source, dtype=np.float64)
    x_t = np.asarray(x_target, dtype=np.float64)
    if x_s.ndim != 2 or x_t.ndim != 2:
        raise ShapeError("domain batches must be 2-D")
    if x_s.shape[0] == 0 or x_t.shape[0] == 0:
        raise ShapeError("both domain batches need at least one row")
    caches: dict[str, ForwardCache] = {}
    h_s, caches["private_source"] = forward(net.private_source, x_s, rng)
    h_t, caches["private_target"] = forward(net.private_target, x_t, rng)
    rep_s, caches["shared_source"] = forward(net.shared, h_s, rng)
    rep_t, caches["shared_target"] = forward(net.shared, h_t, rng)
    d_s, caches["disc_source"] = forward(net.discriminator, rep_s, rng)
    d_t, caches["disc_target"] = forward(net.discriminator, rep_t, rng)
    y_s, caches["cls_source"] = forward(net.classifier, rep_s, rng)
    y_t, caches["cls_target"] = forward(net.classifier, rep_t, rng)
    return PairCapture(net, rep_s, rep_t, d_s, d_t, y_s, y_t, caches)


@dataclass
class AdversarialLosses:
    mode: str
    classification: float  # class_source + lam * class_target
    class_source: float
    class_target: float  # unweighted target term
    discriminator: float
    generator: float
    cap: PairCapture
    # loss gradients w.r.t. head logits, one per (head, domain) pair
    d_class_source: np.ndarray
    d_class_target: np.ndarray  # unweighted; routing applies lam where due
    d_disc_source: np.ndarray
    d_disc_target: np.ndarray
    d_gen_source: np.ndarray  # generator-loss gradient at the disc logits
    d_gen_target: np.ndarray


def _losses(cap: PairCapture, y_source, y_target, weights: LossWeights,
            mode: str, flipped_domains: bool = False) -> AdversarialLosses:
    d_src, d_tgt = domain_onehot(cap.domain_probs_source.shape[0],
                                 cap.domain_probs_target.shape[0], flipped_domains)
    l_cs, g_cs = cross_entropy(cap.class_probs_source, y_source)
    l_ct, g_ct = cross_entropy(cap.class_probs_target, y_target)
    l_ds, g_ds = cross_entropy(cap.domain_probs_source, d_src)
    l_dt, g_dt = cross_entropy(cap.domain_probs_target, d_tgt)
    l_d = l_ds + l_dt
    if mode == "faraday":
        # inverse discriminator loss: cross-entropy against flipped one-hots
        l_gs, g_gs = cross_entropy(cap.domain_probs_source, 1.0 - d_src)
        l_gt, g_gt = cross_entropy(cap.domain_probs_target, 1.0 - d_tgt)
        l_g = l_gs + l_gt
    else:
        l_g, g_gs, g_gt = l_d, g_ds, g_dt
    return AdversarialLosses(
        mode, l_cs + weights.lam * l_ct, l_cs, l_ct, l_d, l_g, cap,
        g_cs, g_ct, g_ds, g_dt, g_gs, g_gt,
    )


def faraday_losses(cap: PairCapture, y_source, y_target, weights: LossWeights,
                   flipped_domains: bool = False) -> AdversarialLosses:
    """L_c = L_cs + lam L_ct; L_d = source + target domain CE; L_g = inverse
    domain CE (labels complemented)."""
    return _losses(cap, y_source, y_target, weights, "faraday", flipped_domains)


def dirac_losses(cap: PairCapture, y_source, y_target, weights: LossWeights,
                 flipped_domains: bool = False) -> AdversarialLosses:
    """Same classification terms; the generator loss equals the discriminator
    loss (critic form)."""
    return _losses(cap, y_source, y_target, weights, "dirac", flipped_domains)


@dataclass
class AdversarialGrads:
    private_source: GradBundle
    private_target: GradBundle
    shared: GradBundle
    discriminator: GradBundle
    classifier: GradBundle

    def parts(self) -> dict[str, GradBundle]:
        return {name: getattr(self, name) for name in SUBNET_NAMES}


def route_gradients(net: AdversarialNet, cap: PairCapture, losses: AdversarialLosses,
                    weights: LossWeights, mode: str) -> AdversarialGrads:
    """Weighted gradients for every sub-network.

    classifier:    beta * d(classification)/dC, target term lam-weighted
    discriminator: beta * d(discriminator loss)/dD
    shared:        beta * d(generator loss)/dG + gamma * d(classification)/dG
    private nets:  same shape as shared, except in dirac mode each private
                   net's classification term is its own domain's loss,
                   unweighted by lam.

    The generator-loss path treats the discriminator as frozen: its parameter
    gradients from that pass are discarded and only the input gradient flows
    down.
    """
    if mode not in ADVERSARIAL_MODES:
        raise ConfigError(f"unknown routing mode {mode!r}")
    if losses.mode != mode:
        raise ContractError(f"losses were computed for {losses.mode!r}, not {mode!r}")
    if losses.cap is not cap:
        raise ContractError("losses were computed from a different forward capture")
    beta, gamma, lam = weights.beta, weights.gamma_w, weights.lam
    caches = cap.caches

    # classifier head: beta * combined classification loss
    c_src, dx_cls_s = backward(net.classifier, caches["cls_source"], losses.d_class_source)
    c_tgt, dx_cls_t = backward(net.classifier, caches["cls_target"], losses.d_class_target)
    grad_classifier = grad_scale(grad_add(c_src, grad_scale(c_tgt, lam)), beta)

    # discriminator head: beta * its own loss
    d_src, _ = backward(net.discriminator, caches["disc_source"], losses.d_disc_source)
    d_tgt, _ = backward(net.discriminator, caches["disc_target"], losses.d_disc_target)
    grad_discriminator = grad_scale(grad_add(d_src, d_tgt), beta)

    # adversarial pressure on the generators: generator loss through frozen D
    _, dx_adv_s = backward(net.discriminator, caches["disc_source"], losses.d_gen_source)
    _, dx_adv_t = backward(net.discriminator, caches["disc_target"], losses.d_gen_target)

    # shared encoder: per-term backward passes, combined linearly
    g_adv_s, dpriv_adv_s = backward(net.shared, caches["shared_source"], dx_adv_s)
    g_adv_t, dpriv_adv_t = backward(net.shared, caches["shared_target"], dx_adv_t)
    g_cls_s, dpriv_cls_s = backward(net.shared, caches["shared_source"], dx_cls_s)
    g_cls_t, dpriv_cls_t = backward(net.shared, caches["shared_target"], dx_cls_t)
    grad_shared = grad_add(
        grad_scale(grad_add(g_adv_s, g_adv_t), beta),
        grad_scale(grad_add(g_cls_s, grad_scale(g_cls_t, lam)), gamma),
    )

    # private encoders: in dirac mode the target's classification term is its
    # own-domain loss, unweighted by lam; the source side is identical in
    # both modes because the lam-weighted term never flows through it
    lam_private_target = 1.0 if mode == "dirac" else lam
    up_s = beta * dpriv_adv_s + gamma * dpriv_cls_s
    up_t = beta * dpriv_adv_t + gamma * lam_private_target * dpriv_cls_t
    grad_private_source, _ = backward(net.private_source, caches["private_source"], up_s)
    grad_private_target, _ = backward(net.private_target, caches["private_target"], up_t)

    return AdversarialGrads(grad_private_source, grad_private_target,
                            grad_shared, grad_discriminator, grad_classifier)


def encode(net: AdversarialNet, x, domain: str) -> np.ndarray:
    """Shared representation of a batch, routed through its domain's private
    encoder, in infer mode."""
    if domain not in ("source", "target"):
        raise ConfigError(f"domain must be source or target, got {domain!r}")
    private = net.private_source if domain == "source" else net.private_target
    h, _ = forward(set_mode(private, "infer"), x)
    rep, _ = forward(set_mode(net.shared, "infer"), h)
    return rep


def predict_classes(net: AdversarialNet, x, domain: str) -> np.ndarray:
    probs, _ = forward(set_mode(net.classifier, "infer"), encode(net, x, domain))
    return probs


# ---------------------------------------------------------------------------
# Container checkpoint: header JSON, then one length-prefixed sub-network
# checkpoint per section. Byte layout in docs/formats.md.
# ---------------------------------------------------------------------------


def adversarial_bytes(net: AdversarialNet, extra: dict | None = None) -> bytes:
    header = {"mode": net.mode, "sections": list(SUBNET_NAMES), "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = [struct.pack(_CONTAINER_HEADER, CONTAINER_MAGIC, CONTAINER_VERSION, len(blob)), blob]
    for name in SUBNET_NAMES:
        section = checkpoint_bytes(getattr(net, name))
        out.append(struct.pack("<Q", len(section)))
        out.append(section)
    return b"".join(out)


def adversarial_from_bytes(raw: bytes, origin: str = "checkpoint") -> tuple[AdversarialNet, dict]:
    head = struct.calcsize(_CONTAINER_HEADER)
    if len(raw) < head:
        raise FormatError(f"{origin}: shorter than the container header")
    magic, version, blob_len = struct.unpack_from(_CONTAINER_HEADER, raw, 0)
    if magic != CONTAINER_MAGIC:
        raise FormatError(f"{origin}: bad magic {magic!r}, expected {CONTAINER_MAGIC!r}")
    if version != CONTAINER_VERSION:
        raise FormatError(f"{origin}: unsupported container version {version}")
    if len(raw) < head + blob_len:
        raise FormatError(f"{origin}: truncated header JSON")
    try:
        header = json.loads(raw[head : head + blob_len])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{origin}: invalid header JSON") from exc
    if header.get("sections") != list(SUBNET_NAMES):
        raise FormatError(f"{origin}: unexpected section list {header.get('sections')}")
    pos = head + blob_len
    parts = {}
    for name in SUBNET_NAMES:
        if len(raw) < pos + 8:
            raise FormatError(f"{origin}: truncated before section {name}")
        (length,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        if len(raw) < pos + length:
            raise FormatError(f"{origin}: truncated section {name}")
        parts[name], _ = checkpoint_from_bytes(raw[pos : pos + length], origin=f"{origin}:{name}")
        pos += length
    if pos != len(raw):
        raise FormatError(f"{origin}: {len(raw) - pos} trailing bytes")
    net = AdversarialNet(mode=header["mode"], **parts)
    return net, header.get("extra", {})


def save_adversarial(net: AdversarialNet, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(adversarial_bytes(net, extra))


def load_adversarial(path) -> tuple[AdversarialNet, dict]:
    return adversarial_from_bytes(Path(path).read_bytes(), origin=str(path))
