"""Keys, signed messages, the content store and the two ledger tiers.

Block hashing layout (all integers big-endian)::

    index u64 | prev_hash 32B | timestamp u64 | tx_count u64 | gas_used f64
    | for each transaction: length u32 | bytes

SHA-256 is used for message digests, content ids and block hashes.
Signatures are Ed25519 (32-byte public keys, 64-byte signatures).
"""

from __future__ import annotations

import functools
import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

SIGNATURE_SCHEME = "ed25519"
HASH_ALGORITHM = "sha256"
LEDGER_FORMAT = "distbvnet-ledger"
LEDGER_VERSION = 1
ZERO_HASH = bytes(32)

# transaction kinds
VOTE = "vote"
MESSAGE_DIGEST = "message-digest"
CLUSTER_REGISTRATION = "cluster-registration"
VERIFICATION_RECORD = "verification-record"


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# -- keys and signatures ----------------------------------------------------

@dataclass(frozen=True)
class KeyPair:
    public: bytes
    private: Ed25519PrivateKey = field(repr=False, compare=False)

    def sign(self, data: bytes) -> bytes:
        return self.private.sign(data)


def generate_keypair(seed: int, *entity) -> KeyPair:
    """Deterministic key pair for ``entity`` under the scenario ``seed``."""
    material = hashlib.sha256(b"distbvnet-key" + seed.to_bytes(8, "big"))
    for part in entity:
        material.update(b"\x1f" + str(part).encode())
    private = Ed25519PrivateKey.from_private_bytes(material.digest())
    public = private.public_key().public_bytes_raw()
    return KeyPair(public, private)


@functools.lru_cache(maxsize=4096)
def _public_key(raw: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(raw)


def verify_signature(public: bytes, signature: bytes, data: bytes) -> bool:
    try:
        _public_key(public).verify(signature, data)
    except (InvalidSignature, ValueError):
        return False
    return True


# -- content store ----------------------------------------------------------

class ContentStore:
    """Content-addressed payload store; the key of a payload is its SHA-256."""

    def __init__(self):
        self.blobs: dict[bytes, bytes] = {}

    def put(self, payload: bytes) -> bytes:
        cid = sha256(payload)
        self.blobs[cid] = payload
        return cid

    def get(self, cid: bytes) -> Optional[bytes]:
        return self.blobs.get(cid)

    def pop(self, cid: bytes) -> Optional[bytes]:
        return self.blobs.pop(cid, None)

    def __contains__(self, cid: bytes) -> bool:
        return cid in self.blobs

    def __len__(self) -> int:
        return len(self.blobs)


# -- signed messages --------------------------------------------------------

@dataclass(frozen=True)
class SignedMessage:
    payload_digest: bytes
    content_id: bytes
    sender: int
    cluster_id: int
    round: int
    signature: bytes

    def signed_bytes(self) -> bytes:
        return message_signing_bytes(self.payload_digest, self.sender, self.cluster_id, self.round)


def message_signing_bytes(digest: bytes, sender: int, cluster_id: int, round_: int) -> bytes:
    return digest + struct.pack(">QQQ", sender, cluster_id, round_)


class Verification(NamedTuple):
    accepted: bool
    reason: Optional[str] = None
    step: Optional[int] = None


ACCEPTED = Verification(True)


def sign_message(m: bytes, sender: int, cluster_id: int, round_: int, key: KeyPair,
                 store: ContentStore) -> SignedMessage:
    """Store the payload and sign ``(digest, sender, cluster, round)``."""
    digest = store.put(m)
    sig = key.sign(message_signing_bytes(digest, sender, cluster_id, round_))
    return SignedMessage(digest, digest, sender, cluster_id, round_, sig)


def verify_message(sm: SignedMessage, sender_public_key: bytes, store: ContentStore) -> Verification:
    if not verify_signature(sender_public_key, sm.signature, sm.signed_bytes()):
        return Verification(False, "bad-signature")
    if sm.content_id != sm.payload_digest:
        return Verification(False, "content-mismatch")
    payload = store.get(sm.content_id)
    if payload is None:
        return Verification(False, "missing-content")
    if sha256(payload) != sm.payload_digest:
        return Verification(False, "content-mismatch")
    return ACCEPTED


# -- transactions -----------------------------------------------------------

def encode_tx(kind: str, **fields) -> bytes:
    """Canonical transaction bytes: compact JSON with sorted keys, bytes as hex."""
    doc = {"kind": kind}
    for k, v in fields.items():
        doc[k] = v.hex() if isinstance(v, (bytes, bytearray)) else v
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def decode_tx(raw: bytes) -> dict:
    return json.loads(raw)


def digest_tx(digest: bytes, sender: int, cluster_id: int, round_: int) -> bytes:
    return encode_tx(MESSAGE_DIGEST, digest=digest, sender=sender, cluster=cluster_id, round=round_)


def batch_root(digests: Iterable[bytes]) -> bytes:
    h = hashlib.sha256()
    for d in digests:
        h.update(d)
    return h.digest()


def attestation_signing_bytes(root: bytes, cluster_id: int, round_: int) -> bytes:
    return b"attest" + root + struct.pack(">QQ", cluster_id, round_)


def attestation_tx(key: KeyPair, cluster_id: int, round_: int, digests: Sequence[bytes]) -> bytes:
    """Cluster-head signature over every message digest committed in one block."""
    root = batch_root(digests)
    sig = key.sign(attestation_signing_bytes(root, cluster_id, round_))
    return encode_tx(VERIFICATION_RECORD, scope="batch", cluster=cluster_id, round=round_,
                     batch_root=root, public_key=key.public, signature=sig)


def registration_tx(cluster_id: int, rsu_id: int, head: int, public_key: bytes, round_: int) -> bytes:
    return encode_tx(CLUSTER_REGISTRATION, cluster=cluster_id, rsu=rsu_id, head=head,
                     public_key=public_key, round=round_)


def anchor_tx(cluster_id: int, height: int, block_digest: bytes) -> bytes:
    """Cloud-chain record pointing at a cluster-ledger block."""
    return encode_tx(VERIFICATION_RECORD, scope="anchor", cluster=cluster_id, height=height,
                     block_hash=block_digest)


# -- gas --------------------------------------------------------------------

@dataclass(frozen=True)
class GasModel:
    g0: float = 4000.0
    cb: float = 1400.0
    fixed_overhead: float = 0.0

    @property
    def per_tx(self) -> float:
        return self.g0 + self.cb

    @classmethod
    def calibrated(cls, slope: float, intercept: float) -> "GasModel":
        """Affine model from a fitted line: per-transaction gas plus a block overhead."""
        return cls(g0=slope, cb=0.0, fixed_overhead=intercept)


def gas_cost(tx_count: int, gas_model: GasModel = GasModel()) -> float:
    if tx_count < 0:
        raise ValueError("tx_count must be >= 0")
    return (gas_model.g0 + gas_model.cb) * tx_count + gas_model.fixed_overhead


class GasFit(NamedTuple):
    slope: float
    intercept: float
    r_squared: float


def fit_gas_table(table: Sequence[tuple[float, float]]) -> GasFit:
    """Ordinary least squares of gas against transaction count."""
    if len(table) < 2:
        raise ValueError("need at least two rows")
    xs = [float(x) for x, _ in table]
    ys = [float(y) for _, y in table]
    if len(set(xs)) < 2:
        raise ValueError("need at least two distinct transaction counts")
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    slope = sxy / sxx
    intercept = my - slope * mx
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    ss_tot = sum((y - my) ** 2 for y in ys)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return GasFit(slope, intercept, r2)


def read_gas_table(path: str | Path) -> list[tuple[float, float]]:
    """Two-column CSV ``tx_count,gas``; a non-numeric first row is taken as a header."""
    rows = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise ValueError(f"{path}:{i + 1}: expected two columns")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError:
                if i == 0:
                    continue
                raise ValueError(f"{path}:{i + 1}: non-numeric value") from None
    return rows


# -- blocks and chains ------------------------------------------------------

@dataclass(frozen=True)
class Block:
    index: int
    prev_hash: bytes
    timestamp: int
    transactions: tuple[bytes, ...]
    tx_count: int
    gas_used: float
    hash: bytes


def block_hash(index: int, prev_hash: bytes, timestamp: int, transactions: Sequence[bytes],
               tx_count: int, gas_used: float) -> bytes:
    h = hashlib.sha256()
    h.update(struct.pack(">Q", index))
    h.update(prev_hash)
    h.update(struct.pack(">QQd", timestamp, tx_count, gas_used))
    for tx in transactions:
        h.update(struct.pack(">I", len(tx)))
        h.update(tx)
    return h.digest()


def make_block(index: int, prev_hash: bytes, timestamp: int, transactions: Sequence[bytes],
               gas_model: GasModel) -> Block:
    txs = tuple(transactions)
    gas = gas_cost(len(txs), gas_model)
    return Block(index, prev_hash, timestamp, txs, len(txs), gas,
                 block_hash(index, prev_hash, timestamp, txs, len(txs), gas))


def genesis_block(gas_model: GasModel) -> Block:
    # the genesis block carries no transactions and is charged no gas
    return Block(0, ZERO_HASH, 0, (), 0, 0.0, block_hash(0, ZERO_HASH, 0, (), 0, 0.0))


class ChainCheck(NamedTuple):
    valid: bool
    at_height: Optional[int] = None
    reason: Optional[str] = None


class InvalidChainError(RuntimeError):
    pass


class Ledger:
    """An append-only hash chain of blocks for one tier (``cluster`` or ``cloud``)."""

    def __init__(self, tier: str, gas_model: GasModel = GasModel(), owner: Optional[int] = None):
        if tier not in ("cluster", "cloud"):
            raise ValueError(f"unknown tier {tier!r}")
        self.tier = tier
        self.owner = owner
        self.gas_model = gas_model
        self._blocks: list[Block] = [genesis_block(gas_model)]
        self._checked = 1
        self._digests: dict[bytes, tuple[int, int]] = {}
        self._cluster_keys: set[tuple[int, bytes]] = set()

    @classmethod
    def from_blocks(cls, tier: str, blocks: Iterable[Block], gas_model: GasModel = GasModel(),
                    owner: Optional[int] = None) -> "Ledger":
        """Wrap existing blocks without checking them; call validate_chain afterwards."""
        led = cls(tier, gas_model, owner)
        led._blocks = list(blocks)
        led._checked = 0
        led._reindex()
        return led

    @property
    def blocks(self) -> tuple[Block, ...]:
        return tuple(self._blocks)

    @property
    def height(self) -> int:
        return len(self._blocks) - 1

    @property
    def tip(self) -> Block:
        return self._blocks[-1]

    def __len__(self) -> int:
        return len(self._blocks)

    def _index_block(self, block: Block) -> None:
        for pos, raw in enumerate(block.transactions):
            # malformed records (e.g. from a tampered import) are left unindexed
            try:
                tx = decode_tx(raw)
                kind = tx.get("kind")
                if kind == MESSAGE_DIGEST:
                    self._digests.setdefault(bytes.fromhex(tx["digest"]), (block.index, pos))
                elif kind == CLUSTER_REGISTRATION:
                    self._cluster_keys.add((tx["cluster"], bytes.fromhex(tx["public_key"])))
            except (ValueError, KeyError, TypeError, AttributeError):
                continue

    def _reindex(self) -> None:
        self._digests.clear()
        self._cluster_keys.clear()
        for b in self._blocks:
            self._index_block(b)

    def find_digest(self, digest: bytes) -> Optional[tuple[Block, dict]]:
        loc = self._digests.get(digest)
        if loc is None:
            return None
        block = self._blocks[loc[0]]
        return block, decode_tx(block.transactions[loc[1]])

    def is_registered(self, cluster_id: int, public_key: bytes) -> bool:
        return (cluster_id, public_key) in self._cluster_keys

    def total_gas(self) -> float:
        return sum(b.gas_used for b in self._blocks)

    def total_transactions(self) -> int:
        return sum(b.tx_count for b in self._blocks)


def _check_block(block: Block, prev: Optional[Block], gas_model: GasModel) -> Optional[str]:
    if prev is None:
        if block.index != 0:
            return "index"
        if block.prev_hash != ZERO_HASH:
            return "genesis-prev-hash"
        if block.tx_count != len(block.transactions):
            return "tx-count"
        if block.gas_used != 0.0:
            return "gas-mismatch"
    else:
        if block.index != prev.index + 1:
            return "index"
        if block.prev_hash != prev.hash:
            return "prev-hash-mismatch"
        if block.tx_count != len(block.transactions):
            return "tx-count"
        if block.gas_used != gas_cost(block.tx_count, gas_model):
            return "gas-mismatch"
    recomputed = block_hash(block.index, block.prev_hash, block.timestamp, block.transactions,
                            block.tx_count, block.gas_used)
    if recomputed != block.hash:
        return "hash-mismatch"
    return None


def validate_chain(ledger: Ledger, start: int = 0) -> ChainCheck:
    """Check hashes, links, index order and gas from height ``start``; first failure wins."""
    blocks = ledger._blocks
    if not blocks:
        return ChainCheck(False, 0, "empty")
    for i in range(start, len(blocks)):
        reason = _check_block(blocks[i], blocks[i - 1] if i else None, ledger.gas_model)
        if reason:
            return ChainCheck(False, i, reason)
    return ChainCheck(True)


def append_block(ledger: Ledger, transactions: Sequence[bytes], timestamp: int = 0) -> Ledger:
    """Append a block of ``transactions``; refuses to extend a chain that fails validation.

    Blocks are immutable and only this function extends the private block
    list, so blocks already checked are not re-checked on every append.
    """
    check = validate_chain(ledger, start=ledger._checked)
    if not check.valid:
        raise InvalidChainError(f"chain invalid at height {check.at_height}: {check.reason}")
    prev = ledger.tip
    block = make_block(prev.index + 1, prev.hash, timestamp, transactions, ledger.gas_model)
    ledger._blocks.append(block)
    ledger._checked = len(ledger._blocks)
    ledger._index_block(block)
    return ledger


def tamper_transaction_byte(block: Block, tx_index: int, byte_index: int, new_value: int) -> Block:
    """Copy of ``block`` with one transaction byte replaced and the stored hash left alone."""
    txs = list(block.transactions)
    raw = bytearray(txs[tx_index])
    raw[byte_index] = new_value
    txs[tx_index] = bytes(raw)
    return replace(block, transactions=tuple(txs))


# -- export -----------------------------------------------------------------

def ledger_header(ledger: Ledger) -> dict:
    return {
        "format": LEDGER_FORMAT,
        "version": LEDGER_VERSION,
        "tier": ledger.tier,
        "owner": ledger.owner,
        "hash": HASH_ALGORITHM,
        "signature_scheme": SIGNATURE_SCHEME,
        "gas_model": {"g0": ledger.gas_model.g0, "cb": ledger.gas_model.cb,
                      "fixed_overhead": ledger.gas_model.fixed_overhead},
    }


def block_record(block: Block) -> dict:
    return {
        "index": block.index,
        "prev_hash": block.prev_hash.hex(),
        "timestamp": block.timestamp,
        "tx_count": block.tx_count,
        "gas_used": block.gas_used,
        "hash": block.hash.hex(),
        "transactions": [tx.hex() for tx in block.transactions],
    }


def export_ledger(ledger: Ledger, path: str | Path) -> None:
    """Newline-delimited JSON: a header line, then one block per line."""
    with open(path, "w") as fh:
        fh.write(json.dumps(ledger_header(ledger), sort_keys=True) + "\n")
        for b in ledger.blocks:
            fh.write(json.dumps(block_record(b), sort_keys=True) + "\n")


def import_ledger(path: str | Path) -> Ledger:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != LEDGER_FORMAT:
            raise ValueError(f"{path}: not a {LEDGER_FORMAT} file")
        blocks = []
        for line in fh:
            r = json.loads(line)
            blocks.append(Block(r["index"], bytes.fromhex(r["prev_hash"]), r["timestamp"],
                                tuple(bytes.fromhex(t) for t in r["transactions"]),
                                r["tx_count"], float(r["gas_used"]), bytes.fromhex(r["hash"])))
    return Ledger.from_blocks(header["tier"], blocks, GasModel(**header["gas_model"]), header["owner"])
