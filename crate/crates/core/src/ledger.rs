//! Append-only hash chain of pseudonym shuffle transactions.
//!
//! ```text
//! block_hash[i] = SHA-256( serialize(txn[i]) || prev_hash[i] )
//! prev_hash[0]  = 0^256
//! prev_hash[i]  = block_hash[i-1]
//! ```
//!
//! Pseudonym ids never enter the chain in the clear; transactions carry
//! SHA-256 commitments instead.

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::protocol::{EntityKind, PseudonymId, RsuId};

/// Name of the chain hash, echoed in report headers.
pub const HASH_ALGORITHM: &str = "SHA-256";

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn of(data: &[u8]) -> Self {
        Digest(Sha256::digest(data).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl std::fmt::Debug for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..16])
    }
}

/// Commitment to a pseudonym id as it enters the ledger.
pub fn commit_pseudonym(id: PseudonymId) -> Digest {
    let mut h = Sha256::new();
    h.update(b"vtwin/pseudonym/v1");
    h.update(id.0.to_be_bytes());
    Digest(h.finalize().into())
}

pub fn commit_seed(seed: u64) -> Digest {
    let mut h = Sha256::new();
    h.update(b"vtwin/shuffle-seed/v1");
    h.update(seed.to_be_bytes());
    Digest(h.finalize().into())
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("transaction epoch {epoch} precedes the chain head epoch {head}")]
    EpochRegression { epoch: f64, head: f64 },
    #[error("transaction epoch must be finite")]
    BadEpoch,
    #[error("transaction repeats a pseudonym commitment")]
    DuplicateCommitment,
    #[error("malformed block {index}: {reason}")]
    Malformed { index: usize, reason: &'static str },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleTransaction {
    pub epoch: f64,
    pub rsu: RsuId,
    pub pool_kind: EntityKind,
    pub commitments: Vec<Digest>,
    pub permutation_seed_commitment: Digest,
}

impl ShuffleTransaction {
    /// Canonical encoding: epoch as big-endian IEEE-754 bits, rsu id (u32 BE),
    /// pool kind byte, commitment count (u32 BE), raw commitments, raw seed
    /// commitment.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 + 1 + 4 + 32 * (self.commitments.len() + 1));
        out.extend_from_slice(&self.epoch.to_bits().to_be_bytes());
        out.extend_from_slice(&self.rsu.0.to_be_bytes());
        out.push(match self.pool_kind {
            EntityKind::Vmu => 0,
            EntityKind::Vt => 1,
        });
        out.extend_from_slice(&(self.commitments.len() as u32).to_be_bytes());
        for c in &self.commitments {
            out.extend_from_slice(&c.0);
        }
        out.extend_from_slice(&self.permutation_seed_commitment.0);
        out
    }

    /// Inverse of [`encode`](Self::encode); the input must be consumed exactly.
    pub fn decode(bytes: &[u8]) -> Result<Self, &'static str> {
        let mut r = Reader { bytes, pos: 0 };
        let epoch = f64::from_bits(u64::from_be_bytes(r.take::<8>()?));
        let rsu = RsuId(u32::from_be_bytes(r.take::<4>()?));
        let pool_kind = match r.take::<1>()?[0] {
            0 => EntityKind::Vmu,
            1 => EntityKind::Vt,
            _ => return Err("unknown pool kind"),
        };
        let n = u32::from_be_bytes(r.take::<4>()?) as usize;
        if n > bytes.len() / 32 {
            return Err("commitment count exceeds record length");
        }
        let mut commitments = Vec::with_capacity(n);
        for _ in 0..n {
            commitments.push(Digest(r.take::<32>()?));
        }
        let permutation_seed_commitment = Digest(r.take::<32>()?);
        if r.pos != bytes.len() {
            return Err("trailing bytes after transaction");
        }
        Ok(Self {
            epoch,
            rsu,
            pool_kind,
            commitments,
            permutation_seed_commitment,
        })
    }

    fn has_distinct_commitments(&self) -> bool {
        let mut sorted = self.commitments.clone();
        sorted.sort_unstable();
        sorted.windows(2).all(|w| w[0] != w[1])
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], &'static str> {
        let end = self.pos.checked_add(N).ok_or("length overflow")?;
        let slice = self.bytes.get(self.pos..end).ok_or("truncated record")?;
        self.pos = end;
        Ok(slice.try_into().expect("exact length"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub transaction: ShuffleTransaction,
    pub prev_hash: Digest,
    pub block_hash: Digest,
}

pub fn block_hash(txn: &ShuffleTransaction, prev: &Digest) -> Digest {
    let mut h = Sha256::new();
    h.update(txn.encode());
    h.update(prev.0);
    Digest(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    Invalid { index: usize },
}

/// One line of the human-readable chain listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigestEntry {
    pub index: usize,
    pub epoch: f64,
    pub block_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    blocks: Vec<Block>,
}

impl Chain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn head(&self) -> Digest {
        self.blocks.last().map_or(Digest::ZERO, |b| b.block_hash)
    }

    pub fn append(&mut self, txn: ShuffleTransaction) -> Result<&Block, LedgerError> {
        if !txn.epoch.is_finite() {
            return Err(LedgerError::BadEpoch);
        }
        if let Some(last) = self.blocks.last() {
            if txn.epoch < last.transaction.epoch {
                return Err(LedgerError::EpochRegression {
                    epoch: txn.epoch,
                    head: last.transaction.epoch,
                });
            }
        }
        if !txn.has_distinct_commitments() {
            return Err(LedgerError::DuplicateCommitment);
        }
        let prev_hash = self.head();
        let block_hash = block_hash(&txn, &prev_hash);
        self.blocks.push(Block {
            transaction: txn,
            prev_hash,
            block_hash,
        });
        Ok(self.blocks.last().expect("just pushed"))
    }

    /// Recomputes every link and hash; reports the first offending block.
    pub fn verify(&self) -> Verdict {
        let mut prev = Digest::ZERO;
        let mut prev_epoch = f64::NEG_INFINITY;
        for (index, b) in self.blocks.iter().enumerate() {
            let epoch = b.transaction.epoch;
            let ok = b.prev_hash == prev
                && block_hash(&b.transaction, &b.prev_hash) == b.block_hash
                && epoch.is_finite()
                && epoch >= prev_epoch;
            if !ok {
                return Verdict::Invalid { index };
            }
            prev = b.block_hash;
            prev_epoch = epoch;
        }
        Verdict::Ok
    }

    pub fn digest_listing(&self) -> Vec<DigestEntry> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(index, b)| DigestEntry {
                index,
                epoch: b.transaction.epoch,
                block_hash: b.block_hash.to_hex(),
            })
            .collect()
    }

    /// Length-prefixed binary export: per block a u32 BE length followed by
    /// `encode(txn) || prev_hash || block_hash`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for b in &self.blocks {
            let body = b.transaction.encode();
            let len = (body.len() + 64) as u32;
            out.extend_from_slice(&len.to_be_bytes());
            out.extend_from_slice(&body);
            out.extend_from_slice(&b.prev_hash.0);
            out.extend_from_slice(&b.block_hash.0);
        }
        out
    }

    /// Parses an export without checking hashes; run [`verify`](Self::verify)
    /// afterwards. Structural damage is reported against the block being read.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LedgerError> {
        let mut blocks = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let index = blocks.len();
            let malformed = |reason| LedgerError::Malformed { index, reason };
            let len_bytes = bytes.get(pos..pos + 4).ok_or(malformed("truncated length prefix"))?;
            let len = u32::from_be_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
            pos += 4;
            let record = bytes
                .get(pos..pos.saturating_add(len))
                .ok_or(malformed("record overruns the file"))?;
            if len < 64 {
                return Err(malformed("record shorter than its hashes"));
            }
            let (body, hashes) = record.split_at(len - 64);
            let transaction = ShuffleTransaction::decode(body).map_err(malformed)?;
            blocks.push(Block {
                transaction,
                prev_hash: Digest(hashes[..32].try_into().expect("32 bytes")),
                block_hash: Digest(hashes[32..].try_into().expect("32 bytes")),
            });
            pos += len;
        }
        Ok(Self { blocks })
    }
}

/// Verdict over an exported byte stream: structural damage counts as an
/// invalid block at the index where parsing stopped.
pub fn verify_bytes(bytes: &[u8]) -> Verdict {
    match Chain::from_bytes(bytes) {
        Ok(chain) => chain.verify(),
        Err(LedgerError::Malformed { index, .. }) => Verdict::Invalid { index },
        Err(_) => Verdict::Invalid { index: 0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn txn(epoch: f64, n: u128) -> ShuffleTransaction {
        ShuffleTransaction {
            epoch,
            rsu: RsuId(3),
            pool_kind: EntityKind::Vt,
            commitments: (0..n).map(|i| commit_pseudonym(PseudonymId(i * 7 + 1))).collect(),
            permutation_seed_commitment: commit_seed(n as u64),
        }
    }

    fn chain_of(n: usize) -> Chain {
        let mut c = Chain::new();
        for i in 0..n {
            c.append(txn(i as f64, (i % 5) as u128)).unwrap();
        }
        c
    }

    #[test]
    fn genesis_and_links() {
        let mut c = Chain::new();
        assert_eq!(c.verify(), Verdict::Ok);
        c.append(txn(1.0, 2)).unwrap();
        assert_eq!(c.blocks()[0].prev_hash, Digest::ZERO);
        c.append(txn(2.0, 3)).unwrap();
        assert_eq!(c.blocks()[1].prev_hash, c.blocks()[0].block_hash);
        assert_eq!(c.verify(), Verdict::Ok);
    }

    #[test]
    fn rejects_epoch_regression() {
        let mut c = Chain::new();
        c.append(txn(5.0, 1)).unwrap();
        assert!(matches!(
            c.append(txn(4.0, 1)),
            Err(LedgerError::EpochRegression { .. })
        ));
        assert_eq!(c.len(), 1);
        c.append(txn(5.0, 0)).unwrap();
    }

    #[test]
    fn rejects_duplicate_commitments() {
        let mut t = txn(1.0, 2);
        t.commitments.push(t.commitments[0]);
        assert_eq!(
            Chain::new().append(t),
            Err(LedgerError::DuplicateCommitment).map(|_: ()| unreachable!())
        );
    }

    #[test]
    fn tampered_block_is_located() {
        let mut c = chain_of(100);
        assert_eq!(c.verify(), Verdict::Ok);
        c.blocks[42].transaction.rsu = RsuId(99);
        assert_eq!(c.verify(), Verdict::Invalid { index: 42 });
    }

    #[test]
    fn export_roundtrip() {
        let c = chain_of(20);
        let bytes = c.to_bytes();
        let back = Chain::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(verify_bytes(&bytes), Verdict::Ok);
        assert_eq!(c.digest_listing()[3].block_hash, c.blocks()[3].block_hash.to_hex());
    }

    proptest! {
        #[test]
        fn encode_decode_identity(epoch in -1e9f64..1e9, rsu in any::<u32>(), n in 0u128..20, vt in any::<bool>()) {
            let mut t = txn(epoch, n);
            t.rsu = RsuId(rsu);
            t.pool_kind = if vt { EntityKind::Vt } else { EntityKind::Vmu };
            prop_assert_eq!(ShuffleTransaction::decode(&t.encode()).unwrap(), t);
        }

        #[test]
        fn append_preserves_validity(epochs in proptest::collection::vec(0.0f64..10.0, 0..30)) {
            let mut sorted = epochs.clone();
            sorted.sort_by(f64::total_cmp);
            let mut c = Chain::new();
            for (i, e) in sorted.iter().enumerate() {
                c.append(txn(*e, (i % 4) as u128)).unwrap();
                prop_assert_eq!(c.verify(), Verdict::Ok);
            }
        }
    }
}
