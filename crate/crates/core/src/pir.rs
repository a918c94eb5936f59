//! XOR-based multi-server PIR over topic blocks, with masked answers
//! aggregated by a proxy server.

use bitvec::prelude::*;
use rand::{CryptoRng, Rng, RngCore};

use crate::dpf::{Seed, SEED_BYTES};
use crate::envelope::{expand_mask, SecretSchedule};
use crate::error::{check_len, invalid, Error, Result};
use crate::model::{xor_into, ReadDatabase};

/// One server's share of a unit vector over the blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PirQuery {
    pub bits: BitVec<u8, Lsb0>,
}

impl PirQuery {
    pub fn zeros(len: usize) -> Self {
        Self {
            bits: bitvec![u8, Lsb0; 0; len],
        }
    }

    pub fn unit(len: usize, j: usize) -> Self {
        let mut q = Self::zeros(len);
        q.bits.set(j, true);
        q
    }

    pub fn random<R: RngCore>(len: usize, rng: &mut R) -> Self {
        let mut q = Self::zeros(len);
        for mut b in q.bits.iter_mut() {
            *b = rng.gen();
        }
        q
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn xor_assign(&mut self, other: &PirQuery) -> Result<()> {
        check_len(self.len(), other.len())?;
        self.bits ^= &other.bits;
        Ok(())
    }

    /// Packed little-endian bit bytes, `⌈len/8⌉` long.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = self.bits.clone();
        v.set_uninitialized(false);
        v.into_vec()
    }

    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self> {
        check_len(len.div_ceil(8), bytes.len())?;
        let mut bits = BitVec::<u8, Lsb0>::from_slice(bytes);
        if bits[len..].any() {
            return Err(Error::Malformed("query padding bits set".into()));
        }
        bits.truncate(len);
        Ok(Self { bits })
    }
}

/// Splits `e_j` into `n_servers` XOR shares; the first `n − 1` are uniform.
pub fn gen_queries<R: RngCore + CryptoRng>(
    target_block: usize,
    n_servers: usize,
    num_blocks: usize,
    rng: &mut R,
) -> Result<Vec<PirQuery>> {
    if n_servers < 2 {
        return Err(invalid("PIR needs at least two servers"));
    }
    if target_block >= num_blocks {
        return Err(invalid(format!(
            "block {target_block} outside {num_blocks} blocks"
        )));
    }
    let mut last = PirQuery::unit(num_blocks, target_block);
    let mut out = Vec::with_capacity(n_servers);
    for _ in 0..n_servers - 1 {
        let q = PirQuery::random(num_blocks, rng);
        last.xor_assign(&q)?;
        out.push(q);
    }
    out.push(last);
    Ok(out)
}

/// XOR of the blocks selected by `query`.
pub fn answer(query: &PirQuery, db: &ReadDatabase) -> Result<Vec<u8>> {
    if query.len() != db.len() {
        return Err(invalid(format!(
            "query over {} blocks, database has {}",
            query.len(),
            db.len()
        )));
    }
    let mut out = vec![0u8; db.block_size()];
    for k in query.bits.iter_ones() {
        xor_into(&mut out, db.block(k));
    }
    Ok(out)
}

pub fn mask_answer(ans: &[u8], secret: &SecretSchedule) -> Vec<u8> {
    let mut out = expand_mask(secret, ans.len());
    xor_into(&mut out, ans);
    out
}

pub fn proxy_combine(responses: &[Vec<u8>]) -> Result<Vec<u8>> {
    let Some(first) = responses.first() else {
        return Err(invalid("no responses to combine"));
    };
    let mut out = vec![0u8; first.len()];
    for r in responses {
        check_len(first.len(), r.len())?;
        xor_into(&mut out, r);
    }
    Ok(out)
}

pub fn decode_retrieval(combined: &[u8], secrets: &[SecretSchedule]) -> Vec<u8> {
    let mut out = combined.to_vec();
    for s in secrets {
        xor_into(&mut out, &expand_mask(s, combined.len()));
    }
    out
}

/// A server's stored share of one subscription slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubscriptionRecord {
    pub client_id: u64,
    pub slot: u8,
    pub query: PirQuery,
    pub secret: SecretSchedule,
    pub directory_version: u64,
}

/// Plaintext of a subscription frame: `[u8 slot | 16B seed | u32 ℓ_r | bits]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubscriptionBody {
    pub slot: u8,
    pub seed: Seed,
    pub query: PirQuery,
}

impl SubscriptionBody {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + SEED_BYTES + 4 + self.query.len().div_ceil(8));
        out.push(self.slot);
        out.extend_from_slice(&self.seed);
        out.extend_from_slice(&(self.query.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.query.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEAD: usize = 1 + SEED_BYTES + 4;
        if bytes.len() < HEAD {
            return Err(Error::Malformed("short subscription body".into()));
        }
        let len = u32::from_le_bytes(bytes[HEAD - 4..HEAD].try_into().unwrap()) as usize;
        Ok(Self {
            slot: bytes[0],
            seed: bytes[1..1 + SEED_BYTES].try_into().unwrap(),
            query: PirQuery::from_bytes(&bytes[HEAD..], len)?,
        })
    }
}

/// `[u64 round | u64 client_id | u8 slot | u32 B | B bytes]`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedAnswer {
    pub round: u64,
    pub client_id: u64,
    pub slot: u8,
    pub payload: Vec<u8>,
}

pub const MASKED_ANSWER_HEADER: usize = 8 + 8 + 1 + 4;

impl MaskedAnswer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MASKED_ANSWER_HEADER + self.payload.len());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.push(self.slot);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MASKED_ANSWER_HEADER {
            return Err(Error::Malformed("short answer frame".into()));
        }
        let len = u32::from_le_bytes(bytes[17..21].try_into().unwrap()) as usize;
        check_len(MASKED_ANSWER_HEADER + len, bytes.len())?;
        Ok(Self {
            round: u64::from_le_bytes(bytes[..8].try_into().unwrap()),
            client_id: u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
            slot: bytes[16],
            payload: bytes[MASKED_ANSWER_HEADER..].to_vec(),
        })
    }
}
