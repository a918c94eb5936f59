//! Write-request audit: checks that the XOR of all servers' expansions of a
//! request is one-hot, exchanging only a 32-byte sketch per server.
//!
//! Each row `j` is first folded to a 64-bit digest `d_j = Σ_c σ_c·chunk_c`
//! with per-request coefficients `σ_c`. With per-row weights `r_j` the
//! sketch is `L = Σ r_j·d_j`, `Q = Σ r_j²·d_j` over GF(2^64). Everything is
//! linear, so the servers' sketches XOR to the sketch of the combined
//! vector. A one-hot vector at `j*` gives `Q = r_{j*}·L`; a vector with two
//! or more nonzero rows satisfies that for some `j` only with probability
//! about `ℓ_w·2^-63`.
//!
//! Limitation: the check computes `Q/L`, which tells the servers `r_{j*}`
//! and therefore the written row. This stands in for a zero-knowledge SNIP
//! audit; it is sound and complete, not private against the servers.

use std::collections::HashSet;

use aes::cipher::{generic_array::GenericArray, BlockEncrypt, KeyInit};
use aes::Aes128;
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};
use crate::model::ByteMatrix;

pub type Nonce = [u8; 16];

/// Wire size of one sketch frame.
pub const SKETCH_FRAME_BYTES: usize = 32;

/// GF(2^64) multiplication modulo `x^64 + x^4 + x^3 + x + 1`.
pub fn gf_mul(a: u64, b: u64) -> u64 {
    let (lo, hi) = clmul(a, b);
    reduce(lo, hi)
}

#[cfg(target_arch = "x86_64")]
fn clmul(a: u64, b: u64) -> (u64, u64) {
    if std::arch::is_x86_feature_detected!("pclmulqdq") {
        // SAFETY: the feature was detected at runtime.
        unsafe { clmul_pclmul(a, b) }
    } else {
        clmul_soft(a, b)
    }
}

#[cfg(not(target_arch = "x86_64"))]
fn clmul(a: u64, b: u64) -> (u64, u64) {
    clmul_soft(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "pclmulqdq,sse2")]
unsafe fn clmul_pclmul(a: u64, b: u64) -> (u64, u64) {
    use std::arch::x86_64::*;
    let x = _mm_set_epi64x(0, a as i64);
    let y = _mm_set_epi64x(0, b as i64);
    let r = _mm_clmulepi64_si128(x, y, 0);
    let lo = _mm_cvtsi128_si64(r) as u64;
    let hi = _mm_cvtsi128_si64(_mm_unpackhi_epi64(r, r)) as u64;
    (lo, hi)
}

fn clmul_soft(a: u64, b: u64) -> (u64, u64) {
    let mut lo = 0u64;
    let mut hi = 0u64;
    for i in 0..64 {
        let mask = 0u64.wrapping_sub((b >> i) & 1);
        lo ^= (a << i) & mask;
        if i > 0 {
            hi ^= (a >> (64 - i)) & mask;
        }
    }
    (lo, hi)
}

fn reduce(lo: u64, hi: u64) -> u64 {
    // x^64 ≡ x^4 + x^3 + x + 1
    let fold = |h: u64| -> (u64, u64) {
        let l = h ^ (h << 1) ^ (h << 3) ^ (h << 4);
        let o = (h >> 63) ^ (h >> 61) ^ (h >> 60);
        (l, o)
    };
    let (l1, o1) = fold(hi);
    let (l2, _) = fold(o1);
    lo ^ l1 ^ l2
}

pub fn gf_inv(a: u64) -> Option<u64> {
    if a == 0 {
        return None;
    }
    // a^(2^64 - 2)
    let mut result = 1u64;
    let mut base = a;
    let mut e: u64 = u64::MAX - 1;
    while e > 0 {
        if e & 1 == 1 {
            result = gf_mul(result, base);
        }
        base = gf_mul(base, base);
        e >>= 1;
    }
    Some(result)
}

/// What a single server reveals about one request.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct AuditSketch {
    pub linear: u64,
    pub quadratic: u64,
    pub nonce: Nonce,
}

impl AuditSketch {
    /// `[16B nonce | 8B linear | 8B quadratic]`
    pub fn to_bytes(&self) -> [u8; SKETCH_FRAME_BYTES] {
        let mut out = [0u8; SKETCH_FRAME_BYTES];
        out[..16].copy_from_slice(&self.nonce);
        out[16..24].copy_from_slice(&self.linear.to_le_bytes());
        out[24..].copy_from_slice(&self.quadratic.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        check_len(SKETCH_FRAME_BYTES, bytes.len())?;
        Ok(Self {
            nonce: bytes[..16].try_into().unwrap(),
            linear: u64::from_le_bytes(bytes[16..24].try_into().unwrap()),
            quadratic: u64::from_le_bytes(bytes[24..].try_into().unwrap()),
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum AuditReason {
    Ok,
    NotOneHot,
    TranscriptMismatch,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct AuditVerdict {
    pub accepted: bool,
    pub reason: AuditReason,
}

impl AuditVerdict {
    fn from_reason(reason: AuditReason) -> Self {
        Self {
            accepted: reason == AuditReason::Ok,
            reason,
        }
    }
}

/// Per-request nonce binding a sketch to `(round, client)`.
pub fn request_nonce(round: u64, client_id: u64) -> Nonce {
    let mut h = Sha256::new();
    h.update(b"2pps-audit-nonce");
    h.update(round.to_le_bytes());
    h.update(client_id.to_le_bytes());
    h.finalize()[..16].try_into().unwrap()
}

/// Round-scoped audit state derived from the shared sketch seed.
pub struct Auditor {
    cipher: Aes128,
    weights: Vec<u64>,
    weights_sq: Vec<u64>,
    weight_set: HashSet<u64>,
}

impl Auditor {
    pub fn new(sketch_seed: [u8; 16], domain_size: usize) -> Self {
        let cipher = Aes128::new(GenericArray::from_slice(&sketch_seed));
        let weights: Vec<u64> = (0..domain_size as u64)
            .map(|j| prf(&cipher, 0, j, &[0u8; 16]))
            .collect();
        let weights_sq = weights.iter().map(|&r| gf_mul(r, r)).collect();
        let weight_set = weights.iter().copied().collect();
        Self {
            cipher,
            weights,
            weights_sq,
            weight_set,
        }
    }

    pub fn domain_size(&self) -> usize {
        self.weights.len()
    }

    fn digest_coefficients(&self, width: usize, nonce: &Nonce) -> Vec<u64> {
        (0..width.div_ceil(8) as u64)
            .map(|c| prf(&self.cipher, 1, c, nonce))
            .collect()
    }

    pub fn sketch(&self, expanded: &ByteMatrix, nonce: Nonce) -> Result<AuditSketch> {
        check_len(self.weights.len(), expanded.rows())?;
        let sigma = self.digest_coefficients(expanded.width(), &nonce);
        let mut linear = 0u64;
        let mut quadratic = 0u64;
        for (j, row) in expanded.iter_rows().enumerate() {
            let mut d = 0u64;
            for (c, chunk) in row.chunks(8).enumerate() {
                let mut buf = [0u8; 8];
                buf[..chunk.len()].copy_from_slice(chunk);
                let v = u64::from_le_bytes(buf);
                if v != 0 {
                    d ^= gf_mul(sigma[c], v);
                }
            }
            if d != 0 {
                linear ^= gf_mul(self.weights[j], d);
                quadratic ^= gf_mul(self.weights_sq[j], d);
            }
        }
        Ok(AuditSketch {
            linear,
            quadratic,
            nonce,
        })
    }

    /// Combines one sketch per server and decides.
    pub fn combine(&self, sketches: &[AuditSketch]) -> AuditVerdict {
        let Some(first) = sketches.first() else {
            return AuditVerdict::from_reason(AuditReason::TranscriptMismatch);
        };
        if sketches.iter().any(|s| s.nonce != first.nonce) {
            return AuditVerdict::from_reason(AuditReason::TranscriptMismatch);
        }
        let linear = sketches.iter().fold(0, |a, s| a ^ s.linear);
        let quadratic = sketches.iter().fold(0, |a, s| a ^ s.quadratic);
        let reason = match (linear, quadratic) {
            (0, 0) => AuditReason::Ok,
            (0, _) | (_, 0) => AuditReason::NotOneHot,
            (l, q) => {
                let ratio = gf_mul(q, gf_inv(l).expect("nonzero"));
                if self.weight_set.contains(&ratio) {
                    AuditReason::Ok
                } else {
                    AuditReason::NotOneHot
                }
            }
        };
        AuditVerdict::from_reason(reason)
    }
}

fn prf(cipher: &Aes128, domain: u8, index: u64, nonce: &Nonce) -> u64 {
    let mut block = *nonce;
    block[0] ^= domain;
    for (b, x) in block[8..].iter_mut().zip(index.to_le_bytes()) {
        *b ^= x;
    }
    let mut g = GenericArray::from(block);
    cipher.encrypt_block(&mut g);
    u64::from_le_bytes(g[..8].try_into().unwrap())
}

pub fn sketch_share(expanded: &ByteMatrix, sketch_seed: [u8; 16], nonce: Nonce) -> AuditSketch {
    Auditor::new(sketch_seed, expanded.rows())
        .sketch(expanded, nonce)
        .expect("auditor domain matches matrix")
}

/// Reference verdict from the combined vector itself (sees everything).
pub fn inspect_combined(combined: &ByteMatrix) -> AuditVerdict {
    let reason = if combined.nonzero_rows().len() <= 1 {
        AuditReason::Ok
    } else {
        AuditReason::NotOneHot
    };
    AuditVerdict::from_reason(reason)
}

/// Rejects sketches when any is not from the expected request.
pub fn check_nonce(sketch: &AuditSketch, expected: &Nonce) -> Result<()> {
    if &sketch.nonce == expected {
        Ok(())
    } else {
        Err(Error::Malformed("stale audit nonce".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpf::{eval_full, gen_dpf, PointFunction};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Bit-serial reference multiplication (polynomial long division).
    fn slow_mul(a: u64, b: u64) -> u64 {
        let mut r = 0u64;
        let mut a = a;
        for i in 0..64 {
            if (b >> i) & 1 == 1 {
                r ^= a;
            }
            let carry = a >> 63;
            a <<= 1;
            if carry == 1 {
                a ^= 0x1B;
            }
        }
        r
    }

    #[test]
    fn field_arithmetic() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let (a, b): (u64, u64) = (rng.gen(), rng.gen());
            assert_eq!(gf_mul(a, b), slow_mul(a, b));
            let (lo, hi) = clmul_soft(a, b);
            assert_eq!(reduce(lo, hi), slow_mul(a, b));
            assert_eq!(gf_mul(a, b), gf_mul(b, a));
        }
        for _ in 0..50 {
            let a: u64 = rng.gen::<u64>() | 1;
            assert_eq!(gf_mul(a, gf_inv(a).unwrap()), 1);
        }
        assert_eq!(gf_inv(0), None);
    }

    fn honest_pair(rng: &mut ChaCha20Rng, domain: usize, w: usize) -> (ByteMatrix, ByteMatrix) {
        let mut v = vec![0u8; w];
        rng.fill(&mut v[..]);
        let f = PointFunction::new(rng.gen_range(0..domain), v);
        let (a, b) = gen_dpf(&f, domain, rng).unwrap();
        (
            eval_full(&a, domain).unwrap(),
            eval_full(&b, domain).unwrap(),
        )
    }

    #[test]
    fn zero_matrix_sketches_to_zero() {
        let s = sketch_share(&ByteMatrix::zeros(16, 20), [7; 16], [1; 16]);
        assert_eq!((s.linear, s.quadratic), (0, 0));
    }

    #[test]
    fn sketch_is_xor_linear_and_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let auditor = Auditor::new([3; 16], 32);
        let (a, b) = honest_pair(&mut rng, 32, 24);
        let nonce = request_nonce(1, 9);
        let sa = auditor.sketch(&a, nonce).unwrap();
        let sb = auditor.sketch(&b, nonce).unwrap();
        let mut c = a.clone();
        c.xor_assign(&b).unwrap();
        let sc = auditor.sketch(&c, nonce).unwrap();
        assert_eq!(sa.linear ^ sb.linear, sc.linear);
        assert_eq!(sa.quadratic ^ sb.quadratic, sc.quadratic);
        assert_eq!(sa, auditor.sketch(&a, nonce).unwrap());
        assert_eq!(sketch_share(&a, [3; 16], nonce), sa);
    }

    #[test]
    fn honest_requests_accepted() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let auditor = Auditor::new(rng.gen(), 64);
        for i in 0..500 {
            let (a, b) = honest_pair(&mut rng, 64, 16);
            let nonce = request_nonce(i, 1);
            let v = auditor.combine(&[
                auditor.sketch(&a, nonce).unwrap(),
                auditor.sketch(&b, nonce).unwrap(),
            ]);
            assert_eq!(v.reason, AuditReason::Ok);
            assert!(v.accepted);
        }
    }

    #[test]
    fn nonzero_row_with_zero_leading_bytes_is_covered() {
        let auditor = Auditor::new([5; 16], 8);
        let mut m = ByteMatrix::zeros(8, 24);
        m.row_mut(2)[20] = 9;
        let s = auditor.sketch(&m, [0; 16]).unwrap();
        assert_ne!(s.linear, 0);
        assert!(auditor.combine(&[s]).accepted);
        m.row_mut(6)[17] = 1;
        let s = auditor.sketch(&m, [0; 16]).unwrap();
        assert_eq!(auditor.combine(&[s]).reason, AuditReason::NotOneHot);
    }

    #[test]
    fn two_hot_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..300 {
            let auditor = Auditor::new(rng.gen(), 32);
            let mut m = ByteMatrix::zeros(32, 12);
            let i = rng.gen_range(0..32);
            let j = (i + rng.gen_range(1..32)) % 32;
            rng.fill(m.row_mut(i));
            rng.fill(m.row_mut(j));
            let v = auditor.combine(&[auditor.sketch(&m, [1; 16]).unwrap()]);
            assert!(!v.accepted);
            assert_eq!(inspect_combined(&m).reason, AuditReason::NotOneHot);
        }
    }

    #[test]
    fn mismatched_nonces() {
        let auditor = Auditor::new([1; 16], 4);
        let m = ByteMatrix::zeros(4, 8);
        let a = auditor.sketch(&m, request_nonce(5, 1)).unwrap();
        let b = auditor.sketch(&m, request_nonce(4, 1)).unwrap();
        assert_eq!(
            auditor.combine(&[a, b]).reason,
            AuditReason::TranscriptMismatch
        );
        assert!(check_nonce(&b, &request_nonce(5, 1)).is_err());
    }

    #[test]
    fn sketch_frame_budget() {
        let s = AuditSketch {
            linear: 1,
            quadratic: 2,
            nonce: [9; 16],
        };
        let bytes = s.to_bytes();
        // 16 nonce bytes + exactly 2k = 128 bits derived from the share
        assert_eq!(bytes.len() - 16, 2 * 64 / 8);
        assert_eq!(AuditSketch::from_bytes(&bytes).unwrap(), s);
    }
}
